"""Feature heads and the support-query correlation stage.

Two encoders stand in for the usual pretrained backbones:

  * a trainable pointwise MLP over (x, y, z, texture one-hot) supplying the
    geometric pathway, and
  * a frozen semantic head keyed on the texture channel, whose class
    embeddings are mixed through a row-stochastic confusion matrix and
    rescaled to a large fixed norm. It is deliberately blind wherever two
    classes share a texture id.

Prototypes are masked average pools over support points, one per way plus
one background prototype (row 0). Correlations are cosine similarities of
query features against the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dafss import autodiff as ad
from dafss.autodiff import Tensor, constant, parameter
from dafss.errors import DegenerateSupportError, ShapeError
from dafss.scenes import Scene


@dataclass
class CorrelationPair:
    geo: Tensor  # [N_q, n_way+1] cosine similarities in the geometric space
    sem: Tensor  # same shape, semantic space


# ---------------------------------------------------------------------------
# trainable geometric head
# ---------------------------------------------------------------------------


class UFHead:
    """Pointwise two-layer MLP: (xyz, texture one-hot) -> geometric feature."""

    def __init__(self, rng: np.random.Generator, n_textures: int, d_out: int = 32,
                 hidden: int = 64, init_scale: float = 1.0):
        d_in = 3 + n_textures
        s = init_scale
        self.w1 = parameter(rng.normal(0, s / np.sqrt(d_in), (d_in, hidden)), name="uf.w1")
        self.b1 = parameter(np.zeros(hidden), name="uf.b1")
        self.w2 = parameter(rng.normal(0, s / np.sqrt(hidden), (hidden, d_out)), name="uf.w2")
        self.b2 = parameter(np.zeros(d_out), name="uf.b2")
        self.n_textures = n_textures
        self.d_out = d_out

    def parameters(self) -> dict[str, Tensor]:
        return {"uf.w1": self.w1, "uf.b1": self.b1, "uf.w2": self.w2, "uf.b2": self.b2}


def uf_encode(scene: Scene, head: UFHead) -> Tensor:
    """Per-point geometric features, differentiable w.r.t. the head."""
    n = len(scene)
    onehot = np.zeros((n, head.n_textures))
    onehot[np.arange(n), scene.texture] = 1.0
    x = constant(np.hstack([scene.points, onehot]))
    h = ad.relu(ad.add_rowvec(ad.matmul(x, head.w1), head.b1))
    return ad.add_rowvec(ad.matmul(h, head.w2), head.b2)


# ---------------------------------------------------------------------------
# frozen semantic head
# ---------------------------------------------------------------------------


def confusion_matrix_uniform_offdiag(n_classes: int, off_mass: float) -> np.ndarray:
    """Row-stochastic matrix: 1 - off_mass on the diagonal, rest spread evenly."""
    if not 0.0 <= off_mass <= 1.0:
        raise ValueError(f"off-diagonal mass must be in [0,1], got {off_mass}")
    m = np.full((n_classes, n_classes), off_mass / max(n_classes - 1, 1))
    np.fill_diagonal(m, 1.0 - off_mass)
    return m


class IFHead:
    """Frozen semantic encoder; all state is plain numpy, never in the graph.

    feature(point) = feature_norm * unit( confusion[texture] @ class_embed
                                          + pos_gain * pos_table[cell(xyz)] )
    """

    def __init__(self, rng: np.random.Generator, n_classes: int, d_out: int = 64,
                 confusion: np.ndarray | None = None, feature_norm: float = 4.0,
                 pos_gain: float = 0.25, n_cells: int = 64, cell_size: float = 2.0):
        self.class_embed = rng.normal(0, 1.0, (n_classes, d_out))
        self.class_embed /= np.linalg.norm(self.class_embed, axis=1, keepdims=True)
        if confusion is None:
            confusion = np.eye(n_classes)
        confusion = np.asarray(confusion, dtype=np.float64)
        if confusion.shape != (n_classes, n_classes):
            raise ShapeError(f"confusion matrix shape {confusion.shape} != ({n_classes},{n_classes})")
        if np.max(np.abs(confusion.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("confusion matrix rows must sum to 1 within 1e-9")
        self.confusion = confusion
        self.pos_table = rng.normal(0, 1.0, (n_cells, d_out))
        self.pos_table /= np.linalg.norm(self.pos_table, axis=1, keepdims=True)
        self.pos_gain = float(pos_gain)
        self.cell_size = float(cell_size)
        self.feature_norm = float(feature_norm)
        self.n_classes = n_classes
        self.d_out = d_out

    def state_arrays(self) -> list[np.ndarray]:
        return [self.class_embed, self.confusion, self.pos_table]

    def _cells(self, points: np.ndarray) -> np.ndarray:
        cells = np.floor(points / self.cell_size).astype(np.int64)
        mixed = cells[:, 0] * 73856093 ^ cells[:, 1] * 19349663 ^ cells[:, 2] * 83492791
        return np.abs(mixed) % len(self.pos_table)


def if_encode(scene: Scene, head: IFHead) -> Tensor:
    """Per-point semantic features as a detached constant tensor."""
    t = scene.texture
    if np.any(t < 0) or np.any(t >= head.n_classes):
        bad = int(t[(t < 0) | (t >= head.n_classes)][0])
        raise KeyError(f"texture id {bad} outside the semantic table (0..{head.n_classes - 1})")
    mixed = head.confusion[t] @ head.class_embed
    if head.pos_gain != 0.0:
        mixed = mixed + head.pos_gain * head.pos_table[head._cells(scene.points)]
    norms = np.maximum(np.linalg.norm(mixed, axis=1, keepdims=True), 1e-12)
    return constant(head.feature_norm * mixed / norms)


# ---------------------------------------------------------------------------
# frozen text-embedding stub
# ---------------------------------------------------------------------------


class TextStub:
    """Seeded class-id -> embedding table standing in for a text encoder."""

    def __init__(self, rng: np.random.Generator, n_classes: int, d_out: int = 64):
        self.table = rng.normal(0, 1.0, (n_classes, d_out))
        self.table /= np.linalg.norm(self.table, axis=1, keepdims=True)
        self.n_classes = n_classes

    def state_arrays(self) -> list[np.ndarray]:
        return [self.table]

    def lookup(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.n_classes:
            raise KeyError(f"class id {class_id} outside the embedding table (0..{self.n_classes - 1})")
        return self.table[class_id]


def text_guidance(base_class_ids, novel_class_ids, stub: TextStub) -> tuple[Tensor, Tensor]:
    """(mean base-class embedding, per-way novel embeddings), both detached."""
    base = np.stack([stub.lookup(int(c)) for c in base_class_ids])
    novel = np.stack([stub.lookup(int(c)) for c in novel_class_ids])
    return constant(base.mean(axis=0)), constant(novel)


# ---------------------------------------------------------------------------
# prototypes and correlations
# ---------------------------------------------------------------------------


def pooling_matrix(masks: list[np.ndarray]) -> np.ndarray:
    """Row-stochastic [n_way+1, N] matrix: row 0 background, then one per way."""
    n = len(masks[0])
    fg_union = np.zeros(n, dtype=bool)
    for m in masks:
        fg_union |= m
    rows = [~fg_union] + list(masks)
    mat = np.zeros((len(rows), n))
    for i, m in enumerate(rows):
        count = int(m.sum())
        if count == 0:
            which = "background" if i == 0 else f"way {i - 1}"
            raise DegenerateSupportError(f"empty support mask for {which}")
        mat[i, m] = 1.0 / count
    return mat


def extract_prototypes(geo_feats: Tensor, sem_feats: Tensor,
                       masks: list[np.ndarray]) -> tuple[Tensor, Tensor]:
    """Masked average pooling per way plus background, for both modalities.

    The geometric prototypes stay in the graph; the semantic ones are
    detached regardless of how the features arrived.
    """
    if geo_feats.shape[0] != sem_feats.shape[0]:
        raise ShapeError(f"feature row counts differ: {geo_feats.shape} vs {sem_feats.shape}")
    pool = constant(pooling_matrix(masks))
    geo_protos = ad.matmul(pool, geo_feats)
    sem_protos = ad.stop_gradient(ad.matmul(pool, sem_feats))
    return geo_protos, sem_protos


def compute_correlations(query_geo: Tensor, query_sem: Tensor,
                         geo_protos: Tensor, sem_protos: Tensor) -> CorrelationPair:
    """Cosine similarity of each query point against each prototype."""
    return CorrelationPair(
        geo=ad.cosine_rows(query_geo, geo_protos),
        sem=ad.cosine_rows(ad.stop_gradient(query_sem), ad.stop_gradient(sem_protos)),
    )
