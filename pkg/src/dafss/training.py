"""Compound objective, episodic training loop, gradient-norm monitor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from dafss import autodiff as ad
from dafss.autodiff import Tensor, backward, constant
from dafss.errors import MonitoringError, NumericError
from dafss.model import SegModel
from dafss.optim import AdamW
from dafss.scenes import Episode


@dataclass
class LossWeights:
    lambda_base: float = 0.1
    lambda_proto: float = 0.001
    lambda_consistency: float = 0.5

    def __post_init__(self):
        if min(self.lambda_base, self.lambda_proto, self.lambda_consistency) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainRecord:
    step: int
    loss_total: float
    loss_seg: float
    loss_base: float
    loss_proto: float
    loss_consistency: float
    grad_norm_uf: float
    grad_norm_sem: float
    miou_train: float

    CSV_FIELDS = ("step", "loss_total", "loss_seg", "loss_base", "loss_proto",
                  "loss_consistency", "grad_norm_uf", "grad_norm_sem", "miou_train")


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over query points."""
    n, c = logits.shape
    labels = np.asarray(labels)
    for i, v in enumerate(labels):
        if not 0 <= v < c:
            raise ValueError(f"label {int(v)} out of range [0,{c}) at point {i}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.mul(ad.log_softmax(logits, axis=1), constant(onehot))
    return ad.scale(ad.sum_all(picked), -1.0 / n)


def base_loss(aux_logits: Optional[Tensor], base_labels: Optional[np.ndarray]) -> Tensor:
    """Cross-entropy of the auxiliary head on points that carry a base label.

    Points labelled -1 are excluded; with no labelled point at all the loss
    is an exact zero constant."""
    if aux_logits is None or base_labels is None:
        return constant(0.0)
    base_labels = np.asarray(base_labels)
    keep = base_labels >= 0
    m = int(keep.sum())
    if m == 0:
        return constant(0.0)
    n, c = aux_logits.shape
    if np.any(base_labels >= c):
        bad = int(np.argmax(base_labels >= c))
        raise ValueError(f"base label {int(base_labels[bad])} out of range [0,{c}) at point {bad}")
    onehot = np.zeros((n, c))
    onehot[keep, base_labels[keep]] = 1.0
    picked = ad.mul(ad.log_softmax(aux_logits, axis=1), constant(onehot))
    return ad.scale(ad.sum_all(picked), -1.0 / m)


def total_loss(seg: Tensor, base: Optional[Tensor], proto: Optional[Tensor],
               consist: Optional[Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the components; with all weights zero this IS seg."""
    total = seg
    for term, lam in ((base, weights.lambda_base),
                      (proto, weights.lambda_proto),
                      (consist, weights.lambda_consistency)):
        if term is not None and lam > 0.0:
            total = ad.add(total, ad.scale(term, lam))
    return total


def grad_norm(grad_map: Optional[dict], group: Iterable[Tensor]) -> float:
    """L2 norm over one parameter group's gradients.

    Parameters the graph never reached contribute zero; calling before any
    backward pass is an error."""
    if grad_map is None:
        raise MonitoringError("gradient norms requested before backward")
    total = 0.0
    for t in group:
        g = grad_map.get(t)
        if g is not None:
            total += float(np.sum(g * g))
    return float(np.sqrt(total))


def _quick_miou(preds: np.ndarray, labels: np.ndarray, n_way: int) -> float:
    ious = []
    for c in range(1, n_way + 1):
        inter = int(np.sum((preds == c) & (labels == c)))
        union = int(np.sum((preds == c) | (labels == c)))
        if union > 0:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0


def train_episode(model: SegModel, episode: Episode, optimizer: AdamW,
                  weights: LossWeights, step: int) -> TrainRecord:
    """One optimization step; pathway gradient norms are read pre-step."""
    out = model.forward(episode, train=True)
    seg = seg_loss(out.logits, episode.query_labels)
    base = base_loss(out.base_logits, episode.base_class_labels)
    total = total_loss(seg, base, out.proto_loss, out.consist_loss, weights)

    components = {
        "seg": seg.item(),
        "base": base.item(),
        "proto": out.proto_loss.item() if out.proto_loss is not None else 0.0,
        "consistency": out.consist_loss.item() if out.consist_loss is not None else 0.0,
    }
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite loss at step {step}: components {components}")

    grad_map = backward(total)
    gn_uf = grad_norm(grad_map, model.group_tensors("uf"))
    gn_sem = grad_norm(grad_map, model.group_tensors("sem"))
    optimizer.step()
    optimizer.zero_grad()

    preds = np.argmax(out.logits.data, axis=1)
    return TrainRecord(
        step=step,
        loss_total=total.item(),
        loss_seg=components["seg"],
        loss_base=components["base"],
        loss_proto=components["proto"],
        loss_consistency=components["consistency"],
        grad_norm_uf=gn_uf,
        grad_norm_sem=gn_sem,
        miou_train=_quick_miou(preds, episode.query_labels, episode.n_way),
    )


def train_run(model: SegModel, episodes: Iterable[Episode], optimizer: AdamW,
              weights: LossWeights,
              on_record: Optional[Callable[[TrainRecord], None]] = None) -> list:
    records = []
    for step, episode in enumerate(episodes):
        record = train_episode(model, episode, optimizer, weights, step)
        records.append(record)
        if on_record is not None:
            on_record(record)
    return records
