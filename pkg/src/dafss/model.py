"""Full segmentation model: heads, experts, arbitration, decoder.

Two variants share every stage except the expert block. The decoupled
variant refines the geometric and semantic correlations in separate experts
and may train with the alignment regularizers; the fused baseline sums the
two correlation matrices and refines them in a single expert, with no
alignment graph at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dafss import autodiff as ad
from dafss.alignment import (
    AlignmentParams,
    alignment_parameters,
    consistency_loss,
    init_alignment,
    prototype_alignment_loss,
)
from dafss.arbitration import (
    ArbitrationParams,
    DecoderParams,
    arbitrate,
    arbitration_parameters,
    decode,
    decoder_parameters,
    init_arbitration,
    init_decoder,
    merge_features,
    semantic_gate,
)
from dafss.autodiff import Tensor, parameter
from dafss.errors import ConfigurationError
from dafss.experts import ExpertOutput, expert_parameters, init_expert, run_expert
from dafss.features import (
    CorrelationPair,
    IFHead,
    TextStub,
    UFHead,
    compute_correlations,
    confusion_matrix_uniform_offdiag,
    extract_prototypes,
    if_encode,
    uf_encode,
)
from dafss.scenes import Episode

MODES = ("decoupled", "fused")


@dataclass
class ModelConfig:
    n_classes: int = 10
    base_class_ids: tuple = tuple(range(6))
    n_way: int = 1
    d_uf: int = 32
    uf_hidden: int = 64
    d_if: int = 64
    d_geo: int = 192
    d_sem: int = 512
    d_arb: int = 192
    heads: int = 4
    sam_layers: int = 1
    knn_k: int = 8
    knn_radius: float = 0.3
    if_feature_norm: float = 4.0
    if_confusion: float = 0.1
    if_pos_gain: float = 0.25
    lambda_proto: float = 0.001
    lambda_consistency: float = 0.5
    seed: int = 0

    @property
    def d_bg(self) -> int:
        return max(self.d_arb // 4, 1)


@dataclass
class ForwardOutput:
    logits: Tensor  # [N_q, n_way+1]
    base_logits: Optional[Tensor]  # [N_q, n_base] or None
    proto_loss: Optional[Tensor]
    consist_loss: Optional[Tensor]
    correlations: CorrelationPair
    geo_out: ExpertOutput
    sem_out: Optional[ExpertOutput]
    merged: Tensor


class SegModel:
    """One variant (decoupled or fused) with its full parameter set."""

    def __init__(self, config: ModelConfig, mode: str):
        if mode not in MODES:
            raise ConfigurationError(f"unknown variant {mode!r}, expected one of {MODES}")
        self.config = config
        self.mode = mode
        rng = np.random.default_rng([config.seed, MODES.index(mode)])

        n_s = config.n_way + 1
        n_cls = config.n_way + 1
        self.uf = UFHead(rng, n_textures=config.n_classes, d_out=config.d_uf,
                         hidden=config.uf_hidden)
        self.if_head = IFHead(
            rng, n_classes=config.n_classes, d_out=config.d_if,
            confusion=confusion_matrix_uniform_offdiag(config.n_classes, config.if_confusion),
            feature_norm=config.if_feature_norm, pos_gain=config.if_pos_gain,
        )
        self.text = TextStub(rng, n_classes=config.n_classes, d_out=config.d_if)

        if mode == "decoupled":
            self.geo_expert = init_expert(rng, n_s, config.d_geo, n_cls, config.heads, "geo")
            self.sem_expert = init_expert(rng, n_s, config.d_sem, n_cls, config.heads, "sem")
            self.align = init_alignment(rng, config.d_uf, config.d_if,
                                        config.lambda_proto, config.lambda_consistency)
            merge_in = config.d_geo + config.d_sem
        else:
            self.geo_expert = init_expert(rng, n_s, config.d_geo, n_cls, config.heads, "fused")
            self.sem_expert = None
            self.align = None
            merge_in = config.d_geo

        self.arb = init_arbitration(rng, d_in=merge_in, d_arb=config.d_arb,
                                    d_guid=config.d_if, n_layers=config.sam_layers,
                                    heads=config.heads, d_bg=config.d_bg)
        self.decoder = init_decoder(rng, config.d_arb, n_cls,
                                    k=config.knn_k, radius=config.knn_radius)
        n_base = len(config.base_class_ids)
        self.base_w = parameter(rng.normal(0, 1.0 / np.sqrt(config.d_arb),
                                           (config.d_arb, n_base)), name="base.w")
        self.base_b = parameter(np.zeros(n_base), name="base.b")

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.uf.parameters())
        out.update(expert_parameters(self.geo_expert))
        if self.sem_expert is not None:
            out.update(expert_parameters(self.sem_expert))
        if self.align is not None:
            out.update(alignment_parameters(self.align))
        out.update(arbitration_parameters(self.arb))
        out.update(decoder_parameters(self.decoder))
        out["base.w"] = self.base_w
        out["base.b"] = self.base_b
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        """Disjoint name groups covering every trainable parameter.

        'uf' is the geometric pathway (point encoder plus its expert, or the
        single expert in the fused variant); 'sem' is the semantic expert;
        'shared' is everything downstream of the experts."""
        uf = list(self.uf.parameters()) + list(expert_parameters(self.geo_expert))
        sem = list(expert_parameters(self.sem_expert)) if self.sem_expert is not None else []
        shared = [n for n in self.parameters() if n not in set(uf) | set(sem)]
        return {"uf": uf, "sem": sem, "shared": shared}

    def group_tensors(self, group: str) -> list[Tensor]:
        params = self.parameters()
        return [params[n] for n in self.parameter_groups()[group]]

    def trainable_param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def frozen_state(self) -> list[np.ndarray]:
        """Copies of every frozen array, for bit-identity audits."""
        return [a.copy() for a in self.if_head.state_arrays() + self.text.state_arrays()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.parameters().items()}
        out["arb.bn_state.running_mean"] = self.arb.bn_state.running_mean.copy()
        out["arb.bn_state.running_var"] = self.arb.bn_state.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, arr in state.items():
            if name == "arb.bn_state.running_mean":
                self.arb.bn_state.running_mean = arr.copy()
            elif name == "arb.bn_state.running_var":
                self.arb.bn_state.running_var = arr.copy()
            elif name in params:
                if params[name].data.shape != arr.shape:
                    raise ConfigurationError(
                        f"checkpoint shape {arr.shape} does not match parameter "
                        f"{name!r} of shape {params[name].data.shape}")
                params[name].data = arr.copy()
            else:
                raise ConfigurationError(f"checkpoint contains unknown parameter {name!r}")

    # -- forward --------------------------------------------------------------

    def _encode_support(self, episode: Episode):
        geo_parts, sem_parts = [], []
        mask_cols: list[list[np.ndarray]] = [[] for _ in range(episode.n_way)]
        for way, shots in enumerate(episode.support):
            for shot in shots:
                geo_parts.append(uf_encode(shot.scene, self.uf))
                sem_parts.append(if_encode(shot.scene, self.if_head))
                n = len(shot.scene)
                for other in range(episode.n_way):
                    mask_cols[other].append(shot.mask if other == way else np.zeros(n, dtype=bool))
        geo = geo_parts[0] if len(geo_parts) == 1 else ad.concat(geo_parts, axis=0)
        sem = sem_parts[0] if len(sem_parts) == 1 else ad.concat(sem_parts, axis=0)
        masks = [np.concatenate(cols) for cols in mask_cols]
        return geo, sem, masks

    def forward(self, episode: Episode, train: bool) -> ForwardOutput:
        """One episode through the pipeline.

        Alignment losses are built only in train mode, on the decoupled
        variant, and only for the terms whose weight is nonzero."""
        if episode.n_way != self.config.n_way:
            raise ConfigurationError(
                f"episode is {episode.n_way}-way, model built for {self.config.n_way}-way")
        sup_geo, sup_sem, masks = self._encode_support(episode)
        geo_protos, sem_protos = extract_prototypes(sup_geo, sup_sem, masks)

        q_geo = uf_encode(episode.query, self.uf)
        q_sem = if_encode(episode.query, self.if_head)
        corr = compute_correlations(q_geo, q_sem, geo_protos, sem_protos)

        proto_loss = consist_loss = None
        if self.mode == "decoupled":
            geo_out = run_expert(corr.geo, self.geo_expert)
            sem_out = run_expert(corr.sem, self.sem_expert)
            if train:
                if self.align.lambda_proto > 0.0:
                    proto_loss = prototype_alignment_loss(geo_protos, sem_protos, self.align)
                if self.align.lambda_consistency > 0.0:
                    consist_loss = consistency_loss(geo_out.probs, sem_out.probs)
            merged = merge_features(geo_out.refined, sem_out.refined, self.arb, train)
        else:
            geo_out = run_expert(ad.add(corr.geo, corr.sem), self.geo_expert)
            sem_out = None
            merged = merge_features(geo_out.refined, None, self.arb, train)

        g_base, g_q = self._guidance(episode)
        arb_out = arbitrate(merged, g_base, self.arb)
        gated = semantic_gate(arb_out, g_q, self.arb)
        logits = decode(gated, episode.query.points, self.decoder)

        base_logits = None
        if train and episode.base_class_labels is not None:
            base_logits = ad.add_rowvec(ad.matmul(merged, self.base_w), self.base_b)

        return ForwardOutput(logits=logits, base_logits=base_logits,
                             proto_loss=proto_loss, consist_loss=consist_loss,
                             correlations=corr, geo_out=geo_out, sem_out=sem_out,
                             merged=merged)

    def _guidance(self, episode: Episode):
        from dafss.features import text_guidance

        return text_guidance(self.config.base_class_ids, episode.novel_classes, self.text)

    def predict(self, episode: Episode) -> np.ndarray:
        """Per-point class predictions in the episode's {0..n_way} space."""
        out = self.forward(episode, train=False)
        return np.argmax(out.logits.data, axis=1)


def build_variant(config: ModelConfig, mode: str) -> SegModel:
    return SegModel(config, mode)
