"""Parallel expert blocks: linear lift + residual self-attention + norm.

Each expert consumes exactly one correlation matrix and never sees the
other modality; the geometric expert adapts while the semantic expert
refines frozen priors. Both carry a small linear classifier head whose
softmax output feeds the consistency regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dafss import autodiff as ad
from dafss.autodiff import Tensor, parameter
from dafss.errors import ConfigurationError, ShapeError


@dataclass
class AttentionParams:
    wq: list  # per-head [d, d/h]
    wk: list
    wv: list
    wo: Tensor  # [d, d]
    heads: int


def init_attention(rng: np.random.Generator, d: int, heads: int, prefix: str) -> AttentionParams:
    if d % heads != 0:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    s = 1.0 / np.sqrt(d)
    wq = [parameter(rng.normal(0, s, (d, dh)), name=f"{prefix}.wq{h}") for h in range(heads)]
    wk = [parameter(rng.normal(0, s, (d, dh)), name=f"{prefix}.wk{h}") for h in range(heads)]
    wv = [parameter(rng.normal(0, s, (d, dh)), name=f"{prefix}.wv{h}") for h in range(heads)]
    wo = parameter(rng.normal(0, s, (d, d)), name=f"{prefix}.wo")
    return AttentionParams(wq=wq, wk=wk, wv=wv, wo=wo, heads=heads)


def attention_parameters(attn: AttentionParams) -> dict[str, Tensor]:
    out = {}
    for group in (attn.wq, attn.wk, attn.wv):
        for w in group:
            out[w.name] = w
    out[attn.wo.name] = attn.wo
    return out


def mhsa(x: Tensor, attn: AttentionParams) -> Tensor:
    """Scaled dot-product self-attention over token rows of [t, d]."""
    d = x.shape[1]
    if d % attn.heads != 0:
        raise ConfigurationError(f"token dim {d} not divisible by {attn.heads} heads")
    dh = d // attn.heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    heads = []
    for h in range(attn.heads):
        q = ad.matmul(x, attn.wq[h])
        k = ad.matmul(x, attn.wk[h])
        v = ad.matmul(x, attn.wv[h])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
        weights = ad.softmax(scores, axis=1)
        heads.append(ad.matmul(weights, v))
    stacked = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.matmul(stacked, attn.wo)


@dataclass
class ExpertParams:
    lift_w: Tensor  # [n_s, d_model]
    lift_b: Tensor  # [d_model]
    attn: AttentionParams
    ln_gamma: Tensor
    ln_beta: Tensor
    cls_w: Tensor  # [d_model, n_way+1]
    cls_b: Tensor
    d_model: int


def init_expert(rng: np.random.Generator, n_s: int, d_model: int, n_classes: int,
                heads: int, prefix: str) -> ExpertParams:
    s = 1.0 / np.sqrt(n_s)
    return ExpertParams(
        lift_w=parameter(rng.normal(0, s, (n_s, d_model)), name=f"{prefix}.lift_w"),
        lift_b=parameter(np.zeros(d_model), name=f"{prefix}.lift_b"),
        attn=init_attention(rng, d_model, heads, prefix=f"{prefix}.attn"),
        ln_gamma=parameter(np.ones(d_model), name=f"{prefix}.ln_gamma"),
        ln_beta=parameter(np.zeros(d_model), name=f"{prefix}.ln_beta"),
        cls_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_model), (d_model, n_classes)), name=f"{prefix}.cls_w"),
        cls_b=parameter(np.zeros(n_classes), name=f"{prefix}.cls_b"),
        d_model=d_model,
    )


def expert_parameters(p: ExpertParams) -> dict[str, Tensor]:
    out = {p.lift_w.name: p.lift_w, p.lift_b.name: p.lift_b,
           p.ln_gamma.name: p.ln_gamma, p.ln_beta.name: p.ln_beta,
           p.cls_w.name: p.cls_w, p.cls_b.name: p.cls_b}
    out.update(attention_parameters(p.attn))
    return out


@dataclass
class ExpertOutput:
    refined: Tensor  # [N_q, d_model]
    logits: Tensor  # [N_q, n_way+1]
    probs: Tensor  # softmax of logits


def run_expert(corr: Tensor, params: ExpertParams) -> ExpertOutput:
    """Refine one correlation matrix; output depends on that input alone."""
    if corr.shape[1] != params.lift_w.shape[0]:
        raise ShapeError(
            f"correlation has {corr.shape[1]} columns, lift expects {params.lift_w.shape[0]}"
        )
    h = ad.add_rowvec(ad.matmul(corr, params.lift_w), params.lift_b)
    refined = ad.layer_norm(ad.add(h, mhsa(h, params.attn)), params.ln_gamma, params.ln_beta)
    logits = ad.add_rowvec(ad.matmul(refined, params.cls_w), params.cls_b)
    return ExpertOutput(refined=refined, logits=logits, probs=ad.softmax(logits, axis=1))


def expert_probs(refined: Tensor, cls_w: Tensor, cls_b: Tensor) -> Tensor:
    """Classifier head alone: per-point class distribution from features."""
    if refined.shape[1] != cls_w.shape[0]:
        raise ShapeError(f"classifier expects dim {cls_w.shape[0]}, got {refined.shape[1]}")
    return ad.softmax(ad.add_rowvec(ad.matmul(refined, cls_w), cls_b), axis=1)
