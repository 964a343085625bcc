"""Arbitration stack: fusion, guidance injection, attention layers, gating.

The expert outputs are concatenated, batch-normalized to reconcile their
scales, projected per point and rectified. Each arbitration layer first
rewrites the background channel partition of every token from base-class
guidance (foreground channels pass through bitwise untouched), then applies
residual self-attention with a layer norm. The final features are amplified
channel-wise by a sigmoid gate driven by the target-class embeddings, and a
small inverse-distance k-NN smoother plus classifier turns them into
per-point logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dafss import autodiff as ad
from dafss.autodiff import BatchNormState, Tensor, constant, parameter
from dafss.errors import ConfigurationError, ShapeError
from dafss.experts import AttentionParams, attention_parameters, init_attention, mhsa


@dataclass
class ArbitrationLayerParams:
    inject_w: Tensor  # [d_bg + d_guid, d_bg]
    inject_b: Tensor  # [d_bg]
    attn: AttentionParams
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class ArbitrationParams:
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_state: BatchNormState
    conv_w: Tensor  # [d_in, d_arb], the per-point 1x1 convolution
    conv_b: Tensor
    layers: list
    gate_w: Tensor  # [d_guid, d_arb]
    gate_b: Tensor
    d_arb: int
    d_bg: int


def init_arbitration(rng: np.random.Generator, d_in: int, d_arb: int, d_guid: int,
                     n_layers: int, heads: int, d_bg: int | None = None) -> ArbitrationParams:
    if n_layers < 1:
        raise ConfigurationError(f"need at least one arbitration layer, got {n_layers}")
    if d_bg is None:
        d_bg = d_arb // 4
    if not 0 < d_bg < d_arb:
        raise ConfigurationError(f"background partition {d_bg} must lie inside token dim {d_arb}")
    layers = []
    for i in range(n_layers):
        layers.append(ArbitrationLayerParams(
            inject_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_bg + d_guid), (d_bg + d_guid, d_bg)),
                               name=f"arb.l{i}.inject_w"),
            inject_b=parameter(np.zeros(d_bg), name=f"arb.l{i}.inject_b"),
            attn=init_attention(rng, d_arb, heads, prefix=f"arb.l{i}.attn"),
            ln_gamma=parameter(np.ones(d_arb), name=f"arb.l{i}.ln_gamma"),
            ln_beta=parameter(np.zeros(d_arb), name=f"arb.l{i}.ln_beta"),
        ))
    return ArbitrationParams(
        bn_gamma=parameter(np.ones(d_in), name="arb.bn_gamma"),
        bn_beta=parameter(np.zeros(d_in), name="arb.bn_beta"),
        bn_state=BatchNormState(d_in),
        conv_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_arb)), name="arb.conv_w"),
        conv_b=parameter(np.zeros(d_arb), name="arb.conv_b"),
        layers=layers,
        gate_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_guid), (d_guid, d_arb)), name="arb.gate_w"),
        gate_b=parameter(np.zeros(d_arb), name="arb.gate_b"),
        d_arb=d_arb,
        d_bg=d_bg,
    )


def arbitration_parameters(p: ArbitrationParams) -> dict[str, Tensor]:
    out = {p.bn_gamma.name: p.bn_gamma, p.bn_beta.name: p.bn_beta,
           p.conv_w.name: p.conv_w, p.conv_b.name: p.conv_b,
           p.gate_w.name: p.gate_w, p.gate_b.name: p.gate_b}
    for layer in p.layers:
        out[layer.inject_w.name] = layer.inject_w
        out[layer.inject_b.name] = layer.inject_b
        out[layer.ln_gamma.name] = layer.ln_gamma
        out[layer.ln_beta.name] = layer.ln_beta
        out.update(attention_parameters(layer.attn))
    return out


def merge_features(r_geo: Tensor, r_sem: Tensor | None, params: ArbitrationParams,
                   train: bool) -> Tensor:
    """Concat -> batch norm -> per-point linear -> ReLU. Outputs are >= 0.

    r_sem may be None (single-pathway variants feed one refined block)."""
    x = r_geo if r_sem is None else ad.concat([r_geo, r_sem], axis=1)
    if x.shape[1] != params.conv_w.shape[0]:
        raise ShapeError(f"merge input dim {x.shape[1]} != conv dim {params.conv_w.shape[0]}")
    normed = ad.batch_norm(x, params.bn_gamma, params.bn_beta, params.bn_state,
                           "train" if train else "eval")
    return ad.relu(ad.add_rowvec(ad.matmul(normed, params.conv_w), params.conv_b))


def inject_background_guidance(r: Tensor, g_base: Tensor,
                               layer: ArbitrationLayerParams, d_bg: int) -> Tensor:
    """Rewrite the background channel partition from base-class guidance.

    The foreground partition is copied through bitwise unchanged."""
    n, d = r.shape
    bg = ad.slice_cols(r, 0, d_bg)
    fg = ad.slice_cols(r, d_bg, d)
    guid = constant(np.tile(g_base.data, (n, 1)))
    new_bg = ad.add_rowvec(ad.matmul(ad.concat([bg, guid], axis=1), layer.inject_w),
                           layer.inject_b)
    return ad.concat([new_bg, fg], axis=1)


def arbitration_layer(r_in: Tensor, layer: ArbitrationLayerParams) -> Tensor:
    """Residual self-attention over query-point tokens, then layer norm."""
    return ad.layer_norm(ad.add(r_in, mhsa(r_in, layer.attn)), layer.ln_gamma, layer.ln_beta)


def arbitrate(r: Tensor, g_base: Tensor, params: ArbitrationParams) -> Tensor:
    """Guidance injection followed by attention, repeated per stacked layer."""
    for layer in params.layers:
        r = arbitration_layer(inject_background_guidance(r, g_base, layer, params.d_bg), layer)
    return r


def semantic_gate(r_arb: Tensor, g_q: Tensor, params: ArbitrationParams) -> Tensor:
    """Scale features by (1 + sigmoid(gate(g_q))), averaged over ways.

    A pure magnitude modulation: every channel grows by a factor in (1, 2)."""
    z = ad.sigmoid(ad.add_rowvec(ad.matmul(g_q, params.gate_w), params.gate_b))
    gate = ad.scale(ad.sum_rows(z), 1.0 / g_q.shape[0])
    multiplier = ad.add(gate, constant(np.ones(params.d_arb)))
    return ad.mul_rowvec(r_arb, multiplier)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderParams:
    conv_w: Tensor  # [d_arb, d_arb]
    conv_b: Tensor
    out_w: Tensor  # [d_arb, n_way+1]
    out_b: Tensor
    k: int = 8
    radius: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.radius <= 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}")


def init_decoder(rng: np.random.Generator, d_arb: int, n_classes: int,
                 k: int = 8, radius: float = 0.3) -> DecoderParams:
    return DecoderParams(
        conv_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_arb), (d_arb, d_arb)), name="dec.conv_w"),
        conv_b=parameter(np.zeros(d_arb), name="dec.conv_b"),
        out_w=parameter(rng.normal(0, 1.0 / np.sqrt(d_arb), (d_arb, n_classes)), name="dec.out_w"),
        out_b=parameter(np.zeros(n_classes), name="dec.out_b"),
        k=k,
        radius=radius,
    )


def decoder_parameters(p: DecoderParams) -> dict[str, Tensor]:
    return {p.conv_w.name: p.conv_w, p.conv_b.name: p.conv_b,
            p.out_w.name: p.out_w, p.out_b.name: p.out_b}


def knn_weights(points: np.ndarray, k: int, radius: float) -> np.ndarray:
    """Row-stochastic [N, N] smoothing matrix over the k nearest neighbors.

    Weights are inverse distances; neighbors beyond the radius are dropped
    (a point always keeps itself). k = 1 reduces to the identity."""
    n = len(points)
    if k > n:
        raise ConfigurationError(f"k = {k} exceeds the {n} available points")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    weights = np.zeros((n, n))
    for i in range(n):
        for j in order[i]:
            dist = np.sqrt(d2[i, j])
            if j != i and dist > radius:
                continue
            weights[i, j] = 1.0 / (dist + 1e-3)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def decode(r_final: Tensor, query_points: np.ndarray, params: DecoderParams) -> Tensor:
    """k-NN smoothing, pointwise transform, classifier logits."""
    smoother = constant(knn_weights(query_points, params.k, params.radius))
    agg = ad.matmul(smoother, r_final)
    h = ad.relu(ad.add_rowvec(ad.matmul(agg, params.conv_w), params.conv_b))
    return ad.add_rowvec(ad.matmul(h, params.out_w), params.out_b)
