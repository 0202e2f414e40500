"""Graph attention encoder: softmax-weighted neighbor aggregation, two stacked layers.

Forward per layer, with P = X @ W the projected features:
    score(i, j) = leaky_relu(a[:K] . P[i] + a[K:] . P[j])      over j in N(i) u {i}
    alpha(i, .) = softmax over the neighborhood (max-subtracted)
    out[i]      = relu(sum_j alpha(i, j) P[j])

Backward passes are hand-derived and return gradients for W, a and the input
features, so the encoder composes into the full model's reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .relgraph import EdgeSet

DEFAULT_SLOPE = 0.2


@dataclass
class GatLayerParams:
    """One attention layer: projection (F_in, F_out) and scoring vector (2*F_out,)."""

    W: np.ndarray
    a: np.ndarray
    slope: float = DEFAULT_SLOPE

    @property
    def f_in(self) -> int:
        return self.W.shape[0]

    @property
    def f_out(self) -> int:
        return self.W.shape[1]


def init_gat_layer(rng: np.random.Generator, f_in: int, f_out: int,
                   slope: float = DEFAULT_SLOPE) -> GatLayerParams:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in) per tensor."""
    if f_out < 1:
        raise ConfigurationError(f"layer width must be >= 1, got {f_out}")
    s_w = 1.0 / np.sqrt(f_in)
    s_a = 1.0 / np.sqrt(2 * f_out)
    return GatLayerParams(rng.uniform(-s_w, s_w, (f_in, f_out)),
                          rng.uniform(-s_a, s_a, 2 * f_out), slope)


def _segment_softmax(scores: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Softmax within contiguous segments, max-subtracted for stability."""
    seg_max = np.maximum.reduceat(scores, offsets[:-1])
    seg_ids = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    exp = np.exp(scores - seg_max[seg_ids])
    denom = np.add.reduceat(exp, offsets[:-1])
    return exp / denom[seg_ids]


def _layer_forward(layer: GatLayerParams, feats: np.ndarray, edges: EdgeSet):
    if feats.shape[1] != layer.f_in:
        raise ConfigurationError(
            f"feature dim {feats.shape[1]} does not match projection input {layer.f_in}")
    src, dst, offsets = edges.attention_pairs()
    P = feats @ layer.W
    k = layer.f_out
    pre = P[src] @ layer.a[:k] + P[dst] @ layer.a[k:]
    scores = np.where(pre > 0, pre, layer.slope * pre)
    alpha = _segment_softmax(scores, offsets)
    agg = np.zeros_like(P)
    np.add.at(agg, src, alpha[:, None] * P[dst])
    out = np.maximum(agg, 0.0)
    cache = (feats, P, pre, alpha, agg)
    return out, cache


def _layer_backward(layer: GatLayerParams, edges: EdgeSet, cache, d_out: np.ndarray):
    feats, P, pre, alpha, agg = cache
    src, dst, offsets = edges.attention_pairs()
    k = layer.f_out
    seg_ids = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))

    d_agg = d_out * (agg > 0)
    d_alpha = np.einsum("ef,ef->e", d_agg[src], P[dst])
    dP = np.zeros_like(P)
    np.add.at(dP, dst, alpha[:, None] * d_agg[src])

    # softmax then leaky-rectifier backward
    inner = np.add.reduceat(alpha * d_alpha, offsets[:-1])
    d_scores = alpha * (d_alpha - inner[seg_ids])
    d_pre = d_scores * np.where(pre > 0, 1.0, layer.slope)

    d_a = np.concatenate([P[src].T @ d_pre, P[dst].T @ d_pre])
    np.add.at(dP, src, d_pre[:, None] * layer.a[:k][None, :])
    np.add.at(dP, dst, d_pre[:, None] * layer.a[k:][None, :])

    d_W = feats.T @ dP
    d_feats = dP @ layer.W.T
    return d_feats, d_W, d_a


def attention_coefficients(layer: GatLayerParams, feats: np.ndarray,
                           edges: EdgeSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-node (neighborhood indices, attention weights) with the self node first.

    Weights over N(i) u {i} sum to 1; an isolated node gets weight 1 on itself.
    """
    _, cache = _layer_forward(layer, feats, edges)
    _, _, _, alpha, _ = cache
    src, dst, offsets = edges.attention_pairs()
    return [(dst[offsets[i]: offsets[i + 1]], alpha[offsets[i]: offsets[i + 1]])
            for i in range(edges.num_nodes)]


def gat_layer(layer: GatLayerParams, feats: np.ndarray, edges: EdgeSet,
              label: str = "gat") -> np.ndarray:
    """Single attention layer forward; raises NumericError on non-finite output."""
    out, _ = _layer_forward(layer, feats, edges)
    if not np.isfinite(out).all():
        bad = int(np.argwhere(~np.isfinite(out))[0][0])
        raise NumericError(f"{label}: non-finite output at node {bad}")
    return out


def encode_forward(layers: list[GatLayerParams], feats: np.ndarray, edges: EdgeSet):
    """Stacked layers sharing one edge set; returns (embeddings, caches)."""
    caches = []
    x = feats
    for li, layer in enumerate(layers):
        x, cache = _layer_forward(layer, x, edges)
        if not np.isfinite(x).all():
            bad = int(np.argwhere(~np.isfinite(x))[0][0])
            raise NumericError(f"gat layer {li}: non-finite output at node {bad}")
        caches.append(cache)
    return x, caches


def encode(layers: list[GatLayerParams], feats: np.ndarray, edges: EdgeSet) -> np.ndarray:
    out, _ = encode_forward(layers, feats, edges)
    return out


def encode_backward(layers: list[GatLayerParams], edges: EdgeSet, caches,
                    d_out: np.ndarray):
    """Reverse sweep through the stack; returns (d_feats, [(dW, da) per layer])."""
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)
    grad = d_out
    for li in range(len(layers) - 1, -1, -1):
        grad, d_W, d_a = _layer_backward(layers[li], edges, caches[li], grad)
        grads[li] = (d_W, d_a)
    return grad, grads
