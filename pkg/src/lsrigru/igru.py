"""Relation-augmented GRU cell, stacked unroll, MLP head and MSE loss.

Each step of the first recurrent layer consumes u = x || long_emb || short_emb.
Gate algebra, with sigma the logistic function:

    z = sigma(Wz u + Uz h_prev + bz)
    r = sigma(Wr u + Ur h_prev + br)
    c = tanh(Wh u + Uh (r * h_prev) + bh)
    h = (1 - z) * c + z * h_prev

Note z gates the carried state (the original gated-recurrent convention), not
the candidate. The second stacked layer takes the first layer's hidden state
as its plain input with no relational concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigurationError, DataError, NumericError


@dataclass
class IgruCellParams:
    """Gate parameters; W* are (H, D) over the concatenated input, U* are (H, H)."""

    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_size(self) -> int:
        return self.Wz.shape[1]


@dataclass
class HiddenState:
    """Recurrent state for one stock: length-H vector plus its step index."""

    values: np.ndarray
    step: int = 0


@dataclass
class HeadParams:
    """Score head: one hidden rectified layer then a linear scalar output."""

    W1: np.ndarray  # (H, hidden)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)


def init_cell(rng: np.random.Generator, input_size: int, hidden_size: int) -> IgruCellParams:
    s_w = 1.0 / np.sqrt(input_size)
    s_u = 1.0 / np.sqrt(hidden_size)

    def w():
        return rng.uniform(-s_w, s_w, (hidden_size, input_size))

    def u():
        return rng.uniform(-s_u, s_u, (hidden_size, hidden_size))

    def b():
        return rng.uniform(-s_w, s_w, hidden_size)

    return IgruCellParams(w(), u(), b(), w(), u(), b(), w(), u(), b())


def init_head(rng: np.random.Generator, input_size: int, hidden: int) -> HeadParams:
    s1 = 1.0 / np.sqrt(input_size)
    s2 = 1.0 / np.sqrt(hidden)
    return HeadParams(rng.uniform(-s1, s1, (input_size, hidden)),
                      rng.uniform(-s1, s1, hidden),
                      rng.uniform(-s2, s2, hidden),
                      rng.uniform(-s2, s2, 1))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cell_forward(params: IgruCellParams, u: np.ndarray, h_prev: np.ndarray):
    """Batched gate step: u is (B, D), h_prev is (B, H); returns (h, cache)."""
    if u.shape[1] != params.input_size or h_prev.shape[1] != params.hidden_size:
        raise ConfigurationError(
            f"cell expects input {params.input_size}/hidden {params.hidden_size}, "
            f"got {u.shape[1]}/{h_prev.shape[1]}")
    z = _sigmoid(u @ params.Wz.T + h_prev @ params.Uz.T + params.bz)
    r = _sigmoid(u @ params.Wr.T + h_prev @ params.Ur.T + params.br)
    rh = r * h_prev
    c = np.tanh(u @ params.Wh.T + rh @ params.Uh.T + params.bh)
    h = (1.0 - z) * c + z * h_prev
    return h, (u, h_prev, z, r, rh, c)


def cell_backward(params: IgruCellParams, cache, d_h: np.ndarray):
    """Reverse one gate step; returns (d_u, d_h_prev, grads dict)."""
    u, h_prev, z, r, rh, c = cache
    d_c = d_h * (1.0 - z)
    d_z = d_h * (h_prev - c)
    d_h_prev = d_h * z

    d_ah = d_c * (1.0 - c * c)
    g_Wh = d_ah.T @ u
    g_Uh = d_ah.T @ rh
    g_bh = d_ah.sum(axis=0)
    d_rh = d_ah @ params.Uh
    d_r = d_rh * h_prev
    d_h_prev = d_h_prev + d_rh * r

    d_az = d_z * z * (1.0 - z)
    g_Wz = d_az.T @ u
    g_Uz = d_az.T @ h_prev
    g_bz = d_az.sum(axis=0)
    d_h_prev = d_h_prev + d_az @ params.Uz

    d_ar = d_r * r * (1.0 - r)
    g_Wr = d_ar.T @ u
    g_Ur = d_ar.T @ h_prev
    g_br = d_ar.sum(axis=0)
    d_h_prev = d_h_prev + d_ar @ params.Ur

    d_u = d_az @ params.Wz + d_ar @ params.Wr + d_ah @ params.Wh
    grads = {"Wz": g_Wz, "Uz": g_Uz, "bz": g_bz,
             "Wr": g_Wr, "Ur": g_Ur, "br": g_br,
             "Wh": g_Wh, "Uh": g_Uh, "bh": g_bh}
    return d_u, d_h_prev, grads


def cell_step(params: IgruCellParams, x: np.ndarray, long_emb: np.ndarray,
              short_emb: np.ndarray, h_prev: HiddenState | np.ndarray) -> HiddenState:
    """Single-stock gate step over the concatenated input x || long || short."""
    state = h_prev if isinstance(h_prev, HiddenState) else HiddenState(np.asarray(h_prev, float))
    if not np.isfinite(state.values).all():
        raise NumericError(f"non-finite hidden state at step {state.step}")
    u = np.concatenate([np.asarray(x, float), np.asarray(long_emb, float),
                        np.asarray(short_emb, float)])
    h, _ = cell_forward(params, u[None, :], state.values[None, :])
    if not np.isfinite(h).all():
        raise NumericError(f"non-finite hidden state at step {state.step + 1}")
    return HiddenState(h[0], state.step + 1)


def unroll(cells: list[IgruCellParams], steps: list[tuple], window: int | None = None) -> np.ndarray:
    """Run the stacked recurrence over one window of (x, long_emb, short_emb) steps.

    Layer 1 sees the concatenated relational input; deeper layers consume the
    previous layer's hidden sequence. Hidden states start at zero. Returns the
    top layer's final hidden vector.
    """
    if window is not None and len(steps) != window:
        raise DataError(f"window has {len(steps)} steps, expected {window}")
    if not steps:
        raise ArgumentError("empty window")
    seq = [np.concatenate([np.asarray(x, float), np.asarray(le, float), np.asarray(se, float)])
           for x, le, se in steps]
    for cell in cells:
        h = np.zeros((1, cell.hidden_size))
        outputs = []
        for u in seq:
            h, _ = cell_forward(cell, u[None, :], h)
            outputs.append(h[0])
        seq = outputs
    return seq[-1]


def head_forward(head: HeadParams, hidden: np.ndarray):
    """Batched score head: hidden (B, H) to scores (B,)."""
    a1 = hidden @ head.W1 + head.b1
    h1 = np.maximum(a1, 0.0)
    scores = h1 @ head.W2 + head.b2[0]
    return scores, (hidden, a1, h1)


def head_backward(head: HeadParams, cache, d_scores: np.ndarray):
    hidden, a1, h1 = cache
    g_W2 = h1.T @ d_scores
    g_b2 = np.array([d_scores.sum()])
    d_h1 = np.outer(d_scores, head.W2) * (a1 > 0)
    g_W1 = hidden.T @ d_h1
    g_b1 = d_h1.sum(axis=0)
    d_hidden = d_h1 @ head.W1.T
    return d_hidden, {"W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2}


def predict(head: HeadParams, hidden: np.ndarray) -> float:
    """Score one hidden vector through the rectified head; no output squashing."""
    hidden = np.asarray(hidden, float)
    if not np.isfinite(hidden).all():
        raise NumericError("non-finite hidden vector")
    scores, _ = head_forward(head, hidden[None, :])
    return float(scores[0])


def loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared error over the batch."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, float)
    if scores.shape != labels.shape:
        raise ArgumentError(f"shape mismatch {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise ArgumentError("empty batch")
    diff = labels - scores
    return float(np.mean(diff * diff))


def loss_grad(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d loss / d scores for the mean of squared errors."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, float)
    if scores.size == 0:
        raise ArgumentError("empty batch")
    return 2.0 * (scores - labels) / scores.size
