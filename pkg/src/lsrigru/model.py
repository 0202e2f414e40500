"""End-to-end model assembly and its reverse-mode gradient sweep.

A batch of window samples is scored in four stages: per-day attention
embeddings over the long and short graphs, per-step concatenation with the
temporal features, the stacked recurrence, and the scalar head. The backward
pass retraces the same stages, scattering per-step embedding gradients back
into the per-day attention encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gat, igru
from .errors import ArgumentError, ConfigurationError, DataError
from .gat import GatLayerParams
from .igru import HeadParams, IgruCellParams
from .relgraph import EdgeSet


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches: layer widths and which relational branches exist."""

    num_features: int = 6
    gat_sizes: tuple[int, ...] = (30, 15)
    gru_sizes: tuple[int, ...] = (15, 10)
    head_hidden: int = 8
    attention_slope: float = 0.2
    long_enabled: bool = True
    short_enabled: bool = True

    def __post_init__(self):
        if not self.gat_sizes or not self.gru_sizes:
            raise ConfigurationError("gat_sizes and gru_sizes must be non-empty")
        if min(self.gat_sizes) < 1 or min(self.gru_sizes) < 1 or self.head_hidden < 1:
            raise ConfigurationError("layer widths must be >= 1")

    @property
    def relational_dim(self) -> int:
        return self.gat_sizes[-1]

    @property
    def gru_input_dim(self) -> int:
        return self.num_features + 2 * self.relational_dim


@dataclass
class ModelParams:
    """All learnable tensors; ``named_arrays`` gives a stable flat view for
    the optimizer, checkpoints and finite-difference checks."""

    config: ModelConfig
    gat_long: list[GatLayerParams] | None
    gat_short: list[GatLayerParams] | None
    cells: list[IgruCellParams]
    head: HeadParams

    def named_arrays(self):
        out: list[tuple[str, np.ndarray]] = []
        for branch, layers in (("gat_long", self.gat_long), ("gat_short", self.gat_short)):
            if layers is None:
                continue
            for li, layer in enumerate(layers):
                out.append((f"{branch}.{li}.W", layer.W))
                out.append((f"{branch}.{li}.a", layer.a))
        for ci, cell in enumerate(self.cells):
            for gate in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh"):
                out.append((f"gru.{ci}.{gate}", getattr(cell, gate)))
        out.append(("head.W1", self.head.W1))
        out.append(("head.b1", self.head.b1))
        out.append(("head.W2", self.head.W2))
        out.append(("head.b2", self.head.b2))
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.named_arrays()}

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        def gat_stack():
            layers, f_in = [], config.num_features
            for f_out in config.gat_sizes:
                layers.append(gat.init_gat_layer(rng, f_in, f_out, config.attention_slope))
                f_in = f_out
            return layers

        gat_long = gat_stack() if config.long_enabled else None
        gat_short = gat_stack() if config.short_enabled else None
        cells, d_in = [], config.gru_input_dim
        for width in config.gru_sizes:
            cells.append(igru.init_cell(rng, d_in, width))
            d_in = width
        head = igru.init_head(rng, config.gru_sizes[-1], config.head_hidden)
        return cls(config, gat_long, gat_short, cells, head)


@dataclass(frozen=True)
class SequenceSample:
    """One training instance: a stock's window of day positions plus its label."""

    stock_id: str
    node: int
    end_date: object
    day_indices: tuple[int, ...]
    label: float


@dataclass
class BatchCache:
    days: np.ndarray
    day_pos: np.ndarray  # (B, W) positions into ``days``
    nodes: np.ndarray  # (B,)
    num_nodes: int
    long_caches: list
    short_caches: list
    cell_caches: list[list]
    head_cache: tuple
    short_edge_list: list[EdgeSet] | None
    long_edges: EdgeSet | None


def _gather_days(samples: list[SequenceSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    window = len(samples[0].day_indices)
    day_mat = np.empty((len(samples), window), dtype=np.int64)
    nodes = np.empty(len(samples), dtype=np.int64)
    for b, sample in enumerate(samples):
        if len(sample.day_indices) != window:
            raise DataError(f"ragged window for {sample.stock_id}: "
                            f"{len(sample.day_indices)} steps, expected {window}")
        day_mat[b] = sample.day_indices
        nodes[b] = sample.node
    days = np.unique(day_mat)
    pos_of = {int(day): p for p, day in enumerate(days)}
    day_pos = np.vectorize(pos_of.__getitem__)(day_mat)
    return days, day_pos, nodes


def forward_batch(params: ModelParams, samples: list[SequenceSample],
                  features: np.ndarray, long_edges: EdgeSet | None,
                  short_edges_fn) -> tuple[np.ndarray, BatchCache]:
    """Score a batch of samples; returns (scores, cache for backward).

    ``features`` is the (T, d, F) node feature array; ``short_edges_fn`` maps
    a day index to that day's short-graph EdgeSet. A disabled branch
    contributes a zero embedding of the configured relational width.
    """
    if not samples:
        raise ArgumentError("empty batch")
    cfg = params.config
    days, day_pos, nodes = _gather_days(samples)
    B, W = day_pos.shape
    fdim = cfg.relational_dim

    emb_long = np.zeros((len(days), features.shape[1], fdim))
    emb_short = np.zeros_like(emb_long)
    long_caches: list = []
    short_caches: list = []
    short_edge_list: list[EdgeSet] = []
    for p, day in enumerate(days):
        feats_day = features[day]
        if params.gat_long is not None:
            out, caches = gat.encode_forward(params.gat_long, feats_day, long_edges)
            emb_long[p] = out
            long_caches.append(caches)
        if params.gat_short is not None:
            edges = short_edges_fn(int(day))
            out, caches = gat.encode_forward(params.gat_short, feats_day, edges)
            emb_short[p] = out
            short_caches.append(caches)
            short_edge_list.append(edges)

    cell_caches: list[list] = [[] for _ in params.cells]
    layer_inputs: list[np.ndarray] = []
    for s in range(W):
        x = features[days[day_pos[:, s]], nodes]
        u = np.concatenate([x, emb_long[day_pos[:, s], nodes],
                            emb_short[day_pos[:, s], nodes]], axis=1)
        layer_inputs.append(u)
    seq = layer_inputs
    for li, cell in enumerate(params.cells):
        h = np.zeros((B, cell.hidden_size))
        outs = []
        for s in range(W):
            h, cache = igru.cell_forward(cell, seq[s], h)
            cell_caches[li].append(cache)
            outs.append(h)
        seq = outs
    scores, head_cache = igru.head_forward(params.head, seq[-1])
    cache = BatchCache(days, day_pos, nodes, features.shape[1],
                       long_caches, short_caches, cell_caches, head_cache,
                       short_edge_list if params.gat_short is not None else None,
                       long_edges)
    return scores, cache


def backward_batch(params: ModelParams, cache: BatchCache,
                   d_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse the batch forward; returns gradients keyed like named_arrays."""
    cfg = params.config
    grads = params.zero_grads()
    B, W = cache.day_pos.shape
    fdim = cfg.relational_dim

    d_hidden, head_grads = igru.head_backward(params.head, cache.head_cache, d_scores)
    for key, val in head_grads.items():
        grads[f"head.{key}"] += val

    # backprop through time, top layer first
    d_seq_next = None  # gradient w.r.t. the current layer's per-step outputs
    for li in range(len(params.cells) - 1, -1, -1):
        cell = params.cells[li]
        d_inputs = [None] * W
        d_carry = np.zeros((B, cell.hidden_size))
        for s in range(W - 1, -1, -1):
            d_h = d_carry.copy()
            if li == len(params.cells) - 1 and s == W - 1:
                d_h += d_hidden
            if d_seq_next is not None:
                d_h += d_seq_next[s]
            d_u, d_carry, cell_grads = igru.cell_backward(cell, cache.cell_caches[li][s], d_h)
            d_inputs[s] = d_u
            for gate, val in cell_grads.items():
                grads[f"gru.{li}.{gate}"] += val
        d_seq_next = d_inputs

    # split the first layer's input gradient into branch embedding gradients
    d_emb_long = np.zeros((len(cache.days), cache.num_nodes, fdim))
    d_emb_short = np.zeros_like(d_emb_long)
    F = cfg.num_features
    for s in range(W):
        d_u = d_seq_next[s]
        if params.gat_long is not None:
            np.add.at(d_emb_long, (cache.day_pos[:, s], cache.nodes),
                      d_u[:, F: F + fdim])
        if params.gat_short is not None:
            np.add.at(d_emb_short, (cache.day_pos[:, s], cache.nodes),
                      d_u[:, F + fdim:])

    for p in range(len(cache.days)):
        if params.gat_long is not None:
            _, layer_grads = gat.encode_backward(params.gat_long, cache.long_edges,
                                                 cache.long_caches[p], d_emb_long[p])
            for li, (d_W, d_a) in enumerate(layer_grads):
                grads[f"gat_long.{li}.W"] += d_W
                grads[f"gat_long.{li}.a"] += d_a
        if params.gat_short is not None:
            _, layer_grads = gat.encode_backward(params.gat_short, cache.short_edge_list[p],
                                                 cache.short_caches[p], d_emb_short[p])
            for li, (d_W, d_a) in enumerate(layer_grads):
                grads[f"gat_short.{li}.W"] += d_W
                grads[f"gat_short.{li}.a"] += d_a
    return grads


def batch_loss_and_grads(params: ModelParams, samples: list[SequenceSample],
                         features: np.ndarray, long_edges: EdgeSet | None,
                         short_edges_fn):
    """One optimization step's forward and backward; returns (loss, scores, grads)."""
    labels = np.array([s.label for s in samples])
    scores, cache = forward_batch(params, samples, features, long_edges, short_edges_fn)
    value = igru.loss(scores, labels)
    grads = backward_batch(params, cache, igru.loss_grad(scores, labels))
    return value, scores, grads
