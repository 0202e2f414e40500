"""Long-horizon (industry) and short-horizon (open-price cosine) relationship graphs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ArgumentError, DataError, ValidationError
from .marketdata import Universe

logger = logging.getLogger(__name__)

DEFAULT_LOOKBACK = 15
DEFAULT_POLICY = "topk:10"
LONG_EDGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class RelationMatrix:
    """Dense symmetric node-relationship matrix with unit diagonal.

    ``kind`` is "long" (binary industry structure, date-free) or "short"
    (rescaled cosine similarities in [0, 1] as of one day).
    """

    kind: str
    values: np.ndarray
    as_of: pd.Timestamp | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to_dense_frame(self, universe: Universe) -> pd.DataFrame:
        names = list(universe.node_names)
        return pd.DataFrame(self.values, index=names, columns=names)

    def to_triples(self) -> pd.DataFrame:
        """Sparse upper-triangle listing of nonzero off-diagonal entries."""
        i_idx, j_idx = np.nonzero(np.triu(self.values, k=1))
        return pd.DataFrame({"i": i_idx, "j": j_idx,
                             "value": self.values[i_idx, j_idx]})


@dataclass
class EdgeSet:
    """Symmetric neighbor lists (self excluded) derived from a RelationMatrix."""

    neighbors: list[np.ndarray]
    weights: list[np.ndarray]
    isolated: np.ndarray
    _pairs: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.neighbors)

    def attention_pairs(self):
        """Flattened (src, dst, offsets) arrays over N(i) plus a self pair per node.

        Segment i spans offsets[i]:offsets[i+1] and starts with the (i, i)
        self pair; cached because edge sets are immutable once built.
        """
        if self._pairs is None:
            src, dst = [], []
            offsets = np.zeros(self.num_nodes + 1, dtype=np.int64)
            for i, nbrs in enumerate(self.neighbors):
                src.append(np.full(len(nbrs) + 1, i, dtype=np.int64))
                dst.append(np.concatenate(([i], nbrs)))
                offsets[i + 1] = offsets[i] + len(nbrs) + 1
            object.__setattr__(self, "_pairs",
                               (np.concatenate(src), np.concatenate(dst), offsets))
        return self._pairs


def build_long_matrix(universe: Universe) -> RelationMatrix:
    """Binary adjacency over the two-level industry hierarchy.

    Connected pairs: stocks sharing a secondary industry; each stock with its
    own secondary and primary nodes; secondaries under the same primary; every
    pair of primary nodes; each secondary with its parent primary. Diagonal 1.
    """
    m = universe.num_stocks
    n = len(universe.primary_industries)
    d = universe.num_nodes
    idx = universe.node_index
    values = np.zeros((d, d))

    def connect(i: int, j: int) -> None:
        values[i, j] = values[j, i] = 1.0

    for s_idx, stock in enumerate(universe.stocks):
        sec = universe.stock_secondary.get(stock)
        prim = universe.stock_primary.get(stock)
        if sec not in idx or prim not in idx:
            raise ValidationError(f"stock {stock} has unknown industry code ({prim}, {sec})")
        connect(s_idx, idx[sec])
        connect(s_idx, idx[prim])

    for a in range(m):
        sec_a = universe.stock_secondary[universe.stocks[a]]
        for b in range(a + 1, m):
            if sec_a == universe.stock_secondary[universe.stocks[b]]:
                connect(a, b)

    for p in range(m, m + n):
        for q in range(p + 1, m + n):
            connect(p, q)

    for sec, parent in universe.secondary_parent.items():
        connect(idx[sec], idx[parent])
    sec_codes = universe.secondary_industries
    for a in range(len(sec_codes)):
        for b in range(a + 1, len(sec_codes)):
            if universe.secondary_parent[sec_codes[a]] == universe.secondary_parent[sec_codes[b]]:
                connect(idx[sec_codes[a]], idx[sec_codes[b]])

    np.fill_diagonal(values, 1.0)
    return RelationMatrix("long", values, None)


def _pairwise_cosine(window: np.ndarray, window_present: np.ndarray,
                     warnings: list[str] | None = None) -> np.ndarray:
    """Cosine similarity between per-node trailing windows, handling gaps.

    ``window`` is (L, d). A zero-norm vector yields cosine 0 for its pairs;
    node pairs sharing fewer than 2 observed days also fall back to 0.
    """
    L, d = window.shape
    cos = np.zeros((d, d))
    if window_present.all():
        norms = np.linalg.norm(window, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        unit = window / safe
        cos = unit.T @ unit
        zero = norms == 0
        if zero.any():
            cos[zero, :] = 0.0
            cos[:, zero] = 0.0
            if warnings is not None:
                warnings.append(f"{int(zero.sum())} zero-norm open windows, entries set to 0.5")
    else:
        for i in range(d):
            for j in range(i, d):
                common = window_present[:, i] & window_present[:, j]
                if common.sum() < 2:
                    cos[i, j] = cos[j, i] = 0.0
                    continue
                vi, vj = window[common, i], window[common, j]
                ni, nj = np.linalg.norm(vi), np.linalg.norm(vj)
                cos[i, j] = cos[j, i] = (vi @ vj) / (ni * nj) if ni > 0 and nj > 0 else 0.0
    return np.clip(cos, -1.0, 1.0)


def build_short_matrix(dates: np.ndarray, node_opens: np.ndarray,
                       node_present: np.ndarray, as_of, lookback: int = DEFAULT_LOOKBACK,
                       warnings: list[str] | None = None) -> RelationMatrix:
    """Rescaled cosine similarity of trailing open-price windows ending at ``as_of``.

    Each entry is (cos + 1) / 2 over the ``lookback``-day windows, so values
    land in [0, 1]; the diagonal is forced to 1. ``node_opens`` comes from
    marketdata.node_open_panel.
    """
    if lookback < 1:
        raise ArgumentError(f"lookback must be >= 1, got {lookback}")
    ts = np.datetime64(pd.Timestamp(as_of))
    t = int(np.searchsorted(dates, ts))
    if t >= len(dates) or dates[t] != ts:
        raise ArgumentError(f"as_of date {as_of} not in panel")
    if t + 1 < lookback:
        raise DataError(
            f"only {t + 1} days available up to {as_of}, need {lookback}")
    window = node_opens[t - lookback + 1: t + 1]
    window_present = node_present[t - lookback + 1: t + 1]
    cos = _pairwise_cosine(window, window_present, warnings)
    values = (cos + 1.0) / 2.0
    np.fill_diagonal(values, 1.0)
    return RelationMatrix("short", values, pd.Timestamp(as_of))


def parse_policy(policy: str) -> tuple[str, float]:
    """Parse a sparsification policy string, e.g. "topk:10" or "threshold:0.6"."""
    try:
        name, raw = policy.split(":", 1)
        value = float(raw)
    except ValueError as exc:
        raise ArgumentError(f"bad policy {policy!r}, expected topk:K or threshold:T") from exc
    if name == "topk":
        if value < 1 or value != int(value):
            raise ArgumentError(f"topk count must be an integer >= 1, got {raw}")
        return "topk", int(value)
    if name == "threshold":
        if not 0.0 < value < 1.0:
            raise ArgumentError(f"threshold must be in (0, 1), got {raw}")
        return "threshold", value
    raise ArgumentError(f"unknown policy {name!r}")


def to_edge_set(matrix: RelationMatrix, policy: str | tuple) -> EdgeSet:
    """Sparsify a relationship matrix into symmetric neighbor lists.

    ``threshold:T`` keeps off-diagonal entries >= T; ``topk:K`` keeps each
    node's K largest off-diagonal entries and symmetrizes by union. Nodes left
    without neighbors are flagged isolated; attention then degenerates to
    self-only aggregation.
    """
    kind, value = parse_policy(policy) if isinstance(policy, str) else policy
    vals = matrix.values
    d = matrix.size
    keep = np.zeros((d, d), dtype=bool)
    off_diag = ~np.eye(d, dtype=bool)
    if kind == "threshold":
        keep = (vals >= value) & off_diag
    elif kind == "topk":
        k = int(value)
        for i in range(d):
            row = np.where(off_diag[i], vals[i], -np.inf)
            order = np.argsort(-row, kind="stable")[: min(k, d - 1)]
            keep[i, order[np.isfinite(row[order])]] = True
        keep |= keep.T  # union symmetrization
    else:
        raise ArgumentError(f"unknown policy kind {kind!r}")

    neighbors, weights = [], []
    for i in range(d):
        nbrs = np.flatnonzero(keep[i])
        neighbors.append(nbrs.astype(np.int64))
        weights.append(vals[i, nbrs].copy())
    isolated = np.array([len(nbrs) == 0 for nbrs in neighbors])
    if isolated.any():
        logger.debug("edge set: %d isolated nodes under policy %s", int(isolated.sum()), policy)
    return EdgeSet(neighbors, weights, isolated)
