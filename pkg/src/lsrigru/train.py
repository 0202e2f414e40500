"""Training loop: chronological splits, Adam, ablation wiring and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd

from . import igru, marketdata, relgraph
from .errors import ArgumentError, ConfigurationError, DataError, NumericError
from .marketdata import FeaturePanel, LabelPanel, Universe
from .model import ModelConfig, ModelParams, SequenceSample, batch_loss_and_grads, forward_batch
from .relgraph import EdgeSet, LONG_EDGE_THRESHOLD

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSRIGRU1"
CHECKPOINT_VERSION = 1

ABLATION_MODES = ("all", "long", "short", "temporal-only")


@dataclass(frozen=True)
class TrainConfig:
    """All run knobs; serializable to the flat ``key = value`` config format."""

    window: int = 15
    batch_size: int = 128
    learning_rate: float = 2e-4
    epochs: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ablation: str = "all"
    label_horizon: int = 2
    lookback: int = 15
    policy: str = "topk:10"
    short_mode: str = "opens"
    gat_sizes: tuple[int, ...] = (30, 15)
    gru_sizes: tuple[int, ...] = (15, 10)
    head_hidden: int = 8
    topk: int = 10
    train_range: tuple[str, str] | None = None
    valid_range: tuple[str, str] | None = None
    test_range: tuple[str, str] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.window < 1 or self.batch_size < 1:
            raise ArgumentError("window and batch_size must be >= 1")
        if self.ablation not in ABLATION_MODES:
            raise ArgumentError(f"ablation must be one of {ABLATION_MODES}, got {self.ablation!r}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, tuple) and f.name.endswith("_range"):
                text = f"{value[0]}:{value[1]}"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        valid = {f.name for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in valid:
                raise ArgumentError(f"unknown config key {key!r}")
            kwargs[key] = _coerce_field(key, raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_config_text(text))


_INT_KEYS = {"window", "batch_size", "epochs", "seed", "label_horizon",
             "lookback", "head_hidden", "topk"}
_FLOAT_KEYS = {"learning_rate", "adam_beta1", "adam_beta2", "adam_eps"}
_TUPLE_KEYS = {"gat_sizes", "gru_sizes"}
_RANGE_KEYS = {"train_range", "valid_range", "test_range"}


def _coerce_field(key: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _TUPLE_KEYS:
            return tuple(int(v) for v in raw.split(","))
        if key in _RANGE_KEYS:
            if raw.lower() == "none":
                return None
            start, end = raw.split(":")
            return (start.strip(), end.strip())
    except ValueError as exc:
        raise ArgumentError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ArgumentError(f"config line {line_no}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def ablation_wire(config: TrainConfig) -> ModelConfig:
    """Map the ablation switch onto the model graph.

    The switch names the enabled relational branches: "all", "long", "short",
    or "temporal-only" (no relational branch). A disabled branch contributes a
    zero vector of the relational width at every step; all other wiring is
    unchanged, and temporal-only builds no attention parameters at all.
    """
    if not config.ablation:
        raise ArgumentError("empty ablation set")
    return ModelConfig(
        num_features=marketdata.NUM_FEATURES,
        gat_sizes=tuple(config.gat_sizes),
        gru_sizes=tuple(config.gru_sizes),
        head_hidden=config.head_hidden,
        long_enabled=config.ablation in ("all", "long"),
        short_enabled=config.ablation in ("all", "short"),
    )


class PanelContext:
    """Everything derived from one panel that training and scoring share:
    normalized features, labels, the static long edge set, and per-day short
    edge sets (built lazily, cached, graphs never depend on parameters)."""

    def __init__(self, panel: pd.DataFrame, config: TrainConfig,
                 universe: Universe | None = None):
        if config.train_range is None:
            raise ArgumentError("config.train_range is required to normalize features")
        self.panel = panel
        self.config = config
        self.universe = universe or Universe.from_panel(panel)
        self.features: FeaturePanel = marketdata.normalize(panel, config.train_range, self.universe)
        self.labels: LabelPanel = marketdata.compute_labels(panel, self.universe,
                                                            config.label_horizon)
        self.dates = self.features.dates
        self.long_matrix = relgraph.build_long_matrix(self.universe)
        self.long_edges: EdgeSet = relgraph.to_edge_set(
            self.long_matrix, ("threshold", LONG_EDGE_THRESHOLD))
        od, ov, op = marketdata.node_open_panel(panel, self.universe, config.short_mode)
        self._open_dates, self._open_values, self._open_present = od, ov, op
        self._short_cache: dict[int, EdgeSet] = {}

    def short_edges(self, day_idx: int) -> EdgeSet:
        """Short-graph edge set as of a day index; early days truncate the lookback."""
        cached = self._short_cache.get(day_idx)
        if cached is None:
            lookback = min(self.config.lookback, day_idx + 1)
            matrix = relgraph.build_short_matrix(
                self._open_dates, self._open_values, self._open_present,
                self.dates[day_idx], lookback)
            cached = relgraph.to_edge_set(matrix, self.config.policy)
            self._short_cache[day_idx] = cached
        return cached


def _range_positions(dates: np.ndarray, date_range) -> tuple[int, int] | None:
    if date_range is None:
        return None
    start = np.datetime64(pd.Timestamp(date_range[0]))
    end = np.datetime64(pd.Timestamp(date_range[1]))
    if start > end:
        raise ArgumentError(f"range start {date_range[0]} after end {date_range[1]}")
    lo = int(np.searchsorted(dates, start, side="left"))
    hi = int(np.searchsorted(dates, end, side="right")) - 1
    if lo > hi:
        return None
    return lo, hi


def _samples_in_range(ctx: PanelContext, lo: int, hi: int,
                      window: int, horizon: int) -> list[SequenceSample]:
    samples: list[SequenceSample] = []
    uni = ctx.universe
    present = ctx.features.present
    labels = ctx.labels.values
    for node, stock in enumerate(uni.stocks):
        for t in range(lo + window - 1, hi - horizon + 1):
            day_indices = range(t - window + 1, t + 1)
            if not present[t - window + 1: t + 1, node].all():
                continue  # suspension gap inside the window
            y = labels[t, node]
            if np.isnan(y):
                continue
            samples.append(SequenceSample(stock, node, pd.Timestamp(ctx.dates[t]),
                                          tuple(day_indices), float(y)))
    return samples


def split_chronological(ctx: PanelContext, train_range, valid_range, test_range,
                        window: int | None = None, horizon: int | None = None):
    """Build the train/valid/test sample sets with strict no-leakage windows.

    A sample's window days and its label day must all fall inside one range;
    ranges must be disjoint and chronologically ordered.
    """
    window = window or ctx.config.window
    horizon = horizon or ctx.config.label_horizon
    ranges = [r for r in (train_range, valid_range, test_range) if r is not None]
    stamps = [(pd.Timestamp(r[0]), pd.Timestamp(r[1])) for r in ranges]
    for (s1, e1), (s2, e2) in zip(stamps, stamps[1:]):
        if s2 <= e1:
            raise ArgumentError(
                f"ranges overlap or are out of order: ({s1.date()}, {e1.date()}) "
                f"then ({s2.date()}, {e2.date()})")
    out = []
    for date_range in (train_range, valid_range, test_range):
        pos = _range_positions(ctx.dates, date_range)
        if pos is None:
            out.append([])
            continue
        out.append(_samples_in_range(ctx, pos[0], pos[1], window, horizon))
    return tuple(out)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(named_params, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, arr in named_params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)


def _evaluate(params: ModelParams, samples, ctx: PanelContext, batch_size: int) -> float:
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        batch = samples[start: start + batch_size]
        labels = np.array([s.label for s in batch])
        scores, _ = forward_batch(params, batch, ctx.features.values,
                                  ctx.long_edges, ctx.short_edges)
        total += igru.loss(scores, labels) * len(batch)
        count += len(batch)
    return total / count if count else float("nan")


def train_epochs(config: TrainConfig, samples, ctx: PanelContext,
                 valid_samples=None):
    """Run the optimization loop; returns (params, loss_log, rng).

    Parameters start from seeded uniform(-1/sqrt(fan_in), +) draws; batches
    are reshuffled each epoch from the same generator, so (seed, config,
    data) fully determine the result.
    """
    if not samples:
        raise ArgumentError("empty training set")
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(ablation_wire(config), rng)
    state = AdamState()
    loss_log: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start: start + config.batch_size]]
            value, _, grads = batch_loss_and_grads(params, batch, ctx.features.values,
                                                   ctx.long_edges, ctx.short_edges)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss in epoch {epoch} at batch offset {start} "
                    f"(first stock {batch[0].stock_id}, end {batch[0].end_date.date()})")
            adam_step(params.named_arrays(), grads, state, config)
            total += value * len(batch)
            count += len(batch)
        entry = {"epoch": epoch + 1, "train_loss": total / count}
        if valid_samples:
            entry["valid_loss"] = _evaluate(params, valid_samples, ctx, config.batch_size)
        loss_log.append(entry)
        logger.info("epoch %d: train_loss=%.6f%s", epoch + 1, entry["train_loss"],
                    f" valid_loss={entry['valid_loss']:.6f}" if valid_samples else "")
    return params, loss_log, rng


def score_samples(params: ModelParams, samples, ctx: PanelContext,
                  batch_size: int = 512) -> pd.DataFrame:
    """Score samples in deterministic order; returns stock_id/date/score rows."""
    rows = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start: start + batch_size]
        scores, _ = forward_batch(params, batch, ctx.features.values,
                                  ctx.long_edges, ctx.short_edges)
        for sample, score in zip(batch, scores):
            rows.append((sample.stock_id, sample.end_date.strftime("%Y-%m-%d"), float(score)))
    return pd.DataFrame(rows, columns=["stock_id", "date", "score"])


# -- checkpoint format ------------------------------------------------------
# magic LSRIGRU1, then little-endian u32 version, a length-prefixed config
# text block, a length-prefixed RNG-state JSON block, u32 tensor count, and
# per tensor: length-prefixed name, u32 ndim, u32 dims, raw float64 data.


def _write_block(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_block(fh) -> bytes:
    (length,) = struct.unpack("<I", fh.read(4))
    return fh.read(length)


def save_checkpoint(path, params: ModelParams, config: TrainConfig,
                    rng: np.random.Generator) -> None:
    state_json = json.dumps(rng.bit_generator.state, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(fh, config.to_text().encode("utf-8"))
        _write_block(fh, state_json.encode("utf-8"))
        named = params.named_arrays()
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named:
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, rng)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        config = TrainConfig.from_text(_read_block(fh).decode("utf-8"))
        rng_state = json.loads(_read_block(fh).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_block(fh).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(float)
            tensors[name] = data.reshape(shape)

    params = ModelParams.initialize(ablation_wire(config), np.random.default_rng(0))
    expected = dict(params.named_arrays())
    if set(expected) != set(tensors):
        raise ConfigurationError(
            f"{path}: tensor set mismatch, missing {sorted(set(expected) - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - set(expected))}")
    for name, arr in params.named_arrays():
        loaded = tensors[name]
        if loaded.shape != arr.shape:
            raise ConfigurationError(
                f"{path}: tensor {name} has shape {loaded.shape}, expected {arr.shape}")
        arr[...] = loaded
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return params, config, rng


def default_ranges(dates: np.ndarray, train_frac: float = 0.7,
                   valid_frac: float = 0.15) -> tuple[tuple[str, str], ...]:
    """Chronological 70/15/15 split over the distinct panel dates."""
    T = len(dates)
    if T < 3:
        raise DataError("panel has fewer than 3 dates")
    t_end = max(0, int(T * train_frac) - 1)
    v_end = max(t_end + 1, int(T * (train_frac + valid_frac)) - 1)
    v_end = min(v_end, T - 2)

    def fmt(i):
        return pd.Timestamp(dates[i]).strftime("%Y-%m-%d")

    return ((fmt(0), fmt(t_end)),
            (fmt(t_end + 1), fmt(v_end)),
            (fmt(v_end + 1), fmt(T - 1)))


def resolve_ranges(config: TrainConfig, dates: np.ndarray) -> TrainConfig:
    """Fill any missing split ranges with the default chronological split."""
    if config.train_range and config.valid_range and config.test_range:
        return config
    train_r, valid_r, test_r = default_ranges(dates)
    return replace(config,
                   train_range=config.train_range or train_r,
                   valid_range=config.valid_range or valid_r,
                   test_range=config.test_range or test_r)
