"""Daily bar ingestion, feature normalization, rank labels and synthetic universes.

The universe is a fixed node set: stocks first, then primary-industry nodes,
then secondary-industry nodes. Industry-node data is always the arithmetic
mean of the constituent stocks' data on that date.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ArgumentError, DataError, ParseError, ValidationError

logger = logging.getLogger(__name__)

PANEL_COLUMNS = [
    "stock_id", "date", "open", "close", "high", "low",
    "volume", "turnover", "industry1", "industry2",
]
PRICE_COLUMNS = ["open", "close", "high", "low"]
FEATURE_COLUMNS = ["open", "close", "high", "low", "volume", "turnover"]
NUM_FEATURES = len(FEATURE_COLUMNS)

# Outlier rule: z-scores are clipped to this many standard deviations.
CLIP_SIGMA = 5.0

# Labels target the open-to-open return realized between the first and the
# second open after the scoring day, the same quantity the trading loop earns.
DEFAULT_LABEL_HORIZON = 2


@dataclass(frozen=True)
class Universe:
    """Node set over stocks and their two industry levels.

    Node order is fixed: stocks, then primary industries, then secondary
    industries; ``node_index`` is total over that order.
    """

    stocks: tuple[str, ...]
    primary_industries: tuple[str, ...]
    secondary_industries: tuple[str, ...]
    stock_primary: dict[str, str]
    stock_secondary: dict[str, str]
    secondary_parent: dict[str, str]

    @property
    def num_stocks(self) -> int:
        return len(self.stocks)

    @property
    def num_nodes(self) -> int:
        return len(self.stocks) + len(self.primary_industries) + len(self.secondary_industries)

    @property
    def node_names(self) -> tuple[str, ...]:
        return self.stocks + self.primary_industries + self.secondary_industries

    @property
    def node_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.node_names)}

    def node_kind(self, index: int) -> str:
        m, n = len(self.stocks), len(self.primary_industries)
        if index < m:
            return "stock"
        if index < m + n:
            return "primary"
        return "secondary"

    def members_of(self, industry_index: int) -> list[int]:
        """Stock node indices belonging to an industry node."""
        m, n = len(self.stocks), len(self.primary_industries)
        if industry_index < m or industry_index >= self.num_nodes:
            raise ArgumentError(f"node {industry_index} is not an industry node")
        if industry_index < m + n:
            code = self.primary_industries[industry_index - m]
            return [i for i, s in enumerate(self.stocks) if self.stock_primary[s] == code]
        code = self.secondary_industries[industry_index - m - n]
        return [i for i, s in enumerate(self.stocks) if self.stock_secondary[s] == code]

    @classmethod
    def from_panel(cls, panel: pd.DataFrame) -> "Universe":
        """Derive the universe from a bar panel, validating the industry hierarchy."""
        stocks = tuple(sorted(panel["stock_id"].unique()))
        stock_primary: dict[str, str] = {}
        stock_secondary: dict[str, str] = {}
        for stock, grp in panel.groupby("stock_id"):
            prim = grp["industry1"].unique()
            sec = grp["industry2"].unique()
            if len(prim) != 1 or len(sec) != 1:
                raise DataError(f"stock {stock} has inconsistent industry codes across dates")
            stock_primary[stock] = prim[0]
            stock_secondary[stock] = sec[0]

        secondary_parent: dict[str, str] = {}
        for stock in stocks:
            sec, prim = stock_secondary[stock], stock_primary[stock]
            if sec in secondary_parent and secondary_parent[sec] != prim:
                raise ValidationError(
                    f"secondary industry {sec} maps to multiple primaries "
                    f"({secondary_parent[sec]}, {prim})"
                )
            secondary_parent[sec] = prim

        primaries = tuple(sorted(set(stock_primary.values())))
        secondaries = tuple(sorted(secondary_parent))
        overlap = set(stocks) & (set(primaries) | set(secondaries))
        if overlap:
            raise ValidationError(f"stock ids collide with industry codes: {sorted(overlap)}")
        return cls(stocks, primaries, secondaries, stock_primary, stock_secondary, secondary_parent)


@dataclass
class FeaturePanel:
    """Per (node, date) feature vectors on the full node set.

    ``values`` has shape (num_dates, num_nodes, num_features); ``present``
    marks which nodes carry data on each date. Industry rows are constituent
    means over present stocks.
    """

    universe: Universe
    dates: np.ndarray
    values: np.ndarray
    present: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def date_index(self, date) -> int:
        ts = np.datetime64(pd.Timestamp(date))
        idx = np.searchsorted(self.dates, ts)
        if idx >= len(self.dates) or self.dates[idx] != ts:
            raise ArgumentError(f"date {date} not in panel")
        return int(idx)

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame: one row per (node, date), deterministic order."""
        rows = []
        names = self.universe.node_names
        for t, date in enumerate(self.dates):
            day = pd.Timestamp(date).strftime("%Y-%m-%d")
            for j, name in enumerate(names):
                if not self.present[t, j]:
                    continue
                rows.append((name, day, *self.values[t, j, :]))
        return pd.DataFrame(rows, columns=["node_id", "date"] + FEATURE_COLUMNS)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass
class LabelPanel:
    """Cross-sectional percentile labels per (stock, date); NaN where undefined."""

    universe: Universe
    dates: np.ndarray
    values: np.ndarray  # (num_dates, num_stocks)
    horizon: int

    def label(self, stock_id: str, date) -> float:
        t = int(np.searchsorted(self.dates, np.datetime64(pd.Timestamp(date))))
        return float(self.values[t, self.universe.node_index[stock_id]])


def _parse_row(row: dict, schema: dict[str, str], line_no: int) -> dict:
    out = {}
    for fld in PANEL_COLUMNS:
        col = schema.get(fld, fld)
        if col not in row or row[col] is None or row[col] == "":
            raise ParseError(f"row {line_no}: missing field {col!r}")
        out[fld] = row[col]
    try:
        out["date"] = pd.Timestamp(out["date"])
    except (ValueError, TypeError) as exc:
        raise ParseError(f"row {line_no}: unparseable date {out['date']!r}") from exc
    for fld in FEATURE_COLUMNS:
        try:
            out[fld] = float(out[fld])
        except ValueError as exc:
            raise ParseError(f"row {line_no}: non-numeric {fld} {out[fld]!r}") from exc
    return out


def _validate_bar(bar: dict, where: str) -> None:
    for fld in PRICE_COLUMNS:
        if not bar[fld] > 0:
            raise ValidationError(f"{where}: non-positive {fld} {bar[fld]}")
    if bar["volume"] < 0 or bar["turnover"] < 0:
        raise ValidationError(f"{where}: negative volume/turnover")
    if not (bar["low"] <= min(bar["open"], bar["close"])
            and max(bar["open"], bar["close"]) <= bar["high"]):
        raise ValidationError(f"{where}: OHLC ordering violated")


def ingest_csv(path, schema: dict[str, str] | None = None) -> pd.DataFrame:
    """Read a daily-bar CSV into a validated panel sorted by (stock, date).

    ``schema`` maps canonical field names to the file's column names; by
    default the documented header is expected:
    ``stock_id,date,open,close,high,low,volume,turnover,industry1,industry2``.
    """
    schema = schema or {}
    rows = []
    seen: set[tuple[str, pd.Timestamp]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file")
        for line_no, raw in enumerate(reader, start=2):
            bar = _parse_row(raw, schema, line_no)
            key = (bar["stock_id"], bar["date"])
            if key in seen:
                raise DataError(
                    f"duplicate bar for ({key[0]}, {key[1].strftime('%Y-%m-%d')})"
                )
            seen.add(key)
            _validate_bar(bar, f"row {line_no}")
            rows.append(bar)
    if not rows:
        raise DataError(f"{path}: no data rows")
    panel = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    panel = panel.sort_values(["stock_id", "date"], kind="stable").reset_index(drop=True)
    logger.info("ingested %d bars for %d stocks from %s",
                len(panel), panel["stock_id"].nunique(), path)
    return panel


def write_panel_csv(panel: pd.DataFrame, path) -> None:
    out = panel.copy()
    out["date"] = out["date"].dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False)


def panel_dates(panel: pd.DataFrame) -> np.ndarray:
    return np.sort(panel["date"].unique())


def _stock_grid(panel: pd.DataFrame, universe: Universe, column: str):
    """Dense (num_dates, num_stocks) grid of one bar column, plus presence mask."""
    dates = panel_dates(panel)
    pivot = panel.pivot_table(index="date", columns="stock_id", values=column, aggfunc="first")
    pivot = pivot.reindex(index=dates, columns=list(universe.stocks))
    grid = pivot.to_numpy(dtype=float)
    return dates, grid, ~np.isnan(grid)


def _industry_extend(universe: Universe, stock_values: np.ndarray, stock_present: np.ndarray):
    """Append industry-node rows as means over present constituent stocks.

    ``stock_values`` is (T, m) or (T, m, F); returns ((T, d, ...), (T, d) mask).
    """
    m = universe.num_stocks
    d = universe.num_nodes
    extra = stock_values.shape[2:] if stock_values.ndim > 2 else ()
    T = stock_values.shape[0]
    values = np.zeros((T, d) + extra)
    present = np.zeros((T, d), dtype=bool)
    stock_mask = stock_present[..., None] if extra else stock_present
    values[:, :m] = np.where(stock_mask, stock_values, 0.0)
    present[:, :m] = stock_present
    for j in range(m, d):
        members = universe.members_of(j)
        if not members:
            continue
        mask = stock_present[:, members]
        counts = mask.sum(axis=1)
        if extra:
            summed = (stock_values[:, members] * mask[..., None]).sum(axis=1)
            values[:, j] = np.divide(summed, counts[:, None], out=np.zeros_like(summed),
                                     where=counts[:, None] > 0)
        else:
            summed = np.where(mask, stock_values[:, members], 0.0).sum(axis=1)
            values[:, j] = np.divide(summed, counts, out=np.zeros(T), where=counts > 0)
        present[:, j] = counts > 0
    return values, present


def normalize(panel: pd.DataFrame, train_range: tuple, universe: Universe | None = None) -> FeaturePanel:
    """Z-score features per stock on train-split statistics, then clip and average.

    Statistics (mean and population std) come only from bars dated inside
    ``train_range`` (inclusive); scores are clipped to +-CLIP_SIGMA. A feature
    with zero training variance maps to 0 and leaves a warning record.
    Industry-node features are means of the normalized constituent vectors.
    """
    universe = universe or Universe.from_panel(panel)
    start, end = (pd.Timestamp(train_range[0]), pd.Timestamp(train_range[1]))
    if start > end:
        raise ArgumentError(f"empty training range {train_range}")
    warnings: list[str] = []

    dates = panel_dates(panel)
    T, m = len(dates), universe.num_stocks
    stock_feats = np.full((T, m, NUM_FEATURES), np.nan)
    for f_idx, column in enumerate(FEATURE_COLUMNS):
        _, grid, _ = _stock_grid(panel, universe, column)
        stock_feats[:, :, f_idx] = grid
    present = ~np.isnan(stock_feats[:, :, 0])

    in_train = (dates >= np.datetime64(start)) & (dates <= np.datetime64(end))
    if not in_train.any():
        raise ArgumentError(f"no panel dates inside training range {train_range}")

    for s_idx, stock in enumerate(universe.stocks):
        rows = in_train & present[:, s_idx]
        if not rows.any():
            warnings.append(f"{stock}: no training rows, features set to 0")
            stock_feats[present[:, s_idx], s_idx, :] = 0.0
            continue
        train_vals = stock_feats[rows, s_idx, :]
        mean = train_vals.mean(axis=0)
        std = train_vals.std(axis=0)  # population std
        for f_idx, column in enumerate(FEATURE_COLUMNS):
            col = stock_feats[:, s_idx, f_idx]
            if std[f_idx] == 0.0:
                warnings.append(f"{stock}: zero training std for {column}, feature set to 0")
                col[present[:, s_idx]] = 0.0
            else:
                z = (col - mean[f_idx]) / std[f_idx]
                stock_feats[:, s_idx, f_idx] = np.clip(z, -CLIP_SIGMA, CLIP_SIGMA)

    stock_feats = np.where(present[:, :, None], stock_feats, 0.0)
    values, node_present = _industry_extend(universe, stock_feats, present)
    for msg in warnings:
        logger.warning("normalize: %s", msg)
    return FeaturePanel(universe, dates, values, node_present, warnings)


def node_open_panel(panel: pd.DataFrame, universe: Universe | None = None,
                    mode: str = "opens"):
    """Raw per-node open series used by the short-horizon relationship graphs.

    ``mode='opens'`` uses raw opening prices; ``mode='gaps'`` uses the
    overnight gap return open_t / close_{t-1} - 1. Industry nodes are
    constituent means of the chosen series.

    Returns (dates, values (T, d), present (T, d)).
    """
    universe = universe or Universe.from_panel(panel)
    dates, opens, present = _stock_grid(panel, universe, "open")
    if mode == "opens":
        series, series_present = opens, present
    elif mode == "gaps":
        _, closes, closes_present = _stock_grid(panel, universe, "close")
        series = np.full_like(opens, np.nan)
        series[1:] = opens[1:] / closes[:-1] - 1.0
        series_present = np.zeros_like(present)
        series_present[1:] = present[1:] & closes_present[:-1]
        series = np.where(series_present, series, np.nan)
    else:
        raise ArgumentError(f"unknown open-series mode {mode!r}")
    filled = np.where(series_present, series, 0.0)
    values, node_present = _industry_extend(universe, filled, series_present)
    return dates, values, node_present


def compute_labels(panel: pd.DataFrame, universe: Universe | None = None,
                   horizon: int = DEFAULT_LABEL_HORIZON) -> LabelPanel:
    """Cross-sectional percentile labels of forward open-to-open returns.

    The label for (stock, day t) ranks open_{t+horizon} / open_{t+horizon-1} - 1
    against the same-day cross-section, scaled so the worst return maps to 0.0
    and the best to 1.0; ties share the mean of their rank positions, and a
    single-stock cross-section gets 0.5.
    """
    universe = universe or Universe.from_panel(panel)
    counts = panel.groupby("stock_id")["date"].nunique()
    if (counts < 2).any():
        offender = counts[counts < 2].index[0]
        raise DataError(f"stock {offender} has fewer than 2 dates")
    if horizon < 1:
        raise ArgumentError("label horizon must be >= 1")

    dates, opens, present = _stock_grid(panel, universe, "open")
    T, m = opens.shape
    rets = np.full((T, m), np.nan)
    if T > horizon:
        # return realized from open at t+horizon-1 to open at t+horizon
        rets[: T - horizon] = opens[horizon:] / opens[horizon - 1: T - 1] - 1.0
        valid = present[horizon:] & present[horizon - 1: T - 1]
        rets[: T - horizon] = np.where(valid, rets[: T - horizon], np.nan)

    labels = np.full((T, m), np.nan)
    for t in range(T):
        row = rets[t]
        mask = ~np.isnan(row)
        k = int(mask.sum())
        if k == 0:
            continue
        if k == 1:
            labels[t, mask] = 0.5
            continue
        ranks = pd.Series(row[mask]).rank(method="average").to_numpy() - 1.0
        labels[t, mask] = ranks / (k - 1)
    return LabelPanel(universe, dates, labels, horizon)


def synth_universe(m: int, n: int, n_prime: int, days: int, seed: int,
                   factor_persistence: float = 0.55,
                   factor_scale: float = 0.018,
                   idio_scale: float = 0.010,
                   overnight_share: float = 0.6,
                   start: str = "2021-01-04") -> tuple[pd.DataFrame, Universe]:
    """Generate a deterministic desk-scale universe of geometric price walks.

    Secondary industries are dealt round-robin to primaries and stocks
    round-robin to secondaries. Each secondary industry carries an AR(1)
    common factor, so intra-industry return correlation is detectably higher
    than cross-industry correlation and yesterday's industry move carries
    information about tomorrow's.
    """
    if n < 1 or n_prime < n or m < n_prime:
        raise ArgumentError(f"need m >= n' >= n >= 1, got m={m}, n={n}, n'={n_prime}")
    if days < 20:
        raise ArgumentError(f"need days >= 20, got {days}")

    rng = np.random.default_rng(seed)
    width = max(2, len(str(m - 1)))
    stocks = [f"S{i:0{width}d}" for i in range(m)]
    primaries = [f"IND{p}" for p in range(n)]
    secondaries = [f"SUB{c:02d}" for c in range(n_prime)]
    sec_parent = {secondaries[c]: primaries[c % n] for c in range(n_prime)}
    stock_sec = {stocks[i]: secondaries[i % n_prime] for i in range(m)}

    dates = pd.bdate_range(start, periods=days)
    phi = factor_persistence
    sec_factor = np.zeros((days, n_prime))
    pri_factor = np.zeros((days, n))
    for t in range(1, days):
        sec_factor[t] = phi * sec_factor[t - 1] + rng.normal(0.0, factor_scale, n_prime)
        pri_factor[t] = phi * pri_factor[t - 1] + rng.normal(0.0, 0.5 * factor_scale, n)

    rows = []
    for i, stock in enumerate(stocks):
        sec = stock_sec[stock]
        c = secondaries.index(sec)
        p = primaries.index(sec_parent[sec])
        base = float(rng.uniform(10.0, 100.0))
        drift = float(rng.normal(2e-4, 1e-4))
        close = base
        prev_close = base
        for t in range(days):
            r = drift + sec_factor[t, c] + pri_factor[t, p] + rng.normal(0.0, idio_scale)
            close = prev_close * float(np.exp(r))
            gap = overnight_share * r + float(rng.normal(0.0, 0.25 * idio_scale))
            open_ = prev_close * float(np.exp(gap))
            hi_pad = abs(rng.normal(0.0, 0.4 * idio_scale))
            lo_pad = abs(rng.normal(0.0, 0.4 * idio_scale))
            high = max(open_, close) * float(np.exp(hi_pad))
            low = min(open_, close) * float(np.exp(-lo_pad))
            volume = float(np.round(rng.lognormal(11.0, 0.35)))
            turnover = volume * close * float(rng.uniform(0.95, 1.05))
            rows.append((stock, dates[t], round(open_, 6), round(close, 6),
                         round(high, 6), round(low, 6), volume, round(turnover, 2),
                         sec_parent[sec], sec))
            prev_close = close
    panel = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    panel = panel.sort_values(["stock_id", "date"], kind="stable").reset_index(drop=True)
    return panel, Universe.from_panel(panel)
