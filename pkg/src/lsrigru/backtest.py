"""Daily top-k buy-hold-sell simulation and the six-metric evaluation suite.

Scores produced at the close of day t are traded at the next two opens: the
portfolio formed at the open of day t+1 earns open_{t+2}/open_{t+1} - 1, with
equal weights, carried positions for re-selected names and no transaction
costs. All metrics are computed from the resulting daily return series.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ArgumentError, DataError

logger = logging.getLogger(__name__)

TRADING_DAYS_PER_YEAR = 252

# Undefined ratios (zero volatility or zero drawdown) are reported as NaN
# sentinels, never as infinities.
UNDEFINED = float("nan")


@dataclass
class BacktestLedger:
    """Day-by-day record of the simulation.

    ``days`` are the scoring days; ``returns[i]`` is the open-to-open return
    realized by the portfolio formed from day i's scores, and ``values``
    tracks compounded portfolio value starting at 1.0 (length len(days)+1).
    """

    days: list[pd.Timestamp]
    holdings: list[tuple[str, ...]]
    returns: np.ndarray
    benchmark: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate(([1.0], np.cumprod(1.0 + self.returns)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "date": [d.strftime("%Y-%m-%d") for d in self.days],
            "return": self.returns,
            "benchmark_return": self.benchmark,
            "holdings": ["|".join(h) for h in self.holdings],
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "BacktestLedger":
        return cls([pd.Timestamp(d) for d in frame["date"]],
                   [tuple(h.split("|")) if h else () for h in frame["holdings"].fillna("")],
                   frame["return"].to_numpy(dtype=float),
                   frame["benchmark_return"].to_numpy(dtype=float))


@dataclass(frozen=True)
class MetricReport:
    """Annualized return, volatility, max drawdown and the three ratio metrics."""

    ARR: float
    AVoL: float
    MDD: float
    ASR: float
    CR: float
    IR: float

    def as_dict(self) -> dict[str, float]:
        return {"ARR": self.ARR, "AVoL": self.AVoL, "MDD": self.MDD,
                "ASR": self.ASR, "CR": self.CR, "IR": self.IR}


def _open_grid(prices: pd.DataFrame):
    dates = np.sort(prices["date"].unique())
    pivot = prices.pivot_table(index="date", columns="stock_id", values="open",
                               aggfunc="first")
    pivot = pivot.reindex(index=dates)
    return dates, pivot


def run_bhs(scores: pd.DataFrame, prices: pd.DataFrame, k: int,
            benchmark: pd.Series | None = None) -> BacktestLedger:
    """Simulate the buy-hold-sell protocol over per-(stock, day) scores.

    Each scoring day ranks stocks by descending score (ties broken by
    ascending stock id), holds the top k equal-weighted from the next open to
    the open after, and carries names that stay selected. Days with fewer
    than k scored stocks hold what is available; a held stock missing its
    exit open is closed at its last available open. The default benchmark is
    the equal-weight whole-universe open-to-open return.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    for col in ("stock_id", "date", "score"):
        if col not in scores.columns:
            raise DataError(f"scores table missing column {col!r}")
    scores = scores.copy()
    scores["date"] = pd.to_datetime(scores["date"])
    prices = prices.copy()
    prices["date"] = pd.to_datetime(prices["date"])
    dates, opens = _open_grid(prices)
    date_pos = {pd.Timestamp(d): i for i, d in enumerate(dates)}

    warnings: list[str] = []
    days: list[pd.Timestamp] = []
    holdings: list[tuple[str, ...]] = []
    returns: list[float] = []
    bench: list[float] = []
    prev_held: tuple[str, ...] = ()

    def exit_open(stock: str, entry_pos: int, exit_pos: int):
        col = opens[stock].to_numpy()
        if not np.isnan(col[exit_pos]):
            return col[exit_pos]
        window = col[entry_pos: exit_pos + 1]
        valid = np.flatnonzero(~np.isnan(window))
        warnings.append(f"{stock}: missing open at {pd.Timestamp(dates[exit_pos]).date()}, "
                        "closed at last available open")
        return window[valid[-1]] if len(valid) else np.nan

    for day, group in scores.groupby("date", sort=True):
        pos = date_pos.get(pd.Timestamp(day))
        if pos is None:
            raise DataError(f"score date {pd.Timestamp(day).date()} not in price panel")
        if pos + 2 >= len(dates):
            warnings.append(f"{pd.Timestamp(day).date()}: insufficient forward opens, skipped")
            continue
        entry_pos, exit_pos = pos + 1, pos + 2
        entry_row = opens.iloc[entry_pos]
        tradable = group[group["stock_id"].map(lambda s: not math.isnan(
            entry_row.get(s, float("nan"))))]
        if tradable.empty:
            warnings.append(f"{pd.Timestamp(day).date()}: no tradable scored stocks, skipped")
            continue
        if len(tradable) < k:
            warnings.append(f"{pd.Timestamp(day).date()}: only {len(tradable)} scored stocks "
                            f"for top-{k}, holding all")
        ranked = tradable.sort_values(["score", "stock_id"],
                                      ascending=[False, True], kind="stable")
        selected = list(ranked["stock_id"].iloc[:k])
        # carry names that stay selected, newcomers fill remaining slots in rank order
        held = [s for s in prev_held if s in selected]
        held += [s for s in selected if s not in held]
        held_t = tuple(held)

        rets = []
        for stock in held_t:
            entry = entry_row[stock]
            exit_ = exit_open(stock, entry_pos, exit_pos)
            rets.append(exit_ / entry - 1.0 if not math.isnan(exit_) else 0.0)
        day_ret = float(np.mean(rets))

        if benchmark is not None:
            b = benchmark.get(pd.Timestamp(day))
            if b is None or (isinstance(b, float) and math.isnan(b)):
                raise DataError(f"benchmark series missing {pd.Timestamp(day).date()}")
            day_bench = float(b)
        else:
            entry_all = opens.iloc[entry_pos].to_numpy()
            exit_all = opens.iloc[exit_pos].to_numpy()
            both = ~(np.isnan(entry_all) | np.isnan(exit_all))
            day_bench = float(np.mean(exit_all[both] / entry_all[both] - 1.0)) if both.any() else 0.0

        days.append(pd.Timestamp(day))
        holdings.append(held_t)
        returns.append(day_ret)
        bench.append(day_bench)
        prev_held = held_t

    for msg in warnings:
        logger.warning("backtest: %s", msg)
    return BacktestLedger(days, holdings, np.array(returns), np.array(bench), warnings)


def max_drawdown(values: np.ndarray) -> float:
    """Largest peak-to-trough decline over the value series (<= 0)."""
    peaks = np.maximum.accumulate(values)
    return float(np.min((values - peaks) / peaks))


def compute_metrics(ledger: BacktestLedger,
                    trading_days_per_year: int = TRADING_DAYS_PER_YEAR) -> MetricReport:
    """The six evaluation metrics from a ledger's daily returns.

    ARR annualizes the mean daily return arithmetically; AVoL uses the sample
    standard deviation times sqrt(252); MDD comes from the compounded value
    series including its 1.0 start; ASR = ARR/AVoL and CR = ARR/|MDD| (NaN
    when their denominators vanish); IR is the annualized mean-over-std of
    daily excess returns versus the benchmark.
    """
    r = ledger.returns
    if len(r) < 2:
        raise ArgumentError(f"need at least 2 ledger days, got {len(r)}")
    arr = float(np.mean(r)) * trading_days_per_year
    avol = float(np.std(r, ddof=1)) * math.sqrt(trading_days_per_year)
    mdd = max_drawdown(ledger.values)
    asr = arr / avol if avol > 0 else UNDEFINED
    cr = arr / abs(mdd) if mdd != 0 else UNDEFINED
    excess = r - ledger.benchmark
    ex_std = float(np.std(excess, ddof=1))
    ir = float(np.mean(excess)) / ex_std * math.sqrt(trading_days_per_year) \
        if ex_std > 0 else UNDEFINED
    return MetricReport(arr, avol, mdd, asr, cr, ir)


def report(ledger: BacktestLedger, metrics: MetricReport, out_dir,
           plot: bool = False) -> list[str]:
    """Write equity_curve.csv, metrics.csv and holdings.csv (plus optional chart).

    The equity curve carries compounded portfolio and benchmark values, their
    ratio (the excess curve) and the excess curve's running drawdown.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = ledger.values[1:]
    bench_values = np.cumprod(1.0 + ledger.benchmark)
    excess = values / bench_values
    excess_peaks = np.maximum.accumulate(np.concatenate(([1.0], excess)))[1:]
    excess_dd = (excess - excess_peaks) / excess_peaks

    curve = pd.DataFrame({
        "date": [d.strftime("%Y-%m-%d") for d in ledger.days],
        "portfolio_value": values,
        "benchmark_value": bench_values,
        "excess_value": excess,
        "excess_drawdown": excess_dd,
    })
    curve_path = out / "equity_curve.csv"
    curve.to_csv(curve_path, index=False)

    metrics_path = out / "metrics.csv"
    pd.DataFrame({"metric": list(metrics.as_dict()),
                  "value": [repr(v) for v in metrics.as_dict().values()]}
                 ).to_csv(metrics_path, index=False)

    holdings_rows = [(d.strftime("%Y-%m-%d"), stock)
                     for d, held in zip(ledger.days, ledger.holdings) for stock in held]
    holdings_path = out / "holdings.csv"
    pd.DataFrame(holdings_rows, columns=["date", "stock_id"]).to_csv(holdings_path, index=False)

    paths = [str(curve_path), str(metrics_path), str(holdings_path)]
    if plot:
        from .plotting import render_equity_figure

        fig_path = out / "equity_curve.png"
        render_equity_figure(curve, metrics, fig_path)
        paths.append(str(fig_path))
    return paths


def load_metrics_csv(path) -> MetricReport:
    frame = pd.read_csv(path)
    values = {row["metric"]: float(row["value"]) for _, row in frame.iterrows()}
    return MetricReport(**values)
