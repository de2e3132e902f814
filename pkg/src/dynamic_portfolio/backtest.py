#!/usr/bin/env python3

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from dynamic_portfolio.analytics import (PERIODS_PER_YEAR, covariance, expected_returns,
                                         max_sharpe, sample_frontier)
from dynamic_portfolio.checkpoint import CheckpointRecord, load_params
from dynamic_portfolio.market_data import PriceTable, ReturnMatrix, Standardizer, hl_ratios, to_returns
from dynamic_portfolio.policy_net import MlpParams, forward
from dynamic_portfolio.ppo import policy_mean
from dynamic_portfolio.rl_gym import MarketSeries, observation, observation_size, state_at
from dynamic_portfolio.sharpe_trainer import build_features
from dynamic_portfolio.utils import RuinError, check_simplex, uniform_weights

logger = logging.getLogger(__name__)

# Volatility and tracking error at or below this are treated as zero.
ZERO_SPREAD_TOL = 1e-12

WeightFn = Callable[[int, np.ndarray], Optional[np.ndarray]]


class StrategyKind(Enum):
    """
    Allocation strategies the backtester can run.

    Example:
        >>> StrategyKind.coerce("equal_weight")
        <StrategyKind.EQUAL_WEIGHT: 'equal_weight'>
    """
    DRL_PPO = "drl_ppo"
    SHARPE_POLICY = "sharpe_policy"
    EQUAL_WEIGHT = "equal_weight"
    MEAN_VARIANCE = "mean_variance"
    BUY_AND_HOLD = "buy_and_hold"

    @property
    def label(self) -> str:
        return self.value

    @property
    def learned(self) -> bool:
        return self in (StrategyKind.DRL_PPO, StrategyKind.SHARPE_POLICY)

    @classmethod
    def coerce(cls, value: Union['StrategyKind', str]) -> 'StrategyKind':
        if isinstance(value, cls):
            return value
        for member in cls:
            if value == member.label:
                return member
        raise ValueError(f"Invalid value for {cls.__name__}: {value}")

    def __str__(self):
        return self.label


@dataclass(frozen=True, eq=False)
class StrategyRef:
    """
    A strategy and whatever it needs to produce target weights.

    Fields:
        kind (StrategyKind): Strategy family.
        rebalance_interval (int, optional): Steps between rebalancing; None
            means never rebalance after the first trade.
        weights (np.ndarray, optional): Fixed targets of the static strategies.
        params (MlpParams, optional): Network of the learned strategies.
        standardizer (Standardizer, optional): Feature scaling of the learned strategies.
        lookback (int, optional): Feature window of the learned strategies.
        name (str, optional): Report label (default = the kind's label).
    """
    kind: StrategyKind
    rebalance_interval: Optional[int] = 1
    weights: Optional[np.ndarray] = None
    params: Optional[MlpParams] = None
    standardizer: Optional[Standardizer] = None
    lookback: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind.coerce(self.kind))
        if self.rebalance_interval is not None and self.rebalance_interval < 1:
            raise ValueError(f"rebalance_interval must be at least 1, got {self.rebalance_interval}.")
        if self.kind.learned:
            if self.params is None or self.standardizer is None or self.lookback is None:
                raise ValueError(f"{self.kind} needs params, standardizer and lookback.")
        elif self.weights is None:
            raise ValueError(f"{self.kind} needs target weights.")
        else:
            object.__setattr__(self, "weights", check_simplex(np.asarray(self.weights, dtype=float)))

    @property
    def label(self) -> str:
        return self.name or self.kind.label


@dataclass(frozen=True)
class Metrics:
    """
    Performance figures of one equity curve. ``sharpe`` and ``info_ratio``
    are None when volatility or tracking error is zero.
    """
    ann_return: float
    ann_vol: float
    sharpe: Optional[float]
    max_drawdown: float
    info_ratio: Optional[float]
    winning_days: float
    cumulative_return: float


@dataclass(eq=False)
class BacktestReport:
    """Equity curve, metrics and trading totals of one strategy run."""
    strategy: str
    equity: pd.Series
    metrics: Metrics
    turnover: float
    cost_paid: float
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    def metric_dict(self) -> dict:
        return {**asdict(self.metrics), "turnover": self.turnover, "cost_paid": self.cost_paid}

    def to_dict(self) -> dict:
        """
        JSON-ready report:
        ``{strategy, period: {start, end}, metrics: {...}, equity: [[date, wealth], ...]}``.
        """
        dates = [d.strftime("%Y-%m-%d") for d in pd.DatetimeIndex(self.equity.index)]
        return {
            "strategy": self.strategy,
            "period": {"start": dates[0], "end": dates[-1]},
            "metrics": self.metric_dict(),
            "equity": [[d, float(v)] for d, v in zip(dates, self.equity.to_numpy())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BacktestReport":
        """Rebuild a report written by :meth:`to_dict` (the weights path is not stored)."""
        metrics = dict(data["metrics"])
        turnover, cost_paid = metrics.pop("turnover"), metrics.pop("cost_paid")
        dates, wealth = zip(*data["equity"]) if data["equity"] else ((), ())
        equity = pd.Series(wealth, index=pd.DatetimeIndex(dates), name=data["strategy"], dtype=float)
        return cls(strategy=data["strategy"], equity=equity, metrics=Metrics(**metrics),
                   turnover=turnover, cost_paid=cost_paid)

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def write_equity_tsv(self, path: Union[str, Path]) -> Path:
        """Plot-ready ``date  wealth`` rows."""
        path = Path(path)
        frame = pd.DataFrame({"date": pd.DatetimeIndex(self.equity.index).strftime("%Y-%m-%d"),
                              "wealth": self.equity.to_numpy()})
        frame.to_csv(path, sep="\t", index=False)
        return path


##################################
# --- STRATEGY CONSTRUCTORS --- #
##################################

def equal_weight_strategy(n_assets: int, rebalance_interval: int = 1) -> StrategyRef:
    """Constant ``1/N`` targets."""
    return StrategyRef(StrategyKind.EQUAL_WEIGHT, rebalance_interval, weights=uniform_weights(n_assets))


def mean_variance_strategy(train_returns: ReturnMatrix, n_samples: int = 10_000, seed: int = 0,
                           periods_per_year: int = PERIODS_PER_YEAR,
                           rebalance_interval: int = 21) -> StrategyRef:
    """
    Max-Sharpe sampled portfolio fitted on ``train_returns`` only, then held
    fixed out of sample (rebalanced back to it every ``rebalance_interval`` steps).
    """
    mu = expected_returns(train_returns, periods_per_year)
    cov = covariance(train_returns, periods_per_year)
    best = max_sharpe(sample_frontier(mu, cov, n_samples, seed))
    return StrategyRef(StrategyKind.MEAN_VARIANCE, rebalance_interval, weights=best.weights)


def buy_and_hold_strategy(weights: np.ndarray) -> StrategyRef:
    """Trade once into ``weights`` and let holdings drift."""
    return StrategyRef(StrategyKind.BUY_AND_HOLD, None, weights=weights)


def _record(checkpoint: Union[str, Path, CheckpointRecord]) -> CheckpointRecord:
    record = checkpoint if isinstance(checkpoint, CheckpointRecord) else load_params(checkpoint)
    if record.lookback is None or record.standardizer is None:
        raise ValueError(f"Checkpoint '{record.label}' lacks lookback or feature scaling.")
    return record


def sharpe_policy_strategy(checkpoint: Union[str, Path, CheckpointRecord],
                           rebalance_interval: int = 1) -> StrategyRef:
    """
    Softmax policy trained by Sharpe ascent.

    Raises:
        FileNotFoundError: If the checkpoint file is missing.
    """
    record = _record(checkpoint)
    return StrategyRef(StrategyKind.SHARPE_POLICY, rebalance_interval, params=record.params,
                       standardizer=record.standardizer, lookback=record.lookback)


def ppo_strategy(checkpoint: Union[str, Path, CheckpointRecord], rebalance_interval: int = 21) -> StrategyRef:
    """
    PPO actor acting through its Dirichlet mean.

    Raises:
        FileNotFoundError: If the checkpoint file is missing.
    """
    record = _record(checkpoint)
    return StrategyRef(StrategyKind.DRL_PPO, rebalance_interval, params=record.params,
                       standardizer=record.standardizer, lookback=record.lookback)


#######################
# --- SIMULATION --- #
#######################

def _join(warmup: Optional[PriceTable], prices: PriceTable) -> PriceTable:
    if warmup is None:
        return prices
    if warmup.tickers != prices.tickers:
        raise ValueError("Warm-up and segment prices must have the same tickers.")
    if len(warmup) and warmup.dates[-1] >= prices.dates[0]:
        raise ValueError("Warm-up prices must end before the segment starts.")
    both = warmup.has_range and prices.has_range
    return PriceTable(close=pd.concat([warmup.close, prices.close]),
                      high=pd.concat([warmup.high, prices.high]) if both else None,
                      low=pd.concat([warmup.low, prices.low]) if both else None)


def _weight_fn(strategy: StrategyRef, full: PriceTable, offset: int) -> WeightFn:
    """
    Target weights for segment step ``t`` given the drifted holdings, or
    None while the learned policy's feature window is incomplete.

    ``offset`` is the number of return rows preceding the segment in ``full``.
    """
    if not strategy.kind.learned:
        return lambda t, held: strategy.weights

    returns = to_returns(full)
    lookback, params = strategy.lookback, strategy.params
    n_assets = returns.n_assets

    if strategy.kind is StrategyKind.SHARPE_POLICY:
        if params.sizes[0] != lookback * n_assets:
            raise ValueError(f"Policy expects {params.sizes[0]} inputs, "
                             f"lookback {lookback} x {n_assets} assets gives {lookback * n_assets}.")
        if len(returns) <= lookback:
            return lambda t, held: None
        path, _ = forward(params, build_features(strategy.standardizer.transform(returns.values), lookback))
        return lambda t, held: path[offset + t - lookback] if offset + t >= lookback else None

    hl = hl_ratios(full)
    if hl is not None and params.sizes[0] == observation_size(n_assets, lookback, True):
        series = MarketSeries.from_returns(returns, strategy.standardizer, hl)
    elif params.sizes[0] == observation_size(n_assets, lookback, False):
        series = MarketSeries.from_returns(returns, strategy.standardizer)
    else:
        raise ValueError(f"Actor input size {params.sizes[0]} does not match the market observations.")

    def ppo_weights(t: int, held: np.ndarray) -> Optional[np.ndarray]:
        row = offset + t
        if row < lookback:
            return None
        prev = held if held.sum() > 0.0 else uniform_weights(n_assets)
        return policy_mean(params, observation(state_at(series, lookback, row, prev), series))
    return ppo_weights


def simulate(weight_fn: WeightFn, relatives: np.ndarray, rebalance_interval: Optional[int],
             mu_cost: float, initial_wealth: float = 1.0) -> tuple[np.ndarray, np.ndarray, float, float]:
    """
    Wealth path of a rebalancing rule starting from cash.

    At every rebalancing step the portfolio trades from its drifted holdings
    to the target at cost ``μ · Σ|target - held|`` of current wealth, then
    grows by ``target · y``. Between rebalancing steps the holdings drift.

    Args:
        weight_fn: ``(step, held) -> target`` (None falls back to equal weights).
        relatives (np.ndarray): Price relatives ``[steps × N]``.
        rebalance_interval (int, optional): None trades only at the first step.
        mu_cost (float): Linear cost coefficient.
        initial_wealth (float): Starting cash.

    Returns:
        tuple: Wealth ``[steps + 1]``, targets ``[steps × N]``, mean turnover
        per step and total cost paid.

    Raises:
        RuinError: If a growth factor is not positive.
    """
    n_steps, n_assets = relatives.shape
    wealth = np.empty(n_steps + 1)
    wealth[0] = initial_wealth
    targets = np.empty((n_steps, n_assets))
    held = np.zeros(n_assets)
    turnover = cost_paid = 0.0
    warned = False
    for t in range(n_steps):
        rebalance = t == 0 or (rebalance_interval is not None and t % rebalance_interval == 0)
        target = held
        if rebalance:
            target = weight_fn(t, held)
            if target is None:
                if not warned:
                    logger.info("Feature window incomplete at step %d; holding equal weights", t)
                    warned = True
                target = uniform_weights(n_assets)
        traded = float(np.sum(np.abs(target - held)))
        growth = float(target @ relatives[t]) - mu_cost * traded
        if not growth > 0.0:
            raise RuinError(f"Portfolio growth factor {growth} at step {t} is not positive.")
        turnover += traded
        cost_paid += wealth[t] * mu_cost * traded
        wealth[t + 1] = wealth[t] * growth
        targets[t] = target
        grown = target * relatives[t]
        held = grown / np.sum(grown)
    return wealth, targets, turnover / n_steps, cost_paid


def run_strategy(strategy: StrategyRef, prices: PriceTable, mu_cost: float = 0.001,
                 initial_wealth: float = 1.0, benchmark: Optional[pd.Series] = None,
                 periods_per_year: int = PERIODS_PER_YEAR,
                 warmup: Optional[PriceTable] = None) -> BacktestReport:
    """
    Backtest ``strategy`` over ``prices``.

    Args:
        strategy (StrategyRef): What to trade.
        prices (PriceTable): Evaluation segment; equity is reported on its dates.
        mu_cost (float): Linear cost coefficient, as in the environment reward.
        initial_wealth (float): Starting cash.
        benchmark (pd.Series, optional): Benchmark equity on the same dates
            (default = equal weight rebalanced every step).
        periods_per_year (int): Annualization factor.
        warmup (PriceTable, optional): Prices preceding the segment that feed
            the learned policies' first feature windows.

    Raises:
        ValueError: If the segment is shorter than one rebalancing interval.
        RuinError: If wealth would drop to zero.
    """
    if not 0.0 <= mu_cost <= 0.1:
        raise ValueError(f"mu_cost out of range [0, 0.1], got {mu_cost}.")
    interval = strategy.rebalance_interval or 1
    if len(prices) < interval + 1:
        raise ValueError(f"Segment has {len(prices)} rows, need rebalance_interval + 1 = {interval + 1}.")

    full = _join(warmup, prices)
    offset = 0 if warmup is None else len(warmup)
    relatives = full.close.to_numpy(dtype=float)
    relatives = relatives[offset + 1:] / relatives[offset:-1]

    wealth, targets, turnover, cost_paid = simulate(_weight_fn(strategy, full, offset), relatives,
                                                    strategy.rebalance_interval, mu_cost, initial_wealth)
    equity = pd.Series(wealth, index=prices.dates, name=strategy.label)
    if benchmark is None:
        eq = uniform_weights(len(prices.tickers))
        bench, _, _, _ = simulate(lambda t, held: eq, relatives, 1, mu_cost, initial_wealth)
        benchmark = pd.Series(bench, index=prices.dates)

    metrics = compute_metrics(equity, benchmark, periods_per_year)
    logger.info("%s: cumulative return %.4f, max drawdown %.4f, cost paid %.6f", strategy.label,
                metrics.cumulative_return, metrics.max_drawdown, cost_paid)
    return BacktestReport(strategy=strategy.label, equity=equity, metrics=metrics,
                          turnover=turnover, cost_paid=cost_paid, weights=targets)


def run_all(strategies: Sequence[StrategyRef], prices: PriceTable, mu_cost: float = 0.001,
            initial_wealth: float = 1.0, periods_per_year: int = PERIODS_PER_YEAR,
            warmup: Optional[PriceTable] = None) -> dict[str, BacktestReport]:
    """
    Backtest several strategies on the same segment, warm-up and benchmark.

    The benchmark is the equal-weight portfolio rebalanced every step.
    """
    bench = run_strategy(equal_weight_strategy(len(prices.tickers)), prices, mu_cost, initial_wealth,
                         periods_per_year=periods_per_year)
    reports = {}
    for strategy in strategies:
        label = strategy.label
        while label in reports:
            label += "_"
        reports[label] = run_strategy(strategy, prices, mu_cost, initial_wealth, bench.equity,
                                      periods_per_year, warmup)
    return reports


####################
# --- METRICS --- #
####################

def compute_metrics(equity: Union[pd.Series, np.ndarray], benchmark_equity: Union[pd.Series, np.ndarray, None] = None,
                    periods_per_year: int = PERIODS_PER_YEAR) -> Metrics:
    """
    Annualized performance figures of an equity curve.

    With per-period returns ``q_t = e_t / e_{t-1} - 1``:

    - ``ann_return = (e_end / e_start) ** (ppy / (T - 1)) - 1``
    - ``ann_vol = std(q, ddof=1) · sqrt(ppy)``
    - ``sharpe = ann_return / ann_vol``
    - ``max_drawdown = max_t (1 - e_t / max_{s<=t} e_s)``
    - ``winning_days`` = share of strictly positive ``q_t``
    - ``info_ratio = mean(q - q_b) / std(q - q_b) · sqrt(ppy)``

    Sharpe and information ratio are None (with a warning) when the
    volatility or tracking error is zero, or no benchmark is given.

    Raises:
        ValueError: If fewer than two points are given, the benchmark is
            misaligned, or equity is not strictly positive.

    Example:
        Equity ``[1, 1.1, 0.99, 1.2]`` has a max drawdown of ``0.1``.
    """
    e = np.asarray(equity, dtype=float)
    if e.ndim != 1 or len(e) < 2:
        raise ValueError("Equity curve needs at least two points.")
    if not np.all(np.isfinite(e)) or np.any(e <= 0.0):
        raise ValueError("Equity must be strictly positive and finite.")
    q = e[1:] / e[:-1] - 1.0
    n = len(q)

    growth = e[-1] / e[0]
    ann_return = growth ** (periods_per_year / n) - 1.0
    ann_vol = float(np.std(q, ddof=1) * math.sqrt(periods_per_year)) if n > 1 else 0.0
    sharpe = None
    if ann_vol > ZERO_SPREAD_TOL:
        sharpe = ann_return / ann_vol
    else:
        logger.warning("Zero volatility; Sharpe ratio is undefined.")
    max_drawdown = float(np.max(1.0 - e / np.maximum.accumulate(e)))

    info_ratio = None
    if benchmark_equity is not None:
        b = np.asarray(benchmark_equity, dtype=float)
        if b.shape != e.shape:
            raise ValueError(f"Benchmark has {len(b)} points, equity has {len(e)}.")
        active = q - (b[1:] / b[:-1] - 1.0)
        tracking = float(np.std(active, ddof=1)) if n > 1 else 0.0
        if tracking > ZERO_SPREAD_TOL:
            info_ratio = float(np.mean(active) / tracking * math.sqrt(periods_per_year))
        else:
            logger.warning("Zero tracking error; information ratio is undefined.")

    return Metrics(ann_return=float(ann_return), ann_vol=ann_vol, sharpe=sharpe,
                   max_drawdown=max_drawdown, info_ratio=info_ratio,
                   winning_days=float(np.mean(q > 0.0)), cumulative_return=float(growth - 1.0))


####################
# --- REPORTING --- #
####################

def compare_report(reports: Union[Mapping[str, BacktestReport], Sequence[BacktestReport]],
                   out_dir: Union[str, Path, None] = None) -> pd.DataFrame:
    """
    Side-by-side metric table, one column per strategy.

    When ``out_dir`` is given the table is also written to
    ``comparison.tsv`` and ``comparison.json``.

    Raises:
        ValueError: If ``reports`` is empty.
    """
    if isinstance(reports, Mapping):
        items = list(reports.items())
    else:
        items, seen = [], set()
        for report in reports:
            name = report.strategy
            while name in seen:
                name += "_"
            seen.add(name)
            items.append((name, report))
    if not items:
        raise ValueError("Need at least one report to compare.")

    columns = {name: report.metric_dict() for name, report in items}
    table = pd.DataFrame(columns)
    table.index.name = "metric"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "comparison.tsv", sep="\t")
        (out_dir / "comparison.json").write_text(json.dumps(columns, indent=2))
    return table
