#!/usr/bin/env python3

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from dynamic_portfolio.market_data import ReturnMatrix
from dynamic_portfolio.utils import check_simplex

logger = logging.getLogger(__name__)

PERIODS_PER_YEAR = 252
MAX_SUBSETS = 10**6
RADICAND_TOL = 1e-12


######################
# --- DATA TYPES --- #
######################


@dataclass(frozen=True, eq=False)
class ExpectedReturns:
    """Annualized expected return per ticker."""
    tickers: list[str]
    mu: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("Expected returns must be finite.")

    def subset(self, idx: list[int]) -> "ExpectedReturns":
        return ExpectedReturns([self.tickers[i] for i in idx], self.mu[idx])


@dataclass(frozen=True, eq=False)
class CovMatrix:
    """Annualized return covariance; symmetric positive semidefinite."""
    tickers: list[str]
    cov: np.ndarray

    def __post_init__(self):
        cov = self.cov
        if cov.shape != (len(self.tickers), len(self.tickers)):
            raise ValueError(f"Covariance shape {cov.shape} does not match {len(self.tickers)} tickers.")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("Covariance matrix must be symmetric.")
        if np.any(np.diag(cov) < 0.0):
            raise ValueError("Covariance diagonal must be non-negative.")
        eig = np.linalg.eigvalsh(cov)
        if eig.size and eig[0] < -1e-10 * max(abs(eig[-1]), 1.0):
            raise ValueError("Covariance matrix must be positive semidefinite.")

    def subset(self, idx: list[int]) -> "CovMatrix":
        return CovMatrix([self.tickers[i] for i in idx], self.cov[np.ix_(idx, idx)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.cov, index=self.tickers, columns=self.tickers)


@dataclass(frozen=True, eq=False)
class FrontierPoint:
    """
    A portfolio in risk-return space.

    Fields:
        risk (float): Annualized volatility.
        ret (float): Annualized expected return.
        sharpe (float): ``ret / risk`` with a zero risk-free rate; NaN when ``risk == 0``.
        weights (np.ndarray): The simplex weights producing the point.
    """
    risk: float
    ret: float
    sharpe: float
    weights: np.ndarray = field(repr=False)

    @classmethod
    def from_weights(cls, mu: ExpectedReturns, cov: CovMatrix, w: np.ndarray) -> "FrontierPoint":
        ret = portfolio_return(mu, w)
        risk = portfolio_risk(cov, w)
        return cls(risk=risk, ret=ret, sharpe=ret / risk if risk > 0.0 else math.nan, weights=w)

    def to_dict(self, tickers: list[str]) -> dict:
        return {
            "risk": self.risk,
            "return": self.ret,
            "sharpe": None if math.isnan(self.sharpe) else self.sharpe,
            "weights": dict(zip(tickers, map(float, self.weights))),
        }


@dataclass(frozen=True, eq=False)
class SubsetSelection:
    """Outcome of :func:`select_best_subset`."""
    tickers: list[str]
    point: FrontierPoint
    n_examined: int


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    """Whole-share allocation and the cash left over."""
    shares: dict[str, int]
    leftover: float

    def to_dict(self) -> dict:
        out = {ticker: int(n) for ticker, n in self.shares.items()}
        out["leftover"] = self.leftover
        return out


######################
# --- ESTIMATORS --- #
######################

def expected_returns(returns: ReturnMatrix, periods_per_year: int = PERIODS_PER_YEAR) -> ExpectedReturns:
    """
    Annualized mean return per column: ``mean(r_i) · periods_per_year``.

    Example:
        Column ``[0.01, 0.03]`` with 252 periods per year gives ``5.04``.
    """
    if len(returns) < 2:
        raise ValueError("At least two return rows are required.")
    if periods_per_year < 1:
        raise ValueError(f"periods_per_year must be positive, got {periods_per_year}.")
    mu = returns.values.mean(axis=0) * periods_per_year
    return ExpectedReturns(returns.tickers, mu)


def covariance(returns: ReturnMatrix, periods_per_year: int = PERIODS_PER_YEAR) -> CovMatrix:
    """
    Annualized unbiased sample covariance of per-period returns.

    Example:
        A single column ``[0.01, -0.01]`` with 252 periods per year gives a
        variance of ``2e-4 · 252 = 0.0504``.
    """
    if len(returns) < 2:
        raise ValueError("At least two return rows are required.")
    if periods_per_year < 1:
        raise ValueError(f"periods_per_year must be positive, got {periods_per_year}.")
    cov = returns.returns.cov(ddof=1).to_numpy(dtype=float) * periods_per_year
    return CovMatrix(returns.tickers, cov)


def correlation(cov: CovMatrix) -> pd.DataFrame:
    """Correlation matrix implied by ``cov``; zero-variance assets get zero correlation."""
    sd = np.sqrt(np.diag(cov.cov))
    denom = np.outer(sd, sd)
    corr = np.divide(cov.cov, denom, out=np.zeros_like(cov.cov), where=denom > 0.0)
    np.fill_diagonal(corr, np.where(sd > 0.0, 1.0, 0.0))
    return pd.DataFrame(corr, index=cov.tickers, columns=cov.tickers)


def _check_dims(n: int, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"Weight vector of length {w.shape} does not match {n} assets.")
    return w


def portfolio_return(mu: ExpectedReturns, w: np.ndarray) -> float:
    """
    Expected portfolio return ``Σ w_i · mu_i``.

    Example:
        ``w=[0.3, 0.7]``, ``mu=[0.1, 0.2]`` gives ``0.17``.
    """
    w = _check_dims(len(mu.mu), w)
    return float(w @ mu.mu)


def portfolio_risk(cov: CovMatrix, w: np.ndarray) -> float:
    """
    Portfolio volatility ``sqrt(Σ_i Σ_j w_i w_j Cov_ij)``.

    Radicands in ``[-1e-12, 0)`` are clamped to zero.

    Raises:
        ValueError: On a dimension mismatch, or a radicand below ``-1e-12``
            (the covariance is not positive semidefinite).
    """
    w = _check_dims(len(cov.tickers), w)
    radicand = float(np.einsum("i,ij,j->", w, cov.cov, w))
    if radicand < -RADICAND_TOL:
        raise ValueError(f"Negative portfolio variance {radicand}; covariance is not PSD.")
    return math.sqrt(max(radicand, 0.0))


############################
# --- FRONTIER SAMPLING --- #
############################

def sample_frontier(mu: ExpectedReturns, cov: CovMatrix, n_samples: int, seed: int) -> list[FrontierPoint]:
    """
    Sample long-only portfolios uniformly from the simplex.

    Weights come from a symmetric Dirichlet with unit concentration, drawn
    from ``numpy.random.default_rng(seed)``; the output is deterministic in
    ``seed``.

    Args:
        mu (ExpectedReturns): Annualized expected returns.
        cov (CovMatrix): Annualized covariance, same tickers as ``mu``.
        n_samples (int): Number of portfolios to draw.
        seed (int): RNG seed.

    Returns:
        list[FrontierPoint]: One point per sample, in draw order.
    """
    n_assets = len(mu.tickers)
    if n_assets < 2:
        raise ValueError(f"Frontier sampling needs at least two assets, got {n_assets}.")
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}.")
    if cov.tickers != mu.tickers:
        raise ValueError("Expected returns and covariance must share tickers.")

    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.ones(n_assets), size=n_samples)
    rets = weights @ mu.mu
    radicands = np.einsum("ki,ij,kj->k", weights, cov.cov, weights)
    if np.any(radicands < -RADICAND_TOL):
        raise ValueError("Negative portfolio variance; covariance is not PSD.")
    risks = np.sqrt(np.clip(radicands, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        sharpes = np.where(risks > 0.0, rets / np.where(risks > 0.0, risks, 1.0), np.nan)
    return [FrontierPoint(float(r), float(m), float(s), w)
            for r, m, s, w in zip(risks, rets, sharpes, weights)]


def max_sharpe(points: list[FrontierPoint]) -> FrontierPoint:
    """
    The point with the largest Sharpe ratio.

    Ties go to the lower risk, then the lexicographically smaller weights.
    Zero-risk points are ignored.

    Raises:
        ValueError: If ``points`` is empty or every point has zero risk.
    """
    if not points:
        raise ValueError("Cannot select from an empty list of points.")
    candidates = [p for p in points if p.risk > 0.0]
    if not candidates:
        raise ValueError("All points have zero risk; Sharpe ratio is undefined.")
    return min(candidates, key=lambda p: (-p.sharpe, p.risk, tuple(p.weights)))


def min_variance(points: list[FrontierPoint]) -> FrontierPoint:
    """The lowest-risk sampled point; ties go to the higher return."""
    if not points:
        raise ValueError("Cannot select from an empty list of points.")
    return min(points, key=lambda p: (p.risk, -p.ret, tuple(p.weights)))


def efficient_points(points: list[FrontierPoint]) -> list[FrontierPoint]:
    """
    The upper edge of a sampled cloud: points not dominated in (risk, return).

    Returns:
        list[FrontierPoint]: Sorted by increasing risk with strictly increasing return.
    """
    edge = []
    best_ret = -math.inf
    for point in sorted(points, key=lambda p: (p.risk, -p.ret)):
        if point.ret > best_ret:
            edge.append(point)
            best_ret = point.ret
    return edge


def write_frontier_tsv(points: list[FrontierPoint], tickers: list[str], path: Union[str, Path]) -> Path:
    """Write ``risk  return  sharpe  w_<ticker>...`` rows, one per point."""
    frame = pd.DataFrame({
        "risk": [p.risk for p in points],
        "return": [p.ret for p in points],
        "sharpe": [p.sharpe for p in points],
    })
    weights = np.vstack([p.weights for p in points]) if points else np.empty((0, len(tickers)))
    for i, ticker in enumerate(tickers):
        frame[f"w_{ticker}"] = weights[:, i]
    path = Path(path)
    frame.to_csv(path, sep="\t", index=False, float_format="%.10g")
    return path


##########################
# --- ASSET SELECTION --- #
##########################

def select_best_subset(returns: ReturnMatrix, k: int, n_samples: int, seed: int,
                       periods_per_year: int = PERIODS_PER_YEAR) -> SubsetSelection:
    """
    Exhaustively search every k-asset sub-universe for the best max-Sharpe portfolio.

    Subsets are visited in lexicographic ticker order and each is sampled with
    the same ``seed``. The first subset reaching the best Sharpe wins.

    Args:
        returns (ReturnMatrix): Per-period returns for the full universe.
        k (int): Subset size.
        n_samples (int): Frontier samples per subset.
        seed (int): Sampling seed shared by every subset.
        periods_per_year (int): Annualization factor.

    Returns:
        SubsetSelection: Winning tickers, its max-Sharpe point and the number
        of subsets examined.

    Raises:
        ValueError: If ``k`` is out of range or ``C(N, k)`` exceeds one million.
    """
    tickers = sorted(returns.tickers)
    n_assets = len(tickers)
    if not 1 <= k <= n_assets:
        raise ValueError(f"k must be in [1, {n_assets}], got {k}.")
    n_subsets = math.comb(n_assets, k)
    if n_subsets > MAX_SUBSETS:
        raise ValueError(f"C({n_assets}, {k}) = {n_subsets} subsets exceeds the limit of {MAX_SUBSETS}.")

    ordered = returns.select(tickers)
    mu_all = expected_returns(ordered, periods_per_year)
    cov_all = covariance(ordered, periods_per_year)

    best: Optional[SubsetSelection] = None
    n_examined = 0
    for combo in itertools.combinations(range(n_assets), k):
        idx = list(combo)
        mu, cov = mu_all.subset(idx), cov_all.subset(idx)
        n_examined += 1
        if k == 1:
            point = FrontierPoint.from_weights(mu, cov, np.ones(1))
            if point.risk == 0.0:
                continue
        else:
            try:
                point = max_sharpe(sample_frontier(mu, cov, n_samples, seed))
            except ValueError:
                # every sampled portfolio of this subset is riskless
                continue
        if best is None or point.sharpe > best.point.sharpe:
            best = SubsetSelection(mu.tickers, point, 0)

    logger.info("Examined %d subsets of size %d from %d assets", n_examined, k, n_assets)
    if best is None:
        raise ValueError("No subset has positive risk; Sharpe ratio is undefined everywhere.")
    return SubsetSelection(best.tickers, best.point, n_examined)


############################
# --- DISCRETE SHARES --- #
############################

def discrete_allocation(w: np.ndarray, latest_prices: np.ndarray, budget: float,
                        tickers: Optional[list[str]] = None) -> AllocationPlan:
    """
    Convert target weights into whole share counts under a cash budget.

    Each asset first receives ``floor(w_i · budget / price_i)`` shares. Then,
    while cash remains for at least one share, one share is bought of the
    affordable asset with the largest value deficit
    ``w_i · budget - shares_i · price_i`` (ties by ticker order).

    Args:
        w (np.ndarray): Simplex weights.
        latest_prices (np.ndarray): Price per share, same order as ``w``.
        budget (float): Cash to invest.
        tickers (list[str], optional): Names for the output; defaults to ``A0..``.

    Returns:
        AllocationPlan: Share counts and leftover cash.

    Example:
        ``w=[0.5, 0.5]``, prices ``[50, 30]``, budget ``100`` gives shares
        ``(1, 1)`` and leftover ``20``.
    """
    w = check_simplex(np.asarray(w, dtype=float), tol=1e-9)
    prices = np.asarray(latest_prices, dtype=float)
    if prices.shape != w.shape:
        raise ValueError(f"{len(prices)} prices do not match {len(w)} weights.")
    if budget <= 0.0:
        raise ValueError(f"budget must be positive, got {budget}.")
    if np.any(prices <= 0.0) or not np.all(np.isfinite(prices)):
        raise ValueError("All prices must be positive and finite.")
    tickers = list(tickers) if tickers is not None else [f"A{i}" for i in range(len(w))]
    if len(tickers) != len(w):
        raise ValueError(f"{len(tickers)} tickers do not match {len(w)} weights.")

    target = w * budget
    shares = np.floor(target / prices).astype(int)
    cash = budget - float(shares @ prices)
    while True:
        affordable = np.flatnonzero(prices <= cash)
        if affordable.size == 0:
            break
        deficit = target[affordable] - shares[affordable] * prices[affordable]
        pick = affordable[int(np.argmax(deficit))]
        shares[pick] += 1
        cash = budget - float(shares @ prices)

    return AllocationPlan(shares=dict(zip(tickers, map(int, shares))), leftover=cash)
