#!/usr/bin/env python3

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd

from dynamic_portfolio.market_data import ReturnMatrix, Standardizer
from dynamic_portfolio.optim import OptimizerKind, make_optimizer
from dynamic_portfolio.policy_net import MlpParams, backward, forward, init_params, regularization
from dynamic_portfolio.tuning import SearchKind, search_candidates
from dynamic_portfolio.utils import NonFiniteError, ZeroVolatilityError, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SharpeTrainConfig:
    """
    Hyperparameters of the direct Sharpe-ratio trainer.

    Fields:
        alpha (float): Learning rate of the ascent step.
        epochs (int): Maximum number of full-batch epochs.
        horizon (int, optional): Trading-period length T in steps; None uses
            every row after the first ``lookback``.
        lookback (int): Feature window length in steps.
        eps_vol (float): Volatility floor of the Sharpe objective.
        hidden_sizes (tuple[int, ...]): Hidden tanh layer widths.
        optimizer (str): ``"sgd"`` (plain ascent), ``"adam"`` or ``"rmsprop"``.
        l1, l2 (float): Weight-matrix penalty coefficients.
        tol (float): Plateau threshold on ``|ΔL_T|``.
        patience (int): Consecutive plateau epochs before stopping.
    """
    alpha: float = 0.5
    epochs: int = 200
    horizon: Optional[int] = None
    lookback: int = 20
    eps_vol: float = 1e-8
    hidden_sizes: tuple[int, ...] = (64, 64)
    optimizer: str = "sgd"
    l1: float = 0.0
    l2: float = 0.0
    tol: float = 1e-8
    patience: int = 10

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}.")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}.")
        if self.horizon is not None and self.horizon < 2:
            raise ValueError(f"horizon must be at least 2, got {self.horizon}.")
        if self.lookback < 1:
            raise ValueError(f"lookback must be at least 1, got {self.lookback}.")
        if self.eps_vol <= 0.0:
            raise ValueError(f"eps_vol must be positive, got {self.eps_vol}.")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}.")
        OptimizerKind.coerce(self.optimizer)


@dataclass(eq=False)
class SharpeTrainResult:
    """Trained policy, per-epoch L_T history and the feature scaling it expects."""
    params: MlpParams
    history: list[float]
    standardizer: Standardizer
    lookback: int


################################
# --- OBJECTIVE & GRADIENT --- #
################################

def realized_returns(weights_path: np.ndarray, returns: np.ndarray) -> np.ndarray:
    """
    Portfolio returns ``R_t = w_{t-1} · r_t``.

    Args:
        weights_path (np.ndarray): ``[T × N]``; row ``k`` was decided before return row ``k``.
        returns (np.ndarray): ``[T × N]`` asset returns.

    Raises:
        ValueError: If the two arrays are not aligned.

    Example:
        Weights ``[[1, 0], [0, 1]]`` against returns ``[[0.1, 0], [0, 0.2]]``
        give ``[0.1, 0.2]``.
    """
    w = np.atleast_2d(np.asarray(weights_path, dtype=float))
    r = np.atleast_2d(np.asarray(returns, dtype=float))
    if w.shape != r.shape:
        raise ValueError(f"Weights {w.shape} and returns {r.shape} are misaligned.")
    return np.einsum("ti,ti->t", w, r)


def _moments(R: np.ndarray, eps_vol: float) -> tuple[float, float, float]:
    R = np.asarray(R, dtype=float)
    if R.ndim != 1 or R.size < 2:
        raise ValueError("Sharpe objective needs a series of at least two returns.")
    A = float(R.mean())
    B = float(np.mean(R * R))
    S = float(np.mean((R - A) ** 2))
    if not np.isfinite(A + B):
        raise NonFiniteError("Non-finite portfolio returns.")
    if S <= eps_vol * eps_vol:
        raise ZeroVolatilityError(f"Return series volatility {np.sqrt(max(S, 0.0)):.3g} "
                                  f"is below the floor {eps_vol}.")
    return A, B, S


def sharpe_objective(R: np.ndarray, eps_vol: float = 1e-8) -> float:
    """
    Period Sharpe ratio ``L_T = A / sqrt(B - A²)`` with population moments
    ``A = mean(R)`` and ``B = mean(R²)``.

    Raises:
        ZeroVolatilityError: If the volatility is at or below ``eps_vol``.

    Example:
        ``R = [0.01, 0.03]`` gives ``2.0``.
    """
    A, _, S = _moments(R, eps_vol)
    return A / np.sqrt(S)


def sharpe_grad_wrt_returns(R: np.ndarray, eps_vol: float = 1e-8) -> np.ndarray:
    """
    Closed-form ``∂L_T / ∂R_t``.

    With ``S = B - A²``: ``∂L/∂A = B·S^(-3/2)``, ``∂L/∂B = -(A/2)·S^(-3/2)`` and
    ``∂L/∂R_t = ∂L/∂A / T + ∂L/∂B · 2R_t / T``.

    Example:
        ``R = [0.01, 0.03]`` gives ``[150, -50]``.
    """
    R = np.asarray(R, dtype=float)
    A, B, S = _moments(R, eps_vol)
    n = R.size
    scale = S ** -1.5
    dA = B * scale
    dB = -0.5 * A * scale
    return dA / n + dB * 2.0 * R / n


def grad_ascent_step(params: MlpParams, grad: MlpParams, alpha: float) -> MlpParams:
    """
    One ascent update ``θ_new = θ_old + α · ∂L_T/∂θ``.

    Raises:
        ValueError: If ``alpha`` is not positive or the shapes differ.
    """
    if alpha <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}.")
    return params.combine(grad, alpha)


##########################
# --- FEATURE WINDOWS --- #
##########################

def build_features(std_returns: np.ndarray, lookback: int, horizon: Optional[int] = None) -> np.ndarray:
    """
    Flattened lookback windows of standardized returns.

    Row ``k`` holds rows ``k .. k+lookback-1`` of ``std_returns`` and drives
    the weights applied to return row ``k + lookback``.

    Returns:
        np.ndarray: ``[horizon × (lookback·N)]``.
    """
    std_returns = np.asarray(std_returns, dtype=float)
    available = len(std_returns) - lookback
    horizon = available if horizon is None else horizon
    if horizon < 1 or horizon > available:
        raise ValueError(f"Need at least lookback + horizon = {lookback + max(horizon, 1)} rows, "
                         f"got {len(std_returns)}.")
    windows = np.lib.stride_tricks.sliding_window_view(std_returns, lookback, axis=0)
    # windows: [rows - lookback + 1, N, lookback] -> time-major flattening
    return np.ascontiguousarray(windows[:horizon].transpose(0, 2, 1)).reshape(horizon, -1)


def _episode(returns: ReturnMatrix, standardizer: Standardizer, lookback: int,
             horizon: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    values = returns.values
    X = build_features(standardizer.transform(values), lookback, horizon)
    return X, values[lookback:lookback + len(X)]


def sharpe_loss_and_grad(params: MlpParams, X: np.ndarray, r: np.ndarray, eps_vol: float = 1e-8,
                         l1: float = 0.0, l2: float = 0.0) -> tuple[float, MlpParams, np.ndarray]:
    """
    Regularized objective ``L_T - penalty`` and its gradient with respect to θ.

    The chain runs ``∂L_T/∂R_t → ∂R_t/∂w_{t-1} = r_t → backward``.

    Returns:
        tuple[float, MlpParams, np.ndarray]: Objective, gradient, weights path.
    """
    weights, cache = forward(params, X)
    R = realized_returns(weights, r)
    objective = sharpe_objective(R, eps_vol)
    grad_w = sharpe_grad_wrt_returns(R, eps_vol)[:, None] * r
    grads = backward(params, cache, grad_w)
    if l1 > 0.0 or l2 > 0.0:
        penalty, penalty_grad = regularization(params, l1, l2)
        objective -= penalty
        grads = grads.combine(penalty_grad, -1.0)
    return objective, grads, weights


####################
# --- TRAINING --- #
####################

def train(returns: ReturnMatrix, cfg: SharpeTrainConfig = SharpeTrainConfig(), seed: int = 0,
          standardizer: Optional[Standardizer] = None) -> SharpeTrainResult:
    """
    Maximize the period Sharpe ratio by full-batch gradient ascent.

    Features are standardized with statistics from ``returns`` (the training
    segment) unless a fitted ``standardizer`` is given. Training stops after
    ``cfg.epochs`` or once ``|ΔL_T| < cfg.tol`` for ``cfg.patience``
    consecutive epochs.

    Args:
        returns (ReturnMatrix): Training returns.
        cfg (SharpeTrainConfig): Hyperparameters.
        seed (int): Parameter initialization seed.
        standardizer (Standardizer, optional): Pre-fitted feature scaling.

    Returns:
        SharpeTrainResult: Final parameters and the L_T recorded at each epoch.

    Raises:
        ValueError: If there are fewer than ``lookback + horizon`` rows.
        ZeroVolatilityError: If an epoch's portfolio returns are constant.
        NonFiniteError: If the objective blows up.
    """
    if standardizer is None:
        standardizer = Standardizer().fit(returns.values)
    X, r = _episode(returns, standardizer, cfg.lookback, cfg.horizon)
    if len(X) < 2:
        raise ValueError("The trading period needs at least two steps.")

    sizes = [X.shape[1], *cfg.hidden_sizes, returns.n_assets]
    params = init_params(sizes, seed)
    plain = OptimizerKind.coerce(cfg.optimizer) is OptimizerKind.SGD
    optimizer = None if plain else make_optimizer(cfg.optimizer, cfg.alpha)
    history: list[float] = []
    plateau = 0

    for epoch in range(cfg.epochs):
        objective, grads, _ = sharpe_loss_and_grad(params, X, r, cfg.eps_vol, cfg.l1, cfg.l2)
        if not np.isfinite(objective):
            raise NonFiniteError(f"Objective became non-finite at epoch {epoch}; lower alpha.")
        if history and abs(objective - history[-1]) < cfg.tol:
            plateau += 1
        else:
            plateau = 0
        history.append(float(objective))
        if plateau >= cfg.patience:
            logger.info("Converged after %d epochs (L_T = %.6f)", epoch + 1, objective)
            break
        if plain:
            params = grad_ascent_step(params, grads, cfg.alpha)
        else:
            params = optimizer.step(params, grads, ascend=True)
        if epoch % 50 == 0:
            logger.debug("epoch %d: L_T = %.6f", epoch, objective)

    if history:
        logger.info("Sharpe trainer finished: %d epochs, L_T %.6f -> %.6f",
                    len(history), history[0], history[-1])
    return SharpeTrainResult(params=params, history=history, standardizer=standardizer, lookback=cfg.lookback)


def evaluate_policy(params: MlpParams, returns: ReturnMatrix, standardizer: Standardizer, lookback: int,
                    eps_vol: float = 1e-8,
                    warmup: Optional[ReturnMatrix] = None) -> tuple[np.ndarray, np.ndarray, float]:
    """
    Roll a trained policy over ``returns`` without updating it.

    Args:
        warmup (ReturnMatrix, optional): Preceding rows; its last ``lookback``
            rows seed the feature window so that every row of ``returns`` is traded.

    Returns:
        tuple[np.ndarray, np.ndarray, float]: Weights path, portfolio returns, L_T.
    """
    if warmup is not None:
        returns = ReturnMatrix(pd.concat([warmup.returns.iloc[-lookback:], returns.returns]))
    X, r = _episode(returns, standardizer, lookback, None)
    weights, _ = forward(params, X)
    R = realized_returns(weights, r)
    return weights, R, sharpe_objective(R, eps_vol)


def tune_on_validation(train_returns: ReturnMatrix, val_returns: ReturnMatrix,
                       base: SharpeTrainConfig = SharpeTrainConfig(),
                       alphas: Iterable[float] = (0.1, 0.5, 1.0),
                       lookbacks: Iterable[int] = (10, 20),
                       seed: int = 0, search: Union[SearchKind, str] = SearchKind.GRID,
                       n_trials: Optional[int] = None) -> tuple[SharpeTrainConfig, SharpeTrainResult, dict]:
    """
    Search over ``(alpha, lookback)`` scored by validation L_T.

    Args:
        search (SearchKind | str): ``grid`` tries every pair, ``random`` tries
            ``n_trials`` distinct pairs drawn with ``seed``.

    Returns:
        tuple: Best config, its training result, and ``{(alpha, lookback): score}``
        for the pairs tried (None for configurations that failed).
    """
    space = {"alpha": list(alphas), "lookback": list(lookbacks)}
    scores: dict = {}
    best = None
    for candidate in search_candidates(space, search, n_trials, derive_seed(seed, "sharpe_search")):
        alpha, lookback = candidate["alpha"], candidate["lookback"]
        cfg = replace(base, alpha=alpha, lookback=lookback)
        try:
            result = train(train_returns, cfg, seed)
            _, _, score = evaluate_policy(result.params, val_returns, result.standardizer, lookback,
                                          cfg.eps_vol, warmup=train_returns)
        except (ZeroVolatilityError, NonFiniteError) as err:
            logger.warning("alpha=%g lookback=%d failed: %s", alpha, lookback, err)
            scores[(alpha, lookback)] = None
            continue
        scores[(alpha, lookback)] = score
        logger.info("alpha=%g lookback=%d: validation L_T = %.4f", alpha, lookback, score)
        if best is None or score > best[2]:
            best = (cfg, result, score)
    if best is None:
        raise ValueError("Every candidate configuration failed.")
    return best[0], best[1], scores


def write_history_tsv(history: list[float], path: Union[str, Path]) -> Path:
    """Write the ``epoch  sharpe`` training curve."""
    path = Path(path)
    pd.DataFrame({"epoch": range(len(history)), "sharpe": history}).to_csv(path, sep="\t", index=False)
    return path
