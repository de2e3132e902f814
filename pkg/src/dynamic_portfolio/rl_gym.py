#!/usr/bin/env python3

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces

from dynamic_portfolio.market_data import ReturnMatrix, Standardizer
from dynamic_portfolio.utils import RuinError, renormalize_simplex, uniform_weights

logger = logging.getLogger(__name__)

# Wealth multiplier applied when a step would wipe out the portfolio.
RUIN_FLOOR = 1e-8


######################
# --- DATA TYPES --- #
######################


@dataclass(frozen=True)
class EnvConfig:
    """
    Market environment settings.

    Fields:
        mu_cost (float): Linear transaction-cost coefficient on turnover.
        lookback (int): Feature window length W.
        episode_len (int): Steps per episode.
        initial_wealth (float): Starting portfolio value.
        action_interval (int): Steps between rebalancing decisions; holdings
            drift untouched in between.
    """
    mu_cost: float = 0.001
    lookback: int = 20
    episode_len: int = 63
    initial_wealth: float = 1.0
    action_interval: int = 21

    def __post_init__(self):
        if not 0.0 <= self.mu_cost <= 0.1:
            raise ValueError(f"mu_cost out of range [0, 0.1], got {self.mu_cost}.")
        if self.lookback < 1:
            raise ValueError(f"lookback must be at least 1, got {self.lookback}.")
        if self.episode_len < 2:
            raise ValueError(f"episode_len must be at least 2, got {self.episode_len}.")
        if self.initial_wealth <= 0.0:
            raise ValueError(f"initial_wealth must be positive, got {self.initial_wealth}.")
        if self.action_interval < 1:
            raise ValueError(f"action_interval must be at least 1, got {self.action_interval}.")


@dataclass(frozen=True, eq=False)
class MarketSeries:
    """
    Aligned arrays an environment replays.

    Fields:
        returns (np.ndarray): Raw simple returns ``[T × N]`` (rewards use these).
        features (np.ndarray): Standardized returns ``[T × N]`` (observations use these).
        hl (np.ndarray, optional): High/close and low/close ratios minus one ``[T × 2N]``.
    """
    returns: np.ndarray
    features: np.ndarray
    hl: Optional[np.ndarray] = None

    @classmethod
    def from_returns(cls, returns: ReturnMatrix, standardizer: Standardizer,
                     hl: Optional[pd.DataFrame] = None) -> "MarketSeries":
        hl_values = None
        if hl is not None:
            hl_values = hl.reindex(returns.dates).to_numpy(dtype=float) - 1.0
        return cls(returns.values, standardizer.transform(returns.values), hl_values)

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def __len__(self) -> int:
        return len(self.returns)


@dataclass(frozen=True, eq=False)
class EnvState:
    """
    Environment state between two decisions.

    Fields:
        window (np.ndarray): Last ``W`` standardized return rows ``[W × N]``.
        cov (np.ndarray): Sample covariance of ``window`` ``[N × N]``.
        prev_weights (np.ndarray): Drifted holdings before rebalancing.
        step (int): Steps taken in the episode.
        wealth (float): Current portfolio value.
        t (int): Row of the return realized by the next action.
        ruined (bool): True once a step wiped out the portfolio.
    """
    window: np.ndarray
    cov: np.ndarray
    prev_weights: np.ndarray
    step: int
    wealth: float
    t: int
    ruined: bool = False


@dataclass(eq=False)
class Trajectory:
    """Per-step records of one rollout."""
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    terminated: bool = False
    bootstrap_value: float = 0.0

    def append(self, obs: np.ndarray, action: np.ndarray, reward: float, value: float, log_prob: float):
        self.observations.append(obs)
        self.actions.append(action)
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.log_probs.append(float(log_prob))

    def __len__(self) -> int:
        return len(self.rewards)


##################
# --- REWARD --- #
##################

def reward(action: np.ndarray, y: np.ndarray, prev_w: np.ndarray, mu: float) -> float:
    """
    Log growth net of linear transaction costs:
    ``ln(A·y - μ Σ|A_i - W_i|)``.

    Args:
        action (np.ndarray): New target weights ``A``.
        y (np.ndarray): Price relatives over the rewarded step.
        prev_w (np.ndarray): Drifted weights ``W`` held before rebalancing.
        mu (float): Cost coefficient.

    Raises:
        RuinError: If the log argument is not strictly positive.

    Example:
        ``A=[1, 0]``, ``W=[0, 1]``, ``y=[1.1, 0.9]``, ``μ=0.01`` gives ``ln(1.08)``.
    """
    growth = float(np.dot(action, y)) - mu * float(np.sum(np.abs(np.asarray(action) - np.asarray(prev_w))))
    if not growth > 0.0:
        raise RuinError(f"Portfolio growth factor {growth} is not positive.")
    return math.log(growth)


###########################
# --- STATE TRANSITION --- #
###########################

def _window_cov(window: np.ndarray) -> np.ndarray:
    n_assets = window.shape[1]
    if len(window) < 2:
        return np.zeros((n_assets, n_assets))
    return np.atleast_2d(np.cov(window, rowvar=False, ddof=1))


def state_at(data: MarketSeries, lookback: int, t: int, prev_weights: np.ndarray,
             step: int = 0, wealth: float = 1.0) -> EnvState:
    """State whose window ends just before return row ``t``."""
    if t < lookback or t > len(data):
        raise ValueError(f"Row {t} has no full {lookback}-row window in {len(data)} rows.")
    window = data.features[t - lookback:t]
    return EnvState(window=window, cov=_window_cov(window), prev_weights=prev_weights,
                    step=step, wealth=wealth, t=t)


def env_reset(data: MarketSeries, cfg: EnvConfig, start: int = 0) -> EnvState:
    """
    Start an episode at row ``start`` of ``data``.

    The first decision sees rows ``start .. start+W-1`` and is rewarded on row
    ``start + W``. Holdings start equal-weighted.

    Raises:
        ValueError: If fewer than ``lookback + episode_len`` rows follow ``start``.
    """
    if start < 0 or len(data) - start < cfg.lookback + cfg.episode_len:
        raise ValueError(f"Segment too short: {len(data) - start} rows from {start}, "
                         f"need lookback + episode_len = {cfg.lookback + cfg.episode_len}.")
    return state_at(data, cfg.lookback, start + cfg.lookback, uniform_weights(data.n_assets),
                     step=0, wealth=cfg.initial_wealth)


def env_step(state: EnvState, action: np.ndarray, data: MarketSeries,
             cfg: EnvConfig) -> tuple[EnvState, float, bool]:
    """
    Apply ``action``, realize one period of returns and advance the window.

    Between rebalancing points (``step % action_interval != 0``) the action is
    ignored and the drifted holdings are kept at no cost. The next state's
    ``prev_weights`` are the post-trade holdings after drift,
    ``A_i y_i / Σ_j A_j y_j``.

    Returns:
        tuple[EnvState, float, bool]: Next state, reward, and whether the
        episode has ended (length reached or ruin).

    Raises:
        ValueError: If ``action`` is off the simplex by more than 1e-6.
    """
    if state.ruined or state.step >= cfg.episode_len:
        raise ValueError("Episode has already ended; call env_reset().")
    if state.step % cfg.action_interval == 0:
        action = renormalize_simplex(np.asarray(action, dtype=float))
    else:
        action = state.prev_weights

    y = 1.0 + data.returns[state.t]
    try:
        r = reward(action, y, state.prev_weights, cfg.mu_cost)
        ruined = False
    except RuinError as err:
        logger.warning("Episode ruined at row %d: %s", state.t, err)
        r, ruined = math.log(RUIN_FLOOR), True

    grown = action * y
    total = float(np.sum(grown))
    drifted = grown / total if total > 0.0 else action
    wealth = state.wealth * math.exp(r)
    step = state.step + 1
    done = ruined or step >= cfg.episode_len
    if done:
        # terminal state keeps the last window; nothing more is observed
        next_state = replace(state, prev_weights=drifted, step=step, wealth=wealth, ruined=ruined)
    else:
        next_state = state_at(data, cfg.lookback, state.t + 1, drifted, step, wealth)
    return next_state, r, done


def observation(state: EnvState, data: MarketSeries) -> np.ndarray:
    """
    Flat policy input: window, upper-triangular covariance, holdings and the
    latest high/low ratios when available.
    """
    upper = state.cov[np.triu_indices(state.cov.shape[0])]
    parts = [state.window.ravel(), upper, state.prev_weights]
    if data.hl is not None:
        parts.append(data.hl[state.t - 1])
    return np.concatenate(parts)


def observation_size(n_assets: int, lookback: int, has_hl: bool = False) -> int:
    """Length of :func:`observation` output."""
    size = lookback * n_assets + n_assets * (n_assets + 1) // 2 + n_assets
    return size + (2 * n_assets if has_hl else 0)


#########################
# --- ADVANTAGES --- #
#########################

def gae_advantages(traj: Trajectory, gamma: float = 0.99, lam: float = 0.95,
                   bootstrap_value: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation.

    ``δ_t = r_t + γ V_{t+1} - V_t`` with ``V`` past the last step equal to
    ``bootstrap_value`` (zero for a terminated trajectory), and
    ``adv_t = Σ_k (γλ)^k δ_{t+k}``.

    Args:
        traj (Trajectory): Rewards and value estimates of one rollout.
        gamma (float): Discount in [0, 1].
        lam (float): Smoothing in [0, 1].
        bootstrap_value (float, optional): Overrides ``traj.bootstrap_value``.

    Returns:
        tuple[np.ndarray, np.ndarray]: Advantages and return targets ``adv + V``.

    Example:
        ``γ=λ=1``, rewards ``[1, 1]``, values ``[0, 0]``, terminal gives ``[2, 1]``.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"gamma and lam must be in [0, 1], got {gamma}, {lam}.")
    rewards = np.asarray(traj.rewards, dtype=float)
    values = np.asarray(traj.values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError(f"{len(rewards)} rewards do not match {len(values)} values.")
    if bootstrap_value is None:
        bootstrap_value = traj.bootstrap_value
    next_value = 0.0 if traj.terminated else float(bootstrap_value)

    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


######################
# --- GYM WRAPPER --- #
######################

class PortfolioEnv(gym.Env):
    """
    ``gymnasium`` interface over :func:`env_reset` / :func:`env_step`.

    ``terminated`` signals ruin; ``truncated`` signals that ``episode_len``
    steps have elapsed.

    Args:
        data (MarketSeries): Replayed market.
        cfg (EnvConfig): Environment settings.
        random_start (bool): Draw each episode's start row from ``np_random``;
            otherwise start at row 0 unless ``options={"start": k}`` is given.

    Usage:
        >>> env = PortfolioEnv(data, EnvConfig(lookback=5, episode_len=10, action_interval=1))
        >>> obs, info = env.reset(seed=0)
    """
    metadata = {"render_modes": []}

    def __init__(self, data: MarketSeries, cfg: EnvConfig, random_start: bool = True):
        super().__init__()
        self.data = data
        self.cfg = cfg
        self.random_start = random_start
        self.max_start = len(data) - cfg.lookback - cfg.episode_len
        if self.max_start < 0:
            raise ValueError(f"Segment too short: {len(data)} rows, "
                             f"need lookback + episode_len = {cfg.lookback + cfg.episode_len}.")
        n_assets = data.n_assets
        self.action_space = spaces.Box(low=0.0, high=1.0, shape=(n_assets,), dtype=np.float64)
        obs_dim = observation_size(n_assets, cfg.lookback, data.hl is not None)
        self.observation_space = spaces.Box(low=-np.inf, high=np.inf, shape=(obs_dim,), dtype=np.float64)
        self.state: Optional[EnvState] = None

    def reset(self, *, seed: Optional[int] = None,
              options: Optional[dict[str, Any]] = None) -> tuple[np.ndarray, dict]:
        super().reset(seed=seed)
        if options and "start" in options:
            start = int(options["start"])
        elif self.random_start:
            start = int(self.np_random.integers(0, self.max_start + 1))
        else:
            start = 0
        self.state = env_reset(self.data, self.cfg, start)
        return observation(self.state, self.data), self._info()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, bool, dict]:
        if self.state is None:
            raise ValueError("Call reset() before step().")
        self.state, r, done = env_step(self.state, action, self.data, self.cfg)
        terminated = self.state.ruined
        truncated = done and not terminated
        return observation(self.state, self.data), r, terminated, truncated, self._info()

    def _info(self) -> dict:
        return {"wealth": self.state.wealth, "t": self.state.t, "weights": self.state.prev_weights}
