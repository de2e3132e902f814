#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd
from scipy.special import digamma, expit, gammaln

from dynamic_portfolio.market_data import ReturnMatrix, Standardizer
from dynamic_portfolio.optim import Adam, Optimizer, clip_grad_norm
from dynamic_portfolio.policy_net import MlpParams, backward_logits, forward_logits, init_params
from dynamic_portfolio.rl_gym import (EnvConfig, MarketSeries, PortfolioEnv, Trajectory,
                                      env_reset, env_step, gae_advantages, observation)
from dynamic_portfolio.tuning import SearchKind, search_candidates
from dynamic_portfolio.utils import NonFiniteError, derive_seed

logger = logging.getLogger(__name__)

# Samples are kept at least this far from the simplex boundary.
SAMPLE_FLOOR = 1e-12


@dataclass(frozen=True)
class PPOConfig:
    """
    PPO hyperparameters.

    Fields:
        clip_eps (float): Ratio clipping radius ε.
        gamma (float): Discount factor.
        lam (float): GAE smoothing.
        update_epochs (int): Passes over each rollout batch.
        minibatch (int): Samples per gradient step.
        lr (float): Adam step size for actor and critic.
        max_grad_norm (float): Global gradient-norm clip.
        iterations (int): Rollout/update rounds.
        episodes_per_iter (int): Episodes collected per round.
        hidden_sizes (tuple[int, ...]): Hidden layer widths of actor and critic.
    """
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    update_epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    iterations: int = 100
    episodes_per_iter: int = 4
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.clip_eps <= 0.0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}.")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must be in [0, 1].")
        if self.update_epochs < 1 or self.minibatch < 1 or self.episodes_per_iter < 1:
            raise ValueError("update_epochs, minibatch and episodes_per_iter must be at least 1.")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}.")
        if self.lr <= 0.0 or self.max_grad_norm <= 0.0:
            raise ValueError("lr and max_grad_norm must be positive.")


@dataclass(eq=False)
class RolloutBatch:
    """Flattened rollout data for one update."""
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.log_probs)

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory], gamma: float, lam: float) -> "RolloutBatch":
        advantages, returns = [], []
        for traj in trajectories:
            adv, ret = gae_advantages(traj, gamma, lam)
            advantages.append(adv)
            returns.append(ret)
        return cls(observations=np.vstack([np.vstack(t.observations) for t in trajectories]),
                   actions=np.vstack([np.vstack(t.actions) for t in trajectories]),
                   log_probs=np.concatenate([np.asarray(t.log_probs) for t in trajectories]),
                   advantages=np.concatenate(advantages),
                   returns=np.concatenate(returns))


@dataclass(eq=False)
class PPOUpdate:
    """Parameters after one :func:`ppo_update` and its averaged diagnostics."""
    actor: MlpParams
    critic: MlpParams
    actor_loss: float
    critic_loss: float
    clip_fraction: float
    approx_kl: float


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_episode_reward: float
    actor_loss: float
    critic_loss: float
    clip_fraction: float = 0.0
    approx_kl: float = 0.0


@dataclass(eq=False)
class PPOResult:
    actor: MlpParams
    critic: MlpParams
    history: list[IterationStats] = field(default_factory=list)
    standardizer: Optional[Standardizer] = None
    lookback: int = 1


###################################
# --- DIRICHLET ACTION POLICY --- #
###################################

def concentration(logits: np.ndarray) -> np.ndarray:
    """``softplus(logits) + 1``; every entry is at least 1."""
    return np.logaddexp(0.0, logits) + 1.0


def dirichlet_log_prob(alpha: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Log-density of ``action`` under ``Dirichlet(alpha)`` along the last axis."""
    alpha = np.asarray(alpha, dtype=float)
    action = np.asarray(action, dtype=float)
    return (gammaln(alpha.sum(axis=-1)) - gammaln(alpha).sum(axis=-1)
            + ((alpha - 1.0) * np.log(action)).sum(axis=-1))


def dirichlet_log_prob_grad(alpha: np.ndarray, action: np.ndarray) -> np.ndarray:
    """``∂ log p / ∂α_i = ψ(Σα) - ψ(α_i) + log a_i``."""
    alpha = np.asarray(alpha, dtype=float)
    return digamma(alpha.sum(axis=-1, keepdims=True)) - digamma(alpha) + np.log(action)


def dirichlet_sample(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one action strictly inside the simplex."""
    action = np.clip(rng.dirichlet(alpha), SAMPLE_FLOOR, None)
    return action / action.sum()


def dirichlet_mean(alpha: np.ndarray) -> np.ndarray:
    """Deterministic action used for evaluation."""
    alpha = np.asarray(alpha, dtype=float)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def policy_mean(actor: MlpParams, obs: np.ndarray) -> np.ndarray:
    """Mean portfolio weights of the actor at ``obs``."""
    logits, _ = forward_logits(actor, obs)
    return dirichlet_mean(concentration(logits))


def state_value(critic: MlpParams, obs: np.ndarray) -> Union[float, np.ndarray]:
    """Critic estimate for one observation (float) or a batch (vector)."""
    out, _ = forward_logits(critic, obs)
    return out[..., 0] if out.ndim == 2 else float(out[0])


##########################
# --- LOSS FUNCTIONS --- #
##########################

def clipped_surrogate(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray,
                      clip_eps: float) -> tuple[float, np.ndarray]:
    """
    ``mean(min(ρ·adv, clip(ρ, 1-ε, 1+ε)·adv))`` with ``ρ = exp(logp_new - logp_old)``.

    Returns:
        tuple[float, np.ndarray]: Surrogate value and its gradient with respect
        to ``logp_new`` (zero wherever the clipped branch is active).

    Raises:
        ValueError: If ``clip_eps`` is not positive or the batch is empty.
        NonFiniteError: If any ratio is NaN or infinite.
    """
    if clip_eps <= 0.0:
        raise ValueError(f"clip_eps must be positive, got {clip_eps}.")
    logp_new, logp_old, adv = (np.asarray(a, dtype=float) for a in (logp_new, logp_old, adv))
    if logp_new.size == 0:
        raise ValueError("Empty batch.")
    with np.errstate(over="ignore"):
        ratio = np.exp(logp_new - logp_old)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError("Non-finite probability ratio; the rollout batch is stale.")

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    value = float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    grad = np.where(active, unclipped, 0.0) / logp_new.size
    return value, grad


def mse(predicted: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``predicted``."""
    diff = np.asarray(predicted, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


########################
# --- PPO UPDATING --- #
########################

def _normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def ppo_update(actor: MlpParams, critic: MlpParams, batch: RolloutBatch, cfg: PPOConfig,
               actor_opt: Optional[Optimizer] = None, critic_opt: Optional[Optimizer] = None,
               rng: Optional[np.random.Generator] = None) -> PPOUpdate:
    """
    Run ``cfg.update_epochs`` passes of minibatch updates over ``batch``.

    The actor ascends the clipped surrogate of a Dirichlet policy whose
    concentration is ``softplus(logits) + 1``. The critic descends the MSE
    against the GAE return targets. Advantages are normalized per batch
    (a single sample is left as is) and each gradient is clipped to
    ``cfg.max_grad_norm``.

    Args:
        actor_opt, critic_opt (Optimizer, optional): Stateful optimizers kept
            across calls (default = fresh ``Adam(cfg.lr)``).
        rng (np.random.Generator, optional): Minibatch shuffling.

    Raises:
        ValueError: If ``batch`` is empty.
        NonFiniteError: If a probability ratio or loss is not finite.
    """
    if len(batch) == 0:
        raise ValueError("Cannot update on an empty batch.")
    actor_opt = actor_opt or Adam(cfg.lr)
    critic_opt = critic_opt or Adam(cfg.lr)
    rng = rng or np.random.default_rng(0)
    advantages = _normalize(batch.advantages)

    actor_losses, critic_losses, clip_fracs, kls = [], [], [], []
    for _ in range(cfg.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            obs, actions = batch.observations[idx], batch.actions[idx]

            logits, cache = forward_logits(actor, obs)
            alpha = concentration(logits)
            logp = dirichlet_log_prob(alpha, actions)
            objective, grad_logp = clipped_surrogate(logp, batch.log_probs[idx], advantages[idx], cfg.clip_eps)
            grad_logits = grad_logp[:, None] * dirichlet_log_prob_grad(alpha, actions) * expit(logits)
            actor_grads, _ = clip_grad_norm(backward_logits(actor, cache, grad_logits), cfg.max_grad_norm)
            actor = actor_opt.step(actor, actor_grads, ascend=True)

            values, vcache = forward_logits(critic, obs)
            loss, grad_v = mse(values[:, 0], batch.returns[idx])
            critic_grads, _ = clip_grad_norm(backward_logits(critic, vcache, grad_v[:, None]), cfg.max_grad_norm)
            critic = critic_opt.step(critic, critic_grads)

            log_ratio = logp - batch.log_probs[idx]
            ratio = np.exp(log_ratio)
            actor_losses.append(-objective)
            critic_losses.append(loss)
            clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)))
            kls.append(float(np.mean(ratio - 1.0 - log_ratio)))

    if not np.isfinite(actor_losses).all() or not np.isfinite(critic_losses).all():
        raise NonFiniteError("PPO losses became non-finite.")
    return PPOUpdate(actor=actor, critic=critic, actor_loss=float(np.mean(actor_losses)),
                     critic_loss=float(np.mean(critic_losses)), clip_fraction=float(np.mean(clip_fracs)),
                     approx_kl=float(np.mean(kls)))


####################
# --- ROLLOUTS --- #
####################

def collect_episode(env: PortfolioEnv, actor: MlpParams, critic: MlpParams,
                    rng: np.random.Generator) -> tuple[Trajectory, float]:
    """
    Roll out one episode with the stochastic policy.

    Only decision steps are recorded; rewards earned while holdings drift
    between decisions are credited to the preceding decision.

    Returns:
        tuple[Trajectory, float]: The trajectory and the episode's total reward.
    """
    obs, _ = env.reset()
    traj = Trajectory()
    total = 0.0
    while True:
        state = env.state
        if state.step % env.cfg.action_interval == 0:
            logits, _ = forward_logits(actor, obs)
            alpha = concentration(logits)
            action = dirichlet_sample(alpha, rng)
            traj.append(obs, action, 0.0, state_value(critic, obs), float(dirichlet_log_prob(alpha, action)))
        else:
            action = state.prev_weights
        obs, r, terminated, truncated, _ = env.step(action)
        traj.rewards[-1] += r
        total += r
        if terminated or truncated:
            traj.terminated = terminated
            traj.bootstrap_value = 0.0 if terminated else state_value(critic, obs)
            return traj, total


def greedy_rollout(actor: MlpParams, data: MarketSeries, env_cfg: EnvConfig,
                   start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Deterministic episode using the Dirichlet mean as the action.

    Returns:
        tuple[np.ndarray, np.ndarray]: Target weights per step ``[steps × N]``
        and rewards per step.
    """
    state = env_reset(data, env_cfg, start)
    weights, rewards = [], []
    done = False
    while not done:
        action = policy_mean(actor, observation(state, data))
        if state.step % env_cfg.action_interval != 0:
            action = state.prev_weights
        weights.append(action)
        state, r, done = env_step(state, action, data, env_cfg)
        rewards.append(r)
    return np.vstack(weights), np.asarray(rewards)


####################
# --- TRAINING --- #
####################

def train_ppo(data: ReturnMatrix, env_cfg: EnvConfig, ppo_cfg: PPOConfig, seed: int,
              hl: Optional[pd.DataFrame] = None, standardizer: Optional[Standardizer] = None) -> PPOResult:
    """
    Train a Dirichlet actor and a value critic with PPO on ``data``.

    Every round collects ``episodes_per_iter`` episodes from random start
    rows, computes GAE advantages and runs :func:`ppo_update`. All randomness
    (initialization, episode starts, action sampling, minibatch order) is
    derived from ``seed``.

    Args:
        data (ReturnMatrix): Training returns.
        env_cfg (EnvConfig): Environment settings.
        ppo_cfg (PPOConfig): PPO hyperparameters.
        seed (int): Top-level seed.
        hl (pd.DataFrame, optional): High/low ratios from ``market_data.hl_ratios``.
        standardizer (Standardizer, optional): Feature scaling (default = fitted on ``data``).

    Raises:
        ValueError: If ``data`` is shorter than ``lookback + episode_len``.
    """
    standardizer = standardizer or Standardizer().fit(data.values)
    series = MarketSeries.from_returns(data, standardizer, hl)
    env = PortfolioEnv(series, env_cfg, random_start=True)
    obs_dim = env.observation_space.shape[0]
    hidden = list(ppo_cfg.hidden_sizes)
    actor = init_params([obs_dim, *hidden, series.n_assets], derive_seed(seed, "ppo_actor"))
    critic = init_params([obs_dim, *hidden, 1], derive_seed(seed, "ppo_critic"))
    result = PPOResult(actor=actor, critic=critic, standardizer=standardizer, lookback=env_cfg.lookback)
    if ppo_cfg.iterations == 0:
        return result

    rng = np.random.default_rng(derive_seed(seed, "ppo_rollout"))
    env.reset(seed=derive_seed(seed, "ppo_env"))
    actor_opt, critic_opt = Adam(ppo_cfg.lr), Adam(ppo_cfg.lr)
    logger.info("Training PPO for %d iterations on %d rows x %d assets", ppo_cfg.iterations,
                len(series), series.n_assets)
    for it in range(ppo_cfg.iterations):
        trajectories, totals = [], []
        for _ in range(ppo_cfg.episodes_per_iter):
            traj, total = collect_episode(env, actor, critic, rng)
            trajectories.append(traj)
            totals.append(total)
        batch = RolloutBatch.from_trajectories(trajectories, ppo_cfg.gamma, ppo_cfg.lam)
        update = ppo_update(actor, critic, batch, ppo_cfg, actor_opt, critic_opt, rng)
        actor, critic = update.actor, update.critic
        stats = IterationStats(it, float(np.mean(totals)), update.actor_loss, update.critic_loss,
                               update.clip_fraction, update.approx_kl)
        result.history.append(stats)
        logger.debug("iter %d reward %.6f actor %.6f critic %.6f clip %.3f kl %.6f", it,
                     stats.mean_episode_reward, stats.actor_loss, stats.critic_loss,
                     stats.clip_fraction, stats.approx_kl)
        if (it + 1) % 10 == 0 or it + 1 == ppo_cfg.iterations:
            logger.info("PPO iteration %d/%d: mean episode reward %.6f", it + 1, ppo_cfg.iterations,
                        stats.mean_episode_reward)

    result.actor, result.critic = actor, critic
    return result


def validation_reward(actor: MlpParams, standardizer: Standardizer, train_returns: ReturnMatrix,
                      val_returns: ReturnMatrix, env_cfg: EnvConfig,
                      hl: Optional[pd.DataFrame] = None) -> float:
    """
    Total log-growth reward of a greedy rollout across the whole validation segment.

    The last ``lookback`` training rows fill the first observation window, so
    every validation row is traded once.

    Raises:
        ValueError: If the validation segment has fewer than two rows.
    """
    if len(val_returns) < 2:
        raise ValueError(f"Validation segment needs at least two rows, got {len(val_returns)}.")
    joined = ReturnMatrix(pd.concat([train_returns.returns.iloc[-env_cfg.lookback:], val_returns.returns]))
    series = MarketSeries.from_returns(joined, standardizer, hl)
    _, rewards = greedy_rollout(actor, series, replace(env_cfg, episode_len=len(val_returns)))
    return float(np.sum(rewards))


def tune_ppo_on_validation(train_returns: ReturnMatrix, val_returns: ReturnMatrix, env_cfg: EnvConfig,
                           base: PPOConfig = PPOConfig(), seed: int = 0,
                           hl: Optional[pd.DataFrame] = None,
                           lrs: Iterable[float] = (1e-4, 3e-4, 1e-3),
                           episodes_per_iter: Iterable[int] = (2, 4),
                           update_epochs: Iterable[int] = (4, 8),
                           search: Union[SearchKind, str] = SearchKind.GRID,
                           n_trials: Optional[int] = None) -> tuple[PPOConfig, PPOResult, dict]:
    """
    Search PPO's step size, rollout size and update epochs on the validation segment.

    Every candidate is trained with the same ``seed`` on ``train_returns`` and
    scored by :func:`validation_reward`.

    Returns:
        tuple: Best config, its training result, and
        ``{(lr, episodes_per_iter, update_epochs): score}`` for the candidates
        tried (None for candidates that failed).

    Raises:
        ValueError: If every candidate failed.
    """
    space = {"lr": list(lrs), "episodes_per_iter": list(episodes_per_iter),
             "update_epochs": list(update_epochs)}
    scores: dict = {}
    best = None
    for candidate in search_candidates(space, search, n_trials, derive_seed(seed, "ppo_search")):
        key = (candidate["lr"], candidate["episodes_per_iter"], candidate["update_epochs"])
        cfg = replace(base, **candidate)
        try:
            result = train_ppo(train_returns, env_cfg, cfg, seed, hl=hl)
            score = validation_reward(result.actor, result.standardizer, train_returns, val_returns,
                                      env_cfg, hl)
        except NonFiniteError as err:
            logger.warning("PPO candidate %s failed: %s", candidate, err)
            scores[key] = None
            continue
        scores[key] = score
        logger.info("PPO candidate %s: validation reward %.6f", candidate, score)
        if best is None or score > best[2]:
            best = (cfg, result, score)
    if best is None:
        raise ValueError("Every PPO candidate failed.")
    return best[0], best[1], scores


def write_history_tsv(history: list[IterationStats], path: Union[str, Path]) -> Path:
    """Write ``iter mean_episode_reward actor_loss critic_loss`` rows."""
    path = Path(path)
    frame = pd.DataFrame({"iter": [h.iteration for h in history],
                          "mean_episode_reward": [h.mean_episode_reward for h in history],
                          "actor_loss": [h.actor_loss for h in history],
                          "critic_loss": [h.critic_loss for h in history]})
    frame.to_csv(path, sep="\t", index=False)
    return path
