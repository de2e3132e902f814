#!/usr/bin/env python3

import logging
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from dynamic_portfolio.backtest import StrategyKind
from dynamic_portfolio.market_data import SplitSpec
from dynamic_portfolio.ppo import PPOConfig
from dynamic_portfolio.rl_gym import EnvConfig
from dynamic_portfolio.sharpe_trainer import SharpeTrainConfig
from dynamic_portfolio.tuning import SearchKind

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.yaml"
REQUIRED_KEYS = ("data_path", "tickers")
UNIVERSES = ("all", "selected")


@dataclass(frozen=True)
class RunConfig:
    """
    Every setting of a pipeline run, validated on construction.

    Only ``data_path`` and ``tickers`` are required; ``budget`` is needed by
    the ``allocate`` command alone. ``universe`` chooses whether downstream
    commands use every ticker or the subset written by ``select``. With
    ``tune`` set, both trainers search their hyperparameters on the
    validation segment (``search`` is ``grid`` or ``random`` with ``n_trials`` draws).
    """
    data_path: str
    tickers: tuple[str, ...]
    out_dir: str = "out"
    seed: int = 0
    # data
    train_frac: float = 0.7
    val_frac: float = 0.15
    periods_per_year: int = 252
    rolling_window: int = 21
    seasonal_period: int = 21
    # analytics
    n_samples: int = 10_000
    k: int = 5
    universe: str = "all"
    budget: Optional[float] = None
    # environment and costs
    mu_cost: float = 0.001
    initial_wealth: float = 1.0
    lookback: int = 20
    episode_len: int = 63
    action_interval: int = 21
    # Sharpe trainer
    alpha: float = 0.5
    epochs: int = 200
    horizon: Optional[int] = None
    hidden_sizes: tuple[int, ...] = (64, 64)
    optimizer: str = "sgd"
    l1: float = 0.0
    l2: float = 0.0
    tune: bool = False
    search: str = "grid"
    n_trials: int = 8
    # PPO
    ppo_iterations: int = 100
    episodes_per_iter: int = 4
    ppo_lr: float = 3e-4
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    update_epochs: int = 4
    minibatch: int = 64
    # backtest
    strategies: tuple[str, ...] = ("equal_weight", "mean_variance", "buy_and_hold", "sharpe_policy", "drl_ppo")
    rebalance_interval: int = 21

    def __post_init__(self):
        object.__setattr__(self, "tickers", _as_tuple(self.tickers, str))
        object.__setattr__(self, "hidden_sizes", _as_tuple(self.hidden_sizes, int))
        object.__setattr__(self, "strategies", _as_tuple(self.strategies, str))
        if not self.tickers:
            raise ValueError("tickers: no tickers requested")
        if len(set(self.tickers)) != len(self.tickers):
            raise ValueError(f"tickers: duplicate symbols in {list(self.tickers)}")
        if not Path(self.data_path).is_file():
            raise ValueError(f"data_path: file not found: {self.data_path}")
        if self.periods_per_year < 1:
            raise ValueError(f"periods_per_year must be positive, got {self.periods_per_year}")
        if self.rolling_window < 2:
            raise ValueError(f"rolling_window must be at least 2, got {self.rolling_window}")
        if self.seasonal_period < 2:
            raise ValueError(f"seasonal_period must be at least 2, got {self.seasonal_period}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        if not 1 <= self.k <= len(self.tickers):
            raise ValueError(f"k must be in [1, {len(self.tickers)}], got {self.k}")
        if self.universe not in UNIVERSES:
            raise ValueError(f"universe must be one of {UNIVERSES}, got {self.universe!r}")
        if self.budget is not None and self.budget <= 0.0:
            raise ValueError(f"budget must be positive, got {self.budget}")
        if self.rebalance_interval < 1:
            raise ValueError(f"rebalance_interval must be at least 1, got {self.rebalance_interval}")
        for name in self.strategies:
            StrategyKind.coerce(name)
        if not isinstance(self.tune, bool):
            raise ValueError(f"tune must be true or false, got {self.tune!r}")
        SearchKind.coerce(self.search)
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be positive, got {self.n_trials}")
        # the owning modules check their own ranges
        self.split_spec()
        self.env_config()
        self.sharpe_config()
        self.ppo_config()

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac)

    def env_config(self) -> EnvConfig:
        return EnvConfig(mu_cost=self.mu_cost, lookback=self.lookback, episode_len=self.episode_len,
                         initial_wealth=self.initial_wealth, action_interval=self.action_interval)

    def sharpe_config(self) -> SharpeTrainConfig:
        return SharpeTrainConfig(alpha=self.alpha, epochs=self.epochs, horizon=self.horizon,
                                 lookback=self.lookback, hidden_sizes=self.hidden_sizes,
                                 optimizer=self.optimizer, l1=self.l1, l2=self.l2)

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(clip_eps=self.clip_eps, gamma=self.gamma, lam=self.lam,
                         update_epochs=self.update_epochs, minibatch=self.minibatch, lr=self.ppo_lr,
                         iterations=self.ppo_iterations, episodes_per_iter=self.episodes_per_iter,
                         hidden_sizes=self.hidden_sizes)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _as_tuple(value, kind: type) -> tuple:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    return tuple(kind(v) for v in value)


def config_keys() -> list[str]:
    """Every accepted configuration key, in declaration order."""
    return [f.name for f in fields(RunConfig)]


class _ConfigLoader(yaml.SafeLoader):
    """Safe loader resolving only ``true``/``false`` as booleans, so symbols like ``ON`` stay strings."""


_ConfigLoader.yaml_implicit_resolvers = {
    first: [(tag, regexp) for tag, regexp in resolvers if tag != "tag:yaml.org,2002:bool"]
    for first, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_ConfigLoader.add_implicit_resolver("tag:yaml.org,2002:bool",
                                    re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF"))


def parse_scalar(text: str) -> Any:
    """
    Parse one command-line override value as YAML.

    Example:
        >>> parse_scalar("[8, 4]"), parse_scalar("true"), parse_scalar("ON")
        ([8, 4], True, 'ON')
    """
    return yaml.load(text, Loader=_ConfigLoader)


def _read_mapping(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    raw = yaml.load(path.read_text(), Loader=_ConfigLoader)
    if raw is None:
        return {}
    if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
        raise ValueError(f"Config {path} must be a flat key-value mapping.")
    return raw


def validate_config(source: Union[str, Path, Mapping[str, Any], None] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build a :class:`RunConfig` from a YAML file or mapping plus overrides.

    Args:
        source: Path to a flat YAML mapping, or the mapping itself.
        overrides: Values taking precedence over ``source`` (None entries ignored).

    Raises:
        FileNotFoundError: If ``source`` is a path that does not exist.
        ValueError: On an unknown key, a missing required key, or an
            out-of-range value. The message names the field.

    Example:
        >>> validate_config({"data_path": "prices.csv", "tickers": "AAPL,MSFT"}).k
        5
    """
    if source is None:
        raw = {}
    elif isinstance(source, Mapping):
        raw = dict(source)
    else:
        raw = _read_mapping(source)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    known = set(config_keys())
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown config key: {key}")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ValueError(f"missing required key: {key}")
    try:
        return RunConfig(**raw)
    except TypeError as err:
        raise ValueError(f"invalid config value: {err}") from err


def echo_config(cfg: RunConfig, out_dir: Union[str, Path, None] = None) -> Path:
    """Write the fully resolved configuration to ``<out_dir>/resolved_config.yaml``."""
    out_dir = Path(out_dir) if out_dir is not None else cfg.out_path
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    logger.debug("Resolved config written to %s", path)
    return path
