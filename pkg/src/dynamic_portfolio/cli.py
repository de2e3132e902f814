#!/usr/bin/env python3

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Optional

from dynamic_portfolio import analytics, backtest, market_data, ppo, sharpe_trainer
from dynamic_portfolio.checkpoint import save_params
from dynamic_portfolio.config import RunConfig, echo_config, parse_scalar, validate_config
from dynamic_portfolio.market_data import PriceTable, ReturnMatrix
from dynamic_portfolio.utils import derive_seed, uniform_weights

logger = logging.getLogger(__name__)

SELECTED_FILE = "selected.json"
SHARPE_CHECKPOINT = "sharpe_policy.ckpt"
PPO_ACTOR_CHECKPOINT = "ppo_actor.ckpt"
PPO_CRITIC_CHECKPOINT = "ppo_critic.ckpt"

# flags with a dedicated spelling
_SHORTHAND_FIELDS = {"seed", "out_dir"}
# comma-separated symbol lists, never YAML-typed
_RAW_FIELDS = {"tickers", "strategies"}


class MissingArtifactError(FileNotFoundError):
    """An upstream command has not produced the file this command needs."""


#######################
# --- DATA LOADING --- #
#######################

def _universe(cfg: RunConfig) -> list[str]:
    if cfg.universe == "all":
        return list(cfg.tickers)
    path = cfg.out_path / SELECTED_FILE
    if not path.is_file():
        raise MissingArtifactError(f"missing upstream artifact {path}: run 'select' first")
    return json.loads(path.read_text())["tickers"]


def _load(cfg: RunConfig, tickers: Optional[list[str]] = None) -> tuple[PriceTable, ReturnMatrix]:
    tickers = tickers if tickers is not None else _universe(cfg)
    prices = market_data.clean(market_data.load_prices(cfg.data_path, tickers))
    return prices, market_data.to_returns(prices)


def _write_tsv(frame, path: Path) -> Path:
    frame.to_csv(path, sep="\t", date_format="%Y-%m-%d")
    return path


####################
# --- COMMANDS --- #
####################

def cmd_ingest(cfg: RunConfig) -> list[Path]:
    """Clean prices, returns, rolling statistics and the seasonally adjusted returns."""
    prices, returns = _load(cfg, list(cfg.tickers))
    out = cfg.out_path
    means, stds = market_data.rolling_stats(returns, cfg.rolling_window)
    adjusted = market_data.seasonal_adjust(returns, cfg.seasonal_period)
    train, val, test = market_data.chrono_split(returns, cfg.split_spec())
    logger.info("Split %d return rows into train %d, validation %d, test %d",
                len(returns), len(train), len(val), len(test))
    return [_write_tsv(prices.close, out / "prices_clean.tsv"),
            _write_tsv(returns.returns, out / "returns.tsv"),
            _write_tsv(means, out / "rolling_mean.tsv"),
            _write_tsv(stds, out / "rolling_std.tsv"),
            _write_tsv(adjusted.returns, out / "returns_seasonal_adjusted.tsv")]


def cmd_frontier(cfg: RunConfig) -> list[Path]:
    """Sampled efficient frontier of the training segment."""
    _, returns = _load(cfg)
    train, _, _ = market_data.chrono_split(returns, cfg.split_spec())
    mu = analytics.expected_returns(train, cfg.periods_per_year)
    cov = analytics.covariance(train, cfg.periods_per_year)
    points = analytics.sample_frontier(mu, cov, cfg.n_samples, derive_seed(cfg.seed, "frontier"))
    best, safest = analytics.max_sharpe(points), analytics.min_variance(points)
    summary = {"max_sharpe": best.to_dict(train.tickers), "min_variance": safest.to_dict(train.tickers),
               "n_efficient": len(analytics.efficient_points(points))}
    out = cfg.out_path
    (out / "frontier_summary.json").write_text(json.dumps(summary, indent=2))
    return [analytics.write_frontier_tsv(points, train.tickers, out / "frontier.tsv"),
            _write_tsv(cov.to_frame(), out / "covariance.tsv"),
            _write_tsv(analytics.correlation(cov), out / "correlation.tsv"),
            out / "frontier_summary.json"]


def cmd_select(cfg: RunConfig) -> list[Path]:
    """Best k-asset subset over every configured ticker."""
    _, returns = _load(cfg, list(cfg.tickers))
    train, _, _ = market_data.chrono_split(returns, cfg.split_spec())
    selection = analytics.select_best_subset(train, cfg.k, cfg.n_samples, derive_seed(cfg.seed, "select"),
                                             cfg.periods_per_year)
    path = cfg.out_path / SELECTED_FILE
    path.write_text(json.dumps({"tickers": list(selection.tickers), "n_examined": selection.n_examined,
                                **selection.point.to_dict(list(selection.tickers))}, indent=2))
    return [path]


def cmd_allocate(cfg: RunConfig) -> list[Path]:
    """Whole-share allocation of the max-Sharpe portfolio at the latest prices."""
    if cfg.budget is None:
        raise ValueError("budget: required by the allocate command")
    prices, returns = _load(cfg)
    train, _, _ = market_data.chrono_split(returns, cfg.split_spec())
    mu = analytics.expected_returns(train, cfg.periods_per_year)
    cov = analytics.covariance(train, cfg.periods_per_year)
    best = analytics.max_sharpe(analytics.sample_frontier(mu, cov, cfg.n_samples,
                                                          derive_seed(cfg.seed, "frontier")))
    plan = analytics.discrete_allocation(best.weights, prices.latest_close(), cfg.budget, prices.tickers)
    path = cfg.out_path / "allocation.json"
    path.write_text(json.dumps(plan.to_dict(), indent=2))
    return [path]


def cmd_train_sharpe(cfg: RunConfig) -> list[Path]:
    """Sharpe-ascent policy on the training segment, optionally tuned on validation."""
    _, returns = _load(cfg)
    train, val, _ = market_data.chrono_split(returns, cfg.split_spec())
    seed = derive_seed(cfg.seed, "sharpe_policy")
    if cfg.tune:
        scfg, result, _ = sharpe_trainer.tune_on_validation(train, val, cfg.sharpe_config(), seed=seed,
                                                            search=cfg.search, n_trials=cfg.n_trials)
    else:
        scfg = cfg.sharpe_config()
        result = sharpe_trainer.train(train, scfg, seed)
        _, _, score = sharpe_trainer.evaluate_policy(result.params, val, result.standardizer,
                                                     result.lookback, scfg.eps_vol, warmup=train)
        logger.info("Validation L_T = %.4f", score)
    out = cfg.out_path
    return [save_params(out / SHARPE_CHECKPOINT, result.params, "sharpe_policy", result.lookback,
                        result.standardizer),
            sharpe_trainer.write_history_tsv(result.history, out / "sharpe_history.tsv")]


def cmd_train_ppo(cfg: RunConfig) -> list[Path]:
    """PPO actor and critic on the training segment, optionally tuned on validation."""
    prices, returns = _load(cfg)
    train, val, _ = market_data.chrono_split(returns, cfg.split_spec())
    hl = market_data.hl_ratios(prices)
    seed = derive_seed(cfg.seed, "ppo")
    if cfg.tune:
        pcfg, result, _ = ppo.tune_ppo_on_validation(train, val, cfg.env_config(), cfg.ppo_config(), seed, hl,
                                                     search=cfg.search, n_trials=cfg.n_trials)
        logger.info("Selected PPO lr=%g episodes_per_iter=%d update_epochs=%d", pcfg.lr,
                    pcfg.episodes_per_iter, pcfg.update_epochs)
    else:
        result = ppo.train_ppo(train, cfg.env_config(), cfg.ppo_config(), seed, hl=hl)
        score = ppo.validation_reward(result.actor, result.standardizer, train, val, cfg.env_config(), hl)
        logger.info("Validation reward = %.4f", score)
    out = cfg.out_path
    return [save_params(out / PPO_ACTOR_CHECKPOINT, result.actor, "ppo_actor", result.lookback,
                        result.standardizer),
            save_params(out / PPO_CRITIC_CHECKPOINT, result.critic, "ppo_critic", result.lookback,
                        result.standardizer),
            ppo.write_history_tsv(result.history, out / "ppo_history.tsv")]


def _strategy(kind: backtest.StrategyKind, cfg: RunConfig, train: ReturnMatrix) -> backtest.StrategyRef:
    out = cfg.out_path
    if kind is backtest.StrategyKind.EQUAL_WEIGHT:
        return backtest.equal_weight_strategy(train.n_assets, cfg.rebalance_interval)
    if kind is backtest.StrategyKind.MEAN_VARIANCE:
        return backtest.mean_variance_strategy(train, cfg.n_samples, derive_seed(cfg.seed, "frontier"),
                                               cfg.periods_per_year, cfg.rebalance_interval)
    if kind is backtest.StrategyKind.BUY_AND_HOLD:
        return backtest.buy_and_hold_strategy(uniform_weights(train.n_assets))
    name, build = {
        backtest.StrategyKind.SHARPE_POLICY: (SHARPE_CHECKPOINT, backtest.sharpe_policy_strategy),
        backtest.StrategyKind.DRL_PPO: (PPO_ACTOR_CHECKPOINT, backtest.ppo_strategy),
    }[kind]
    path = out / name
    if not path.is_file():
        command = "train-sharpe" if kind is backtest.StrategyKind.SHARPE_POLICY else "train-ppo"
        raise MissingArtifactError(f"missing upstream artifact {path}: run '{command}' first")
    return build(path, cfg.rebalance_interval)


def cmd_backtest(cfg: RunConfig) -> list[Path]:
    """Walk-forward test-segment backtest of every configured strategy."""
    prices, returns = _load(cfg)
    train, val, test = market_data.chrono_split(returns, cfg.split_spec())
    first = len(train) + len(val)
    strategies = [_strategy(backtest.StrategyKind.coerce(k), cfg, train) for k in cfg.strategies]
    reports = backtest.run_all(strategies, prices.rows(first), cfg.mu_cost, cfg.initial_wealth,
                               cfg.periods_per_year, warmup=prices.rows(0, first))
    out = cfg.out_path
    written = []
    for name, report in reports.items():
        written.append(report.write_json(out / f"backtest_{name}.json"))
        written.append(report.write_equity_tsv(out / f"equity_{name}.tsv"))
    backtest.compare_report(reports, out)
    return written + [out / "comparison.tsv", out / "comparison.json"]


def cmd_report(cfg: RunConfig) -> list[Path]:
    """Comparison table rebuilt from the backtest report files."""
    out = cfg.out_path
    files = sorted(out.glob("backtest_*.json"))
    if not files:
        raise MissingArtifactError(f"missing upstream artifact: no backtest reports in {out}; run 'backtest' first")
    reports = {}
    for path in files:
        report = backtest.BacktestReport.from_dict(json.loads(path.read_text()))
        reports[path.stem.removeprefix("backtest_")] = report
    table = backtest.compare_report(reports, out)
    logger.info("Comparison of %d strategies:\n%s", len(reports), table.to_string())
    return [out / "comparison.tsv", out / "comparison.json"]


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "ingest": cmd_ingest,
    "frontier": cmd_frontier,
    "select": cmd_select,
    "allocate": cmd_allocate,
    "train-sharpe": cmd_train_sharpe,
    "train-ppo": cmd_train_ppo,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


####################
# --- DISPATCH --- #
####################

def dispatch(command: str, cfg: RunConfig) -> int:
    """
    Run one pipeline command and write its artifacts under ``cfg.out_dir``.

    Returns:
        int: 0 when every artifact was written, 1 on failure, 2 for an unknown command.
    """
    handler = COMMANDS.get(command)
    if handler is None:
        logger.error("Unknown command %r; expected one of %s", command, ", ".join(COMMANDS))
        return 2
    try:
        echo_config(cfg)
        written = handler(cfg)
    except (ValueError, OSError) as err:
        logger.error("%s failed: %s", command, err)
        return 1
    missing = [p for p in written if not Path(p).is_file()]
    if missing:
        logger.error("%s did not write %s", command, ", ".join(map(str, missing)))
        return 1
    logger.info("%s wrote %d artifacts to %s", command, len(written), cfg.out_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynport", description="Risk-aware dynamic portfolio allocation.")
    parser.add_argument("command", choices=list(COMMANDS), help="Pipeline step to run.")
    parser.add_argument("--config", type=Path, default=None, help="Flat YAML configuration file.")
    parser.add_argument("--seed", type=int, default=None, help="Top-level random seed.")
    parser.add_argument("--out", dest="out_dir", default=None, help="Output directory.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging verbosity.")
    overrides = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        if f.name in _SHORTHAND_FIELDS:
            continue
        kind = str if f.name in _RAW_FIELDS else parse_scalar
        overrides.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                               metavar="VALUE")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    options = vars(args)
    overrides = {f.name: options.get(f.name) for f in fields(RunConfig)}
    try:
        cfg = validate_config(args.config, overrides)
    except (ValueError, FileNotFoundError) as err:
        logger.error("Invalid configuration: %s", err)
        return 1
    return dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
