#!/usr/bin/env python3

import json
import logging

import numpy as np
import pandas as pd
import pytest

from dynamic_portfolio import backtest, market_data, policy_net, ppo, sharpe_trainer, utils
from dynamic_portfolio.backtest import BacktestReport, StrategyKind, StrategyRef
from dynamic_portfolio.checkpoint import CheckpointRecord
from dynamic_portfolio.market_data import PriceTable, ReturnMatrix
from dynamic_portfolio.rl_gym import EnvConfig


def _prices(closes, tickers=None, start="2021-01-04") -> PriceTable:
    closes = np.asarray(closes, dtype=float)
    if closes.ndim == 1:
        closes = closes[:, None]
    tickers = tickers or [f"T{i}" for i in range(closes.shape[1])]
    index = pd.bdate_range(start, periods=len(closes), name="Date")
    return PriceTable(close=pd.DataFrame(closes, index=index, columns=tickers))


def _random_prices(n_rows=60, n_assets=3, seed=0) -> PriceTable:
    rng = np.random.default_rng(seed)
    relatives = 1.0 + rng.normal(0.0005, 0.015, size=(n_rows - 1, n_assets))
    return _prices(100.0 * np.vstack([np.ones(n_assets), np.cumprod(relatives, axis=0)]))


# --- Strategies --- #

@pytest.mark.parametrize("value, expected", [
    ("drl_ppo", StrategyKind.DRL_PPO),
    ("buy_and_hold", StrategyKind.BUY_AND_HOLD),
    (StrategyKind.MEAN_VARIANCE, StrategyKind.MEAN_VARIANCE),
])
def test_strategy_kind_coerce(value, expected):
    assert StrategyKind.coerce(value) is expected


def test_strategy_kind_invalid_and_learned():
    with pytest.raises(ValueError):
        StrategyKind.coerce("momentum")
    assert StrategyKind.SHARPE_POLICY.learned
    assert not StrategyKind.EQUAL_WEIGHT.learned


@pytest.mark.parametrize("n_assets, expected", [
    (1, [1.0]),
    (4, [0.25, 0.25, 0.25, 0.25]),
])
def test_equal_weight_strategy(n_assets, expected):
    strategy = backtest.equal_weight_strategy(n_assets)
    np.testing.assert_allclose(strategy.weights, expected)
    assert strategy.label == "equal_weight"


def test_strategy_ref_validation():
    with pytest.raises(ValueError):
        StrategyRef(StrategyKind.EQUAL_WEIGHT, 0, weights=np.ones(2) / 2)
    with pytest.raises(ValueError):
        StrategyRef(StrategyKind.EQUAL_WEIGHT, 1)
    with pytest.raises(ValueError):
        StrategyRef(StrategyKind.EQUAL_WEIGHT, 1, weights=np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        StrategyRef(StrategyKind.SHARPE_POLICY, 1)


def test_mean_variance_strategy_near_corner():
    rng = np.random.default_rng(2)
    values = rng.normal(0.0, 0.002, size=(500, 3))
    values[:, 0] += 0.5 / 252
    values[:, 1:] += 0.01 / 252
    strategy = backtest.mean_variance_strategy(ReturnMatrix.from_array(values), n_samples=10_000, seed=0)
    assert strategy.weights[0] >= 0.8
    assert strategy.rebalance_interval == 21


def test_learned_strategy_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        backtest.sharpe_policy_strategy(tmp_path / "missing.ckpt")
    with pytest.raises(FileNotFoundError):
        backtest.ppo_strategy(tmp_path / "missing.ckpt")


def test_learned_strategy_needs_feature_scaling():
    record = CheckpointRecord(policy_net.init_params([4, 2], seed=0), lookback=2)
    with pytest.raises(ValueError):
        backtest.sharpe_policy_strategy(record)


# --- Simulation --- #

def test_equal_weight_homogeneous_growth():
    prices = _prices([[10.0, 20.0], [11.0, 22.0]])
    report = backtest.run_strategy(backtest.equal_weight_strategy(2), prices, mu_cost=0.0, initial_wealth=5.0)
    assert report.equity.iloc[-1] == pytest.approx(5.5, abs=1e-12)


def test_buy_and_hold_tracks_price_path():
    prices = _random_prices(seed=3)
    report = backtest.run_strategy(backtest.buy_and_hold_strategy(np.array([1.0, 0.0, 0.0])), prices, mu_cost=0.0)
    path = prices.close["T0"].to_numpy()
    np.testing.assert_allclose(report.equity.to_numpy(), path / path[0], rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_equal_weight_matches_product_oracle(seed):
    prices = _random_prices(n_rows=40, seed=seed)
    report = backtest.run_strategy(backtest.equal_weight_strategy(3), prices, mu_cost=0.0)
    closes = prices.close.to_numpy()
    expected = 1.0
    for t in range(1, len(closes)):
        expected *= 1.0 + np.mean(closes[t] / closes[t - 1] - 1.0)
    assert report.equity.iloc[-1] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_costs_never_increase_wealth(seed):
    rng = np.random.default_rng(seed)
    prices = _random_prices(n_rows=30, seed=seed)
    strategy = StrategyRef(StrategyKind.MEAN_VARIANCE, int(rng.integers(1, 6)), weights=rng.dirichlet(np.ones(3)))
    free = backtest.run_strategy(strategy, prices, mu_cost=0.0)
    costly = backtest.run_strategy(strategy, prices, mu_cost=0.001)
    assert costly.equity.iloc[-1] <= free.equity.iloc[-1]


def test_buy_and_hold_pays_cost_once():
    prices = _random_prices(seed=4)
    report = backtest.run_strategy(backtest.buy_and_hold_strategy(np.ones(3) / 3), prices,
                                   mu_cost=0.002, initial_wealth=10.0)
    assert report.cost_paid == pytest.approx(10.0 * 0.002)
    assert report.turnover == pytest.approx(1.0 / (len(prices) - 1))


def test_simulate_holds_between_rebalances():
    relatives = np.array([[2.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    _, targets, _, _ = backtest.simulate(lambda t, held: np.array([0.5, 0.5]), relatives, 2, 0.0)
    np.testing.assert_allclose(targets[1], [2 / 3, 1 / 3])
    np.testing.assert_allclose(targets[2], [0.5, 0.5])


def test_simulate_ruin():
    with pytest.raises(utils.RuinError):
        backtest.simulate(lambda t, held: np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), 1, 0.0)


def test_run_strategy_segment_too_short():
    with pytest.raises(ValueError):
        backtest.run_strategy(backtest.mean_variance_strategy(ReturnMatrix.from_array(
            np.random.default_rng(0).normal(0.0, 0.01, size=(30, 3))), n_samples=10), _random_prices(n_rows=10))


def test_run_strategy_rejects_cost_out_of_range():
    with pytest.raises(ValueError, match="mu_cost"):
        backtest.run_strategy(backtest.equal_weight_strategy(3), _random_prices(), mu_cost=0.5)


# --- Learned Strategies --- #

def _split_prices():
    prices = _random_prices(n_rows=120, n_assets=2, seed=9)
    return prices.rows(0, 80), prices.rows(80)


def test_sharpe_policy_uses_warmup_window():
    warmup, segment = _split_prices()
    train_returns = market_data.to_returns(warmup)
    cfg = sharpe_trainer.SharpeTrainConfig(epochs=3, lookback=4, hidden_sizes=(4,))
    result = sharpe_trainer.train(train_returns, cfg, seed=0)
    record = CheckpointRecord(result.params, "sharpe_policy", result.lookback, result.standardizer)

    report = backtest.run_strategy(backtest.sharpe_policy_strategy(record), segment, mu_cost=0.0, warmup=warmup)
    full_returns = market_data.to_returns(market_data.PriceTable(close=pd.concat([warmup.close, segment.close])))
    offset = len(warmup)
    window = result.standardizer.transform(full_returns.values[offset - 4:offset]).ravel()
    expected, _ = policy_net.forward(result.params, window)
    np.testing.assert_allclose(report.weights[0], expected, atol=1e-12)
    assert utils.is_simplex(report.weights)


def test_sharpe_policy_without_warmup_holds_equal_weights():
    warmup, segment = _split_prices()
    result = sharpe_trainer.train(market_data.to_returns(warmup),
                                  sharpe_trainer.SharpeTrainConfig(epochs=1, lookback=4, hidden_sizes=(4,)))
    record = CheckpointRecord(result.params, "sharpe_policy", result.lookback, result.standardizer)
    report = backtest.run_strategy(backtest.sharpe_policy_strategy(record), segment, mu_cost=0.0)
    np.testing.assert_allclose(report.weights[:4], 0.5)


def test_ppo_strategy_runs_with_warmup():
    warmup, segment = _split_prices()
    env_cfg = EnvConfig(lookback=3, episode_len=10, action_interval=1)
    result = ppo.train_ppo(market_data.to_returns(warmup), env_cfg,
                           ppo.PPOConfig(iterations=1, episodes_per_iter=1, hidden_sizes=(4,)), seed=0)
    record = CheckpointRecord(result.actor, "ppo_actor", result.lookback, result.standardizer)
    report = backtest.run_strategy(backtest.ppo_strategy(record, rebalance_interval=5), segment, warmup=warmup)
    assert utils.is_simplex(report.weights)
    assert np.all(report.equity > 0.0)


# --- Metrics --- #

def test_metrics_constant_growth():
    equity = 1.001 ** np.arange(253)
    m = backtest.compute_metrics(equity, periods_per_year=252)
    assert m.ann_return == pytest.approx(1.001 ** 252 - 1.0, abs=1e-9)
    assert m.ann_return == pytest.approx(0.28679, abs=1e-5)
    assert m.sharpe is None
    assert m.winning_days == 1.0


def test_metrics_zero_volatility_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="dynamic_portfolio.backtest"):
        backtest.compute_metrics(np.ones(5))
    assert "Sharpe ratio is undefined" in caplog.text


def test_metrics_max_drawdown_example():
    assert backtest.compute_metrics([1.0, 1.1, 0.99, 1.2]).max_drawdown == pytest.approx(0.1)


def test_metrics_non_decreasing_has_no_drawdown():
    assert backtest.compute_metrics([1.0, 1.0, 1.2, 1.5, 1.5]).max_drawdown == 0.0


def test_metrics_info_ratio_undefined_against_itself():
    equity = _random_prices(n_assets=1).close["T0"].to_numpy()
    assert backtest.compute_metrics(equity, equity).info_ratio is None


@pytest.mark.parametrize("bad", [[1.0], [1.0, 0.0], [1.0, np.nan]])
def test_metrics_errors(bad):
    with pytest.raises(ValueError):
        backtest.compute_metrics(np.array(bad))


def test_metrics_benchmark_misaligned():
    with pytest.raises(ValueError):
        backtest.compute_metrics(np.ones(4), np.ones(3))


@pytest.mark.parametrize("seed", range(25))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    equity = list(np.cumprod(1.0 + rng.normal(0.0005, 0.02, size=100)))
    bench = list(np.cumprod(1.0 + rng.normal(0.0003, 0.01, size=100)))
    m = backtest.compute_metrics(np.array(equity), np.array(bench), periods_per_year=252)

    q = [equity[t] / equity[t - 1] - 1.0 for t in range(1, 100)]
    qb = [bench[t] / bench[t - 1] - 1.0 for t in range(1, 100)]
    n = len(q)
    mean_q = sum(q) / n
    vol = (sum((x - mean_q) ** 2 for x in q) / (n - 1)) ** 0.5 * 252 ** 0.5
    ann = (equity[-1] / equity[0]) ** (252 / n) - 1.0
    mdd, peak = 0.0, equity[0]
    for e in equity:
        peak = max(peak, e)
        mdd = max(mdd, 1.0 - e / peak)
    active = [a - b for a, b in zip(q, qb)]
    mean_a = sum(active) / n
    te = (sum((x - mean_a) ** 2 for x in active) / (n - 1)) ** 0.5

    assert m.ann_return == pytest.approx(ann, abs=1e-12)
    assert m.ann_vol == pytest.approx(vol, abs=1e-12)
    assert m.sharpe == pytest.approx(ann / vol, rel=1e-10)
    assert m.max_drawdown == pytest.approx(mdd, abs=1e-12)
    assert m.winning_days == pytest.approx(sum(x > 0 for x in q) / n)
    assert m.info_ratio == pytest.approx(mean_a / te * 252 ** 0.5, rel=1e-10)
    assert 0.0 <= m.max_drawdown < 1.0


# --- Reporting --- #

def _report(name="equal_weight", seed=0) -> BacktestReport:
    return backtest.run_strategy(StrategyRef(StrategyKind.EQUAL_WEIGHT, 1, weights=np.ones(3) / 3, name=name),
                                 _random_prices(seed=seed))


def test_report_json_schema(tmp_path):
    report = _report()
    data = json.loads(report.write_json(tmp_path / "r.json").read_text())
    assert set(data) == {"strategy", "period", "metrics", "equity"}
    assert set(data["metrics"]) == {"ann_return", "ann_vol", "sharpe", "max_drawdown", "info_ratio",
                                    "winning_days", "turnover", "cost_paid"}
    assert data["period"]["start"] == "2021-01-04"
    assert len(data["equity"]) == 60


def test_report_from_dict_restores_metrics():
    report = _report(seed=1)
    restored = BacktestReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert restored.metrics == report.metrics
    np.testing.assert_allclose(restored.equity.to_numpy(), report.equity.to_numpy())


def test_write_equity_tsv(tmp_path):
    frame = pd.read_csv(_report().write_equity_tsv(tmp_path / "eq.tsv"), sep="\t")
    assert list(frame.columns) == ["date", "wealth"]
    assert frame["wealth"].iloc[0] == 1.0


def test_compare_report_single(tmp_path):
    table = backtest.compare_report([_report()], out_dir=tmp_path)
    assert list(table.columns) == ["equal_weight"]
    assert "max_drawdown" in table.index
    assert table.index.name == "metric"
    assert (tmp_path / "comparison.tsv").is_file()
    assert set(json.loads((tmp_path / "comparison.json").read_text())) == {"equal_weight"}


def test_compare_report_identical_columns():
    table = backtest.compare_report([_report(), _report()])
    assert list(table.columns) == ["equal_weight", "equal_weight_"]
    pd.testing.assert_series_equal(table["equal_weight"], table["equal_weight_"], check_names=False)


def test_compare_report_empty():
    with pytest.raises(ValueError):
        backtest.compare_report([])


def test_run_all_shares_benchmark():
    prices = _random_prices(seed=6)
    strategies = [backtest.equal_weight_strategy(3), backtest.equal_weight_strategy(3, rebalance_interval=5),
                  backtest.buy_and_hold_strategy(np.array([0.0, 1.0, 0.0]))]
    reports = backtest.run_all(strategies, prices, mu_cost=0.0)
    assert list(reports) == ["equal_weight", "equal_weight_", "buy_and_hold"]
    assert reports["equal_weight"].metrics.info_ratio is None
    assert reports["buy_and_hold"].metrics.info_ratio is not None
