#!/usr/bin/env python3

import numpy as np
import pandas as pd
import pytest

from dynamic_portfolio import policy_net, sharpe_trainer, utils
from dynamic_portfolio.market_data import ReturnMatrix, Standardizer
from dynamic_portfolio.optim import OptimizerKind
from dynamic_portfolio.sharpe_trainer import SharpeTrainConfig


def _dominant_market(n_rows=500, seed=0) -> ReturnMatrix:
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 0.01, size=(n_rows, 2))
    values[:, 0] += 0.002
    return ReturnMatrix.from_array(values, ["WIN", "FLAT"])


def _loss(X, r):
    def loss(p):
        w, _ = policy_net.forward(p, X)
        return sharpe_trainer.sharpe_objective(sharpe_trainer.realized_returns(w, r))
    return loss


# --- Objective --- #

@pytest.mark.parametrize("R, expected", [
    ([0.01, 0.03], 2.0),
    ([0.02, -0.02], 0.0),
])
def test_sharpe_objective_examples(R, expected):
    assert sharpe_trainer.sharpe_objective(np.array(R)) == pytest.approx(expected, abs=1e-12)


def test_sharpe_objective_constant_returns():
    with pytest.raises(utils.ZeroVolatilityError):
        sharpe_trainer.sharpe_objective(np.full(5, 0.01))


def test_sharpe_objective_needs_two_returns():
    with pytest.raises(ValueError):
        sharpe_trainer.sharpe_objective(np.array([0.01]))


def test_realized_returns_example():
    R = sharpe_trainer.realized_returns(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.1, 0.0], [0.0, 0.2]]))
    np.testing.assert_allclose(R, [0.1, 0.2])
    with pytest.raises(ValueError):
        sharpe_trainer.realized_returns(np.ones((2, 2)) / 2, np.ones((3, 2)))


# --- Gradient W.R.T. Returns --- #

def test_sharpe_grad_hand_example():
    grad = sharpe_trainer.sharpe_grad_wrt_returns(np.array([0.01, 0.03]))
    np.testing.assert_allclose(grad, [150.0, -50.0], rtol=0.0, atol=1e-9)


def test_sharpe_grad_symmetric_series():
    grad = sharpe_trainer.sharpe_grad_wrt_returns(np.array([0.02, -0.02]))
    assert grad[0] == pytest.approx(grad[1])


@pytest.mark.parametrize("seed", range(100))
def test_sharpe_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    R = rng.normal(0.001, 0.02, size=int(rng.integers(2, 40)))
    analytic = sharpe_trainer.sharpe_grad_wrt_returns(R)
    h = 1e-7
    numeric = np.empty_like(R)
    for t in range(R.size):
        up, down = R.copy(), R.copy()
        up[t] += h
        down[t] -= h
        numeric[t] = (sharpe_trainer.sharpe_objective(up) - sharpe_trainer.sharpe_objective(down)) / (2 * h)
    assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(analytic)


# --- Ascent Step --- #

def test_grad_ascent_step_arithmetic():
    params = policy_net.MlpParams([(np.array([[1.0]]), np.array([0.0]))])
    grads = policy_net.MlpParams([(np.array([[2.0]]), np.array([0.0]))])
    np.testing.assert_allclose(sharpe_trainer.grad_ascent_step(params, grads, 0.1).layers[0][0], [[1.2]])
    same = sharpe_trainer.grad_ascent_step(params, grads.zeros_like(), 0.1)
    np.testing.assert_array_equal(same.flat(), params.flat())
    with pytest.raises(ValueError):
        sharpe_trainer.grad_ascent_step(params, grads, 0.0)


# --- Features --- #

def test_build_features_window_layout():
    values = np.arange(12, dtype=float).reshape(6, 2)
    X = sharpe_trainer.build_features(values, lookback=2)
    assert X.shape == (4, 4)
    np.testing.assert_array_equal(X[0], [0, 1, 2, 3])
    np.testing.assert_array_equal(X[-1], [6, 7, 8, 9])


def test_build_features_horizon_too_long():
    with pytest.raises(ValueError):
        sharpe_trainer.build_features(np.zeros((6, 2)), lookback=2, horizon=5)


# --- End-To-End Gradient --- #

@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    lookback = 2
    values = rng.normal(0.05, 1.0, size=(30 + lookback, 4))
    X = sharpe_trainer.build_features(values, lookback)
    r = values[lookback:]
    params = policy_net.init_params([X.shape[1], 8, 4], seed=seed)

    _, analytic, weights = sharpe_trainer.sharpe_loss_and_grad(params, X, r)
    numeric = policy_net.finite_diff_grad(params, _loss(X, r), h=1e-5)
    diff = np.max(np.abs(analytic.flat() - numeric.flat()))
    assert diff <= 1e-4 * max(np.max(np.abs(numeric.flat())), 1e-12)
    assert utils.is_simplex(weights)


def test_regularized_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    values = rng.normal(0.05, 1.0, size=(22, 3))
    X = sharpe_trainer.build_features(values, 2)
    r = values[2:]
    params = policy_net.init_params([X.shape[1], 5, 3], seed=3)

    def loss(p):
        return _loss(X, r)(p) - policy_net.regularization(p, 0.0, 0.01)[0]

    _, analytic, _ = sharpe_trainer.sharpe_loss_and_grad(params, X, r, l2=0.01)
    numeric = policy_net.finite_diff_grad(params, loss)
    np.testing.assert_allclose(analytic.flat(), numeric.flat(), atol=1e-6)


# --- Training --- #

def test_train_zero_epochs_returns_initial_params():
    data = _dominant_market(60)
    cfg = SharpeTrainConfig(epochs=0, lookback=5, hidden_sizes=(4,))
    result = sharpe_trainer.train(data, cfg, seed=2)
    assert result.history == []
    np.testing.assert_array_equal(result.params.flat(), policy_net.init_params([10, 4, 2], seed=2).flat())


def test_train_defaults_favour_dominant_asset():
    data = _dominant_market()
    cfg = SharpeTrainConfig(epochs=200)
    assert OptimizerKind.coerce(cfg.optimizer) is OptimizerKind.SGD
    result = sharpe_trainer.train(data, cfg, seed=0)

    r = data.values[cfg.lookback:]
    equal = sharpe_trainer.sharpe_objective(r @ utils.uniform_weights(2))
    assert np.all(np.isfinite(result.history))
    assert result.history[-1] > equal

    weights, _, _ = sharpe_trainer.evaluate_policy(result.params, data, result.standardizer, cfg.lookback)
    assert weights[:, 0].mean() >= 0.7


def test_train_with_adam_favours_dominant_asset():
    data = _dominant_market()
    cfg = SharpeTrainConfig(alpha=0.01, epochs=200, lookback=5, hidden_sizes=(8,), optimizer="adam")
    result = sharpe_trainer.train(data, cfg, seed=0)
    weights, _, _ = sharpe_trainer.evaluate_policy(result.params, data, result.standardizer, cfg.lookback)
    assert weights[:, 0].mean() >= 0.7


def test_train_identical_assets_stays_near_uniform():
    rng = np.random.default_rng(5)
    first = rng.normal(0.0005, 0.01, size=400)
    data = ReturnMatrix.from_array(np.column_stack([first, rng.permutation(first)]), ["A", "B"])
    cfg = SharpeTrainConfig(alpha=0.01, epochs=200, lookback=5, hidden_sizes=(8,))
    result = sharpe_trainer.train(data, cfg, seed=1)
    weights, _, _ = sharpe_trainer.evaluate_policy(result.params, data, result.standardizer, cfg.lookback)
    np.testing.assert_allclose(weights.mean(axis=0), [0.5, 0.5], atol=0.2)


def test_train_small_alpha_is_mostly_monotone():
    rng = np.random.default_rng(8)
    data = ReturnMatrix.from_array(rng.normal(0.1, 1.0, size=(120, 3)))
    cfg = SharpeTrainConfig(alpha=1e-4, epochs=60, lookback=3, hidden_sizes=(8,), patience=1000)
    history = np.array(sharpe_trainer.train(data, cfg, seed=0).history)
    assert np.mean(np.diff(history) >= 0.0) >= 0.95


def test_train_needs_enough_rows():
    data = ReturnMatrix.from_array(np.random.default_rng(0).normal(size=(5, 2)))
    with pytest.raises(ValueError):
        sharpe_trainer.train(data, SharpeTrainConfig(lookback=5, hidden_sizes=(4,)))


def test_train_is_deterministic():
    data = _dominant_market(80)
    cfg = SharpeTrainConfig(epochs=10, lookback=4, hidden_sizes=(4,))
    a = sharpe_trainer.train(data, cfg, seed=4)
    b = sharpe_trainer.train(data, cfg, seed=4)
    assert a.history == b.history
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


@pytest.mark.parametrize("kwargs", [
    {"alpha": 0.0},
    {"epochs": -1},
    {"horizon": 1},
    {"lookback": 0},
    {"hidden_sizes": (0,)},
    {"optimizer": "lbfgs"},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        SharpeTrainConfig(**kwargs)


# --- Evaluation --- #

def test_evaluate_policy_with_warmup_covers_every_row():
    data = _dominant_market(100)
    train_part = ReturnMatrix(data.returns.iloc[:70])
    test_part = ReturnMatrix(data.returns.iloc[70:])
    cfg = SharpeTrainConfig(epochs=5, lookback=4, hidden_sizes=(4,))
    result = sharpe_trainer.train(train_part, cfg, seed=0)

    weights, R, score = sharpe_trainer.evaluate_policy(result.params, test_part, result.standardizer,
                                                       cfg.lookback, warmup=train_part)
    assert weights.shape == (30, 2)
    assert R.shape == (30,)
    assert np.isfinite(score)
    cold, _, _ = sharpe_trainer.evaluate_policy(result.params, test_part, result.standardizer, cfg.lookback)
    assert len(cold) == 26


def test_tune_on_validation_picks_from_grid():
    data = _dominant_market(200)
    train_part = ReturnMatrix(data.returns.iloc[:150])
    val_part = ReturnMatrix(data.returns.iloc[150:])
    base = SharpeTrainConfig(epochs=5, hidden_sizes=(4,))
    cfg, result, scores = sharpe_trainer.tune_on_validation(train_part, val_part, base,
                                                            alphas=(0.01, 0.1), lookbacks=(2, 3))
    assert set(scores) == {(0.01, 2), (0.01, 3), (0.1, 2), (0.1, 3)}
    assert (cfg.alpha, cfg.lookback) in scores
    assert scores[(cfg.alpha, cfg.lookback)] == max(s for s in scores.values() if s is not None)
    assert result.lookback == cfg.lookback


def test_tune_on_validation_random_search_draws_from_grid():
    data = _dominant_market(200)
    train_part = ReturnMatrix(data.returns.iloc[:150])
    val_part = ReturnMatrix(data.returns.iloc[150:])
    base = SharpeTrainConfig(epochs=3, hidden_sizes=(4,))
    grid = {(a, lb) for a in (0.01, 0.1, 0.5) for lb in (2, 3)}
    cfg, _, scores = sharpe_trainer.tune_on_validation(train_part, val_part, base, alphas=(0.01, 0.1, 0.5),
                                                       lookbacks=(2, 3), search="random", n_trials=3, seed=4)
    assert len(scores) == 3
    assert set(scores) <= grid
    assert (cfg.alpha, cfg.lookback) in scores
    again = sharpe_trainer.tune_on_validation(train_part, val_part, base, alphas=(0.01, 0.1, 0.5),
                                              lookbacks=(2, 3), search="random", n_trials=3, seed=4)[2]
    assert list(again) == list(scores)


def test_write_history_tsv(tmp_path):
    path = sharpe_trainer.write_history_tsv([0.1, 0.2, 0.25], tmp_path / "hist.tsv")
    frame = pd.read_csv(path, sep="\t")
    assert list(frame.columns) == ["epoch", "sharpe"]
    assert frame["epoch"].tolist() == [0, 1, 2]


def test_standardizer_is_fitted_on_training_rows():
    data = _dominant_market(60)
    result = sharpe_trainer.train(data, SharpeTrainConfig(epochs=1, lookback=3, hidden_sizes=(4,)))
    np.testing.assert_allclose(result.standardizer.mean, data.values.mean(axis=0))
    fixed = Standardizer(np.zeros(2), np.ones(2))
    assert sharpe_trainer.train(data, SharpeTrainConfig(epochs=1, lookback=3, hidden_sizes=(4,)),
                                standardizer=fixed).standardizer is fixed
