import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgattack.classifier import AdvLossSpec, LinearScorer
from cgattack.energy import (EnergyModel, KLTrainConfig, cap_norm, energy_log, global_norm, kl_gradient,
                             pretrain_flow, self_normalize)
from cgattack.flow import CondFlow
from cgattack.latent import VectorDecoder
from energy_toys import X, flatten, flow_params_size, linear_toy, quadratic_optimum, quadratic_toy, tiny_config


def cosine(a, b):
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


def two_class_bias_model(margin_value):
    return LinearScorer(np.zeros((2, 2)), np.array([margin_value, 0.0]))


def test_energy_log_closed_form():
    em = EnergyModel([two_class_bias_model(0.3)], 10.0, AdvLossSpec(0.5), VectorDecoder(2), clamp_image=False)
    assert energy_log(em, X, 0, np.zeros((1, 1, 2))) == pytest.approx(-3.0)


def test_energy_log_successful_and_out_of_ball():
    em = EnergyModel([two_class_bias_model(-0.2)], 10.0, AdvLossSpec(0.5), VectorDecoder(2), clamp_image=False)
    assert energy_log(em, X, 0, np.zeros((1, 1, 2))) == 0.0
    assert energy_log(em, X, 0, np.array([[[0.6, 0.0]]])) == -math.inf
    # latent-space input goes through the decoder
    assert energy_log(em, X, 0, np.array([0.6, 0.0]).reshape(2, 1, 1)) == -math.inf


def test_energy_model_validation():
    with pytest.raises(ValueError):
        EnergyModel([], 1.0, AdvLossSpec(0.1), VectorDecoder(2))
    with pytest.raises(ValueError):
        EnergyModel([two_class_bias_model(0.0)], -1.0, AdvLossSpec(0.1), VectorDecoder(2))
    with pytest.raises(ValueError):
        KLTrainConfig(K=1)
    with pytest.raises(ValueError):
        KLTrainConfig(reference_std=0.0)


def test_zero_temperature_at_identity_gives_equal_weights():
    # with the standard-normal reference, a constant energy equals the identity flow's density
    em = EnergyModel([two_class_bias_model(0.7)], 0.0, AdvLossSpec(10.0), VectorDecoder(2), clamp_image=False)
    flow = CondFlow.create(tiny_config())
    est = kl_gradient(flow, em, X, 0, 64, np.random.default_rng(0), reference_std=1.0)
    np.testing.assert_allclose(est.weights, 1.0 / 64, atol=1e-12)
    assert global_norm(est.grads) < 1e-10


def test_all_draws_out_of_ball_is_degenerate():
    em = EnergyModel([two_class_bias_model(0.3)], 1.0, AdvLossSpec(1e-3), VectorDecoder(2, scale=10.0))
    flow = CondFlow.create(tiny_config())
    est = kl_gradient(flow, em, X, 0, 16, np.random.default_rng(0))
    assert est.degenerate == 1 and est.queries == 0
    assert not est.weights.any()
    assert global_norm(est.grads) == 0.0
    with pytest.raises(ValueError):
        kl_gradient(flow, em, X, 0, 1, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(3))
def test_estimator_matches_grid_kl_gradient(seed):
    flow, em, grid = quadratic_toy(seed)
    assert flow_params_size(flow) <= 20
    fd = grid.fd_gradient(flow)
    est = kl_gradient(flow, em, X, 0, 4096, np.random.default_rng(seed))
    assert cosine(flatten(est.grads, flow), fd) > 0.9


def test_estimator_direction_converges_with_many_draws():
    flow, em, grid = quadratic_toy(0)
    est = kl_gradient(flow, em, X, 0, 16384, np.random.default_rng(0))
    assert cosine(flatten(est.grads, flow), grid.fd_gradient(flow)) > 0.95


def test_gradient_vanishes_at_the_optimum():
    flow, em, grid = quadratic_optimum()
    at_opt = kl_gradient(flow, em, X, 0, 4096, np.random.default_rng(0))
    start, _, _ = quadratic_toy(0, offset=0.0)
    at_init = kl_gradient(start, em, X, 0, 4096, np.random.default_rng(0))
    assert at_opt.norm < 0.05 * at_init.norm
    # the grid oracle agrees that this flow is (near) stationary
    assert np.linalg.norm(grid.fd_gradient(flow)) < 0.05 * np.linalg.norm(grid.fd_gradient(start))


def test_self_normalized_weights():
    log_w = np.array([[0.0, 1.0, 2.0], [5.0, -np.inf, 3.0], [1.0, 1.0, 1.0]])
    valid = np.array([[True, True, True], [True, False, True], [False, False, False]])
    w = self_normalize(log_w, valid)
    np.testing.assert_allclose(w[0], np.exp([0, 1, 2]) / np.exp([0, 1, 2]).sum())
    assert w[1, 1] == 0.0 and w[1].sum() == pytest.approx(1.0)
    assert not w[2].any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.floats(0.1, 500))
def test_weights_are_a_distribution(seed, k, spread):
    rng = np.random.default_rng(seed)
    log_w = spread * rng.standard_normal((3, k))
    valid = rng.uniform(size=(3, k)) < 0.7
    valid[:, 0] = True
    w = self_normalize(log_w, valid)
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10))
def test_cap_norm_bounds_the_norm(seed, cap):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.standard_normal(5) * 10, "b": rng.standard_normal((2, 2))}
    capped, before = cap_norm(grads, cap)
    assert before == pytest.approx(global_norm(grads))
    assert global_norm(capped) <= cap * (1 + 1e-12)
    if before <= cap:
        assert capped is grads


def test_zero_steps_returns_initial_flow():
    scorer, flow, _ = linear_toy()
    res = pretrain_flow([scorer], X[None], np.array([0]), VectorDecoder(2), KLTrainConfig(steps=0),
                        AdvLossSpec(1.0), lam=5.0, flow=flow)
    for k in flow.params:
        np.testing.assert_array_equal(res.flow.params[k], flow.params[k])
    assert res.log == []


def test_pretraining_rejects_mismatched_surrogate():
    with pytest.raises(ValueError):
        pretrain_flow([LinearScorer(np.zeros((3, 2)))], X[None], np.array([0]), VectorDecoder(2),
                      KLTrainConfig(steps=1), AdvLossSpec(1.0))


def test_pretraining_is_deterministic_and_logs(tmp_path):
    scorer, flow, _ = linear_toy()
    cfg = KLTrainConfig(K=16, steps=5, seed=3)
    runs = [pretrain_flow([scorer], X[None], np.array([0]), VectorDecoder(2), cfg, AdvLossSpec(1.0),
                          lam=5.0, flow=flow) for _ in range(2)]
    for k in flow.params:
        np.testing.assert_array_equal(runs[0].flow.params[k], runs[1].flow.params[k])
    path = tmp_path / "log.ndjson"
    runs[0].write_log(path)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 5
    assert {"step", "loss_proxy", "grad_norm", "degenerate_batches"} <= set(records[0])


def test_training_queries_stay_in_the_ball():
    seen = []

    class Spy(LinearScorer):
        def forward(self, x, params=None):
            seen.append(np.abs(x.data - X).max())
            return super().forward(x, params)

    spy = Spy(np.array([[1.0, 0.0], [0.0, 0.0]]))
    pretrain_flow([spy], X[None], np.array([0]), VectorDecoder(2), KLTrainConfig(K=32, steps=20, project=False),
                  AdvLossSpec(0.5), lam=5.0, flow=linear_toy(sigma0=0.4)[1])
    assert seen and max(seen) <= 0.5 + 1e-12


def test_linear_toy_training_halves_grid_kl():
    scorer, flow, grid = linear_toy()
    before = grid(flow)
    res = pretrain_flow([scorer], X[None], np.array([0]), VectorDecoder(2),
                        KLTrainConfig(K=256, steps=2000, lr=1e-2), AdvLossSpec(1.0), lam=5.0, flow=flow)
    assert not res.aborted
    assert grid(res.flow) < 0.5 * before
