import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgattack import layers as L
from cgattack.attack import AttackConfig, AttackResult, cg_attack, project_ball
from cgattack.classifier import LinearScorer, QueryOracle, adv_loss
from cgattack.flow import CondFlow, FlowConfig
from cgattack.latent import DctDecoder, VectorDecoder

X2 = np.full((1, 1, 2), 0.5)


def vector_flow(seed=0, identity=False):
    cfg = FlowConfig((2, 1, 1), 1, num_blocks=2, hidden=4, coupling_hidden=0, kernel=1)
    flow = CondFlow.create(cfg, seed=seed, identity=identity, scale=0.3)
    flow.set_base(np.array([0.05, -0.02]).reshape(2, 1, 1), np.full((2, 1, 1), 0.7))
    return flow


def constant_model(margin_value):
    return LinearScorer(np.zeros((2, 2)), np.array([margin_value, 0.0]))


def half_space_model():
    # class 0 wins while v1 < 0.6; with x1 = 0.5 the success set is eta1 >= 0.1
    return LinearScorer(np.array([[-1.0, 1.0], [0.0, 0.0]]), np.array([1.2, 0.0]))


def test_project_ball_examples():
    eps = 0.1
    x = np.full((2, 2, 1), 0.5)
    eta = np.full((2, 2, 1), 0.05)
    np.testing.assert_array_equal(project_ball(eta, eps, x), eta)
    np.testing.assert_allclose(project_ball(np.full((2, 2, 1), 0.2), eps, x), 0.1)
    np.testing.assert_array_equal(project_ball(np.full((2, 2, 1), 0.05), eps, np.ones((2, 2, 1))), 0.0)
    np.testing.assert_allclose(project_ball(np.array([0.3, -0.3]), eps), [0.1, -0.1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 0.5))
def test_projected_inputs_are_feasible(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (3, 3, 2))
    eta = project_ball(rng.standard_normal((3, 3, 2)), eps, x)
    assert np.abs(eta).max() <= eps + 1e-12
    assert (x + eta).min() >= -1e-12 and (x + eta).max() <= 1 + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(budget=0)
    with pytest.raises(ValueError):
        AttackConfig(transfer_mode="half")
    with pytest.raises(ValueError):
        AttackConfig(pop=1)
    with pytest.raises(ValueError):
        AttackConfig(mode="targeted:x")
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.0)


@pytest.mark.parametrize("transfer", ["partial", "full", "none"])
def test_constant_wrong_oracle_succeeds_on_first_query(transfer):
    oracle = QueryOracle(constant_model(-1.0))
    res = cg_attack(oracle, vector_flow(), VectorDecoder(2), X2, 0,
                    AttackConfig(budget=100, epsilon=0.3, transfer_mode=transfer))
    assert res.success and res.queries_used == 1 and oracle.count == 1
    assert res.final_loss == 0.0
    assert np.abs(res.perturbation).max() <= 0.3


@pytest.mark.parametrize("transfer", ["partial", "full", "none"])
def test_constant_loss_exhausts_budget(transfer):
    oracle = QueryOracle(constant_model(1.0))
    res = cg_attack(oracle, vector_flow(), VectorDecoder(2), X2, 0,
                    AttackConfig(budget=50, epsilon=0.3, transfer_mode=transfer))
    assert not res.success and res.perturbation is None
    assert res.queries_used == 50 == oracle.count
    assert res.loss_trace == [1.0] * 50


def test_first_generation_matches_half_space_mass():
    trials, budget, step = 10_000, 20, 0.1
    model = half_space_model()
    flow, dec = vector_flow(), VectorDecoder(2)
    wins = 0
    for seed in range(trials):
        res = cg_attack(QueryOracle(model), flow, dec, X2, 0,
                        AttackConfig(budget=budget, epsilon=0.4, transfer_mode="none", seed=seed, step0=step))
        wins += res.success
    p = 0.5 * math.erfc(0.1 / step / math.sqrt(2))
    expected = 1 - (1 - p) ** budget
    assert abs(wins / trials - expected) < 0.02


@pytest.mark.parametrize("transfer", ["partial", "full", "none"])
@pytest.mark.parametrize("seed", range(3))
def test_accounting_feasibility_and_early_exit(transfer, seed):
    rng = np.random.default_rng(seed)
    model = LinearScorer(rng.standard_normal((2, 3)), np.array([0.6, 0.0, 0.0]))
    oracle = QueryOracle(model, record=True)
    x = rng.uniform(0, 1, (1, 1, 2))
    cfg = AttackConfig(budget=300, epsilon=0.2, transfer_mode=transfer, seed=seed)
    res = cg_attack(oracle, vector_flow(seed), VectorDecoder(2), x, 0, cfg)
    assert res.queries_used == oracle.count == len(res.loss_trace)
    assert oracle.infeasible == 0
    assert oracle.history == res.loss_trace
    zeros = [i for i, v in enumerate(res.loss_trace) if v == 0.0]
    assert zeros == ([len(res.loss_trace) - 1] if res.success else [])
    if res.success:
        assert adv_loss(model, x, 0, res.perturbation, cfg.spec) == 0.0


def test_mapping_parameters_are_not_mutated():
    flow = vector_flow(3)
    before = L.checksum(flow.phi)
    base = flow.mu.copy(), flow.sigma.copy()
    cg_attack(QueryOracle(half_space_model()), flow, VectorDecoder(2), X2, 0,
              AttackConfig(budget=200, epsilon=0.05, transfer_mode="partial"))
    assert L.checksum(flow.phi) == before
    np.testing.assert_array_equal(flow.mu, base[0])
    np.testing.assert_array_equal(flow.sigma, base[1])


@pytest.mark.parametrize("transfer", ["partial", "full", "none"])
def test_same_seed_same_result(transfer):
    cfg = AttackConfig(budget=200, epsilon=0.08, transfer_mode=transfer, seed=11)
    runs = [cg_attack(QueryOracle(half_space_model()), vector_flow(1), VectorDecoder(2), X2, 0, cfg)
            for _ in range(2)]
    assert runs[0].loss_trace == runs[1].loss_trace
    assert runs[0].queries_used == runs[1].queries_used


def test_none_mode_ignores_pretrained_layers():
    cfg = AttackConfig(budget=200, epsilon=0.08, transfer_mode="none", seed=2)
    a = cg_attack(QueryOracle(half_space_model()), vector_flow(1), VectorDecoder(2), X2, 0, cfg)
    b = cg_attack(QueryOracle(half_space_model()), vector_flow(9, identity=True), VectorDecoder(2), X2, 0, cfg)
    assert a.loss_trace == b.loss_trace


def test_shape_mismatch_raises_before_any_query():
    oracle = QueryOracle(constant_model(1.0))
    flow = vector_flow()
    with pytest.raises(ValueError):
        cg_attack(oracle, flow, VectorDecoder(2), np.full((1, 1, 3), 0.5), 0, AttackConfig())
    dec = DctDecoder(8, 0.5, 1, 1.0)
    with pytest.raises(ValueError):
        cg_attack(oracle, flow, dec, np.zeros((8, 8, 1)), 0, AttackConfig())
    dct_flow = CondFlow.create(FlowConfig(dec.latent_shape, dec.cond_channels))
    with pytest.raises(ValueError):
        cg_attack(oracle, dct_flow, dec, np.zeros((8, 8, 1)), 0, AttackConfig(r=0.25))
    with pytest.raises(ValueError):
        cg_attack(oracle, flow, VectorDecoder(2), X2, 0, AttackConfig(mode="targeted:5"))
    assert oracle.count == 0


def test_result_record():
    res = AttackResult(False, 7, None, [3.0, 2.5, 4.0], image_id=4)
    rec = res.record(AttackConfig(seed=9))
    assert rec == {"image_id": 4, "mode": "untargeted", "transfer_mode": "partial", "success": False,
                   "queries": 7, "final_loss": 2.5, "seed": 9}
    assert AttackResult(False, 0, None).record(AttackConfig())["final_loss"] is None
