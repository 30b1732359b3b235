import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgattack.cmaes import CmaConfig, ask, cma_init, fmin, tell


def sphere(v):
    return float(v @ v)


def rosenbrock(v):
    return float(np.sum(100.0 * (v[1:] - v[:-1] ** 2) ** 2 + (1 - v[:-1]) ** 2))


def test_config_weights():
    cfg = CmaConfig(10)
    assert cfg.weights.sum() == pytest.approx(1.0)
    assert np.all(cfg.weights > 0) and np.all(np.diff(cfg.weights) <= 0)
    with pytest.raises(ValueError):
        CmaConfig(0)
    with pytest.raises(ValueError):
        CmaConfig(3, pop_size=4, parents=5)


def test_init_state():
    cfg = CmaConfig(4)
    mu = np.array([1.0, -2.0, 0.5, 3.0])
    s = cma_init(cfg, mu)
    np.testing.assert_array_equal(s.mean, mu)
    np.testing.assert_allclose(np.linalg.eigvalsh(s.cov), 1.0)
    assert not s.path_sigma.any() and not s.path_c.any()
    assert s.step == cfg.step0
    with pytest.raises(ValueError):
        cma_init(cfg, np.zeros(3))


def test_ask_with_identity_is_mean_plus_draws():
    cfg = CmaConfig(3, step0=1.0)
    s = cma_init(cfg, np.array([1.0, 2.0, 3.0]))
    cands = ask(cfg, s, np.random.default_rng(7))
    np.testing.assert_allclose(cands, s.mean + np.random.default_rng(7).standard_normal((20, 3)), atol=1e-15)


def test_tiny_step_samples_the_mean():
    cfg = CmaConfig(3, step0=1e-12)
    s = cma_init(cfg, np.ones(3))
    assert np.abs(ask(cfg, s, np.random.default_rng(0)) - 1.0).max() < 1e-9


def test_sample_covariance():
    cfg = CmaConfig(3, step0=0.5)
    a = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    s = cma_init(cfg, np.zeros(3), cov0=a)
    x = ask(cfg, s, np.random.default_rng(0), n=100_000)
    emp = np.cov(x.T)
    assert np.linalg.norm(emp - 0.25 * a) / np.linalg.norm(0.25 * a) < 0.05


def test_identical_candidates_keep_mean():
    cfg = CmaConfig(2)
    s = cma_init(cfg, np.array([0.5, -0.5]))
    tell(cfg, s, np.tile(s.mean, (20, 1)), np.arange(20.0))
    np.testing.assert_allclose(s.mean, [0.5, -0.5], atol=1e-15)


def test_all_infinite_fitness_shrinks_step():
    cfg = CmaConfig(2)
    s = cma_init(cfg, np.zeros(2))
    cands = ask(cfg, s, np.random.default_rng(0))
    tell(cfg, s, cands, np.full(20, np.inf))
    np.testing.assert_array_equal(s.mean, np.zeros(2))
    assert s.step == pytest.approx(0.3 * 0.8)


def test_infinite_fitness_ranks_last():
    cfg = CmaConfig(1, pop_size=4, parents=1)
    s = cma_init(cfg, np.zeros(1))
    tell(cfg, s, np.array([[5.0], [1.0], [2.0], [3.0]]), [np.inf, np.inf, 7.0, np.inf])
    np.testing.assert_allclose(s.mean, [2.0])


def test_nan_fitness_rejected():
    cfg = CmaConfig(2)
    s = cma_init(cfg, np.zeros(2))
    with pytest.raises(ValueError):
        tell(cfg, s, np.zeros((20, 2)), [np.nan] * 20)


def test_sphere_benchmark():
    _, best, state = fmin(sphere, np.full(10, 3.0), CmaConfig(10), budget=20_000, seed=0)
    assert best < 1e-8


def test_rosenbrock_benchmark():
    _, best, _ = fmin(rosenbrock, np.zeros(5), CmaConfig(5), budget=100_000, seed=0, ftarget=1e-10)
    assert best < 1e-6


def _trajectory(fn, seed=0, gens=15, dim=4):
    cfg = CmaConfig(dim)
    s = cma_init(cfg, np.full(dim, 1.0))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(gens):
        c = ask(cfg, s, rng)
        tell(cfg, s, c, [fn(v) for v in c])
        out.append((s.mean.copy(), s.step, s.cov.copy()))
    return out


@settings(max_examples=20, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_rank_based_invariance(shift, scale, seed):
    base = _trajectory(rosenbrock, seed)
    shifted = _trajectory(lambda v: scale * rosenbrock(v) + shift, seed)
    for (m1, s1, c1), (m2, s2, c2) in zip(base, shifted):
        np.testing.assert_array_equal(m1, m2)
        assert s1 == s2
        np.testing.assert_array_equal(c1, c2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_covariance_stays_symmetric_pd(seed, dim):
    cfg = CmaConfig(dim)
    s = cma_init(cfg, np.random.default_rng(seed).standard_normal(dim))
    rng = np.random.default_rng(seed)
    for _ in range(30):
        c = ask(cfg, s, rng)
        tell(cfg, s, c, [rosenbrock(v) if dim > 1 else sphere(v) for v in c])
        assert np.abs(s.cov - s.cov.T).max() < 1e-10
        assert np.linalg.eigvalsh(s.cov).min() > 1e-14 * np.trace(s.cov) / dim * 0.999
        assert s.step > 0


def test_eigen_refresh_keeps_distribution():
    cfg = CmaConfig(3)
    s = cma_init(cfg, np.zeros(3))
    rng = np.random.default_rng(0)
    for _ in range(10):
        c = ask(cfg, s, rng)
        tell(cfg, s, c, [rosenbrock(v) for v in c])
    before = ask(cfg, s, np.random.default_rng(5), n=50_000)
    s.refresh_eigen()
    after = ask(cfg, s, np.random.default_rng(5), n=50_000)
    np.testing.assert_allclose(before, after, atol=1e-10)
