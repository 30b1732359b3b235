"""Covariance matrix adaptation evolution strategy with Hansen's default settings.

Ask/tell interface over numpy vectors. Fitness is minimised; ``inf`` is a
legal fitness and ranks last (stable, so ties keep candidate order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAGNATION_SHRINK = 0.8
EIG_FLOOR = 1e-14


@dataclass
class CmaConfig:
    dim: int
    pop_size: int = 20
    parents: int = 10
    step0: float = 0.3

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("CMA-ES needs dimension >= 1")
        if not 1 <= self.parents <= self.pop_size:
            raise ValueError(f"need 1 <= parents ({self.parents}) <= pop_size ({self.pop_size})")
        if self.step0 <= 0:
            raise ValueError("step0 must be positive")
        n, mu = self.dim, self.parents
        raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)
        self.c_sigma = (self.mueff + 2) / (n + self.mueff + 5)
        self.d_sigma = 1 + 2 * max(0.0, np.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.c_sigma
        self.c_c = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.c_1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.c_mu = min(1 - self.c_1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))


@dataclass
class CmaState:
    mean: np.ndarray
    step: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_c: np.ndarray
    eig_basis: np.ndarray
    eig_sqrt: np.ndarray  # square roots of the covariance eigenvalues
    generation: int = 0
    evaluations: int = 0
    best_x: np.ndarray | None = None
    best_f: float = np.inf
    history: list = field(default_factory=list)

    def refresh_eigen(self) -> None:
        """Symmetrise ``cov``, floor tiny eigenvalues and rebuild the ``B D`` cache."""
        self.cov = 0.5 * (self.cov + self.cov.T)
        vals, vecs = np.linalg.eigh(self.cov)
        floor = EIG_FLOOR * max(np.trace(self.cov), 0.0) / len(vals)
        if vals.min() < floor or floor == 0.0:
            vals = np.maximum(vals, max(floor, EIG_FLOOR))
            self.cov = (vecs * vals) @ vecs.T
            self.cov = 0.5 * (self.cov + self.cov.T)
        self.eig_basis = vecs
        self.eig_sqrt = np.sqrt(vals)

    def inv_sqrt(self) -> np.ndarray:
        return (self.eig_basis / self.eig_sqrt) @ self.eig_basis.T


def cma_init(cfg: CmaConfig, mean0, cov0: np.ndarray | None = None,
             step0: float | None = None) -> CmaState:
    mean0 = np.asarray(mean0, dtype=np.float64).reshape(-1)
    if mean0.size != cfg.dim:
        raise ValueError(f"mean0 has length {mean0.size}, expected {cfg.dim}")
    cov = np.eye(cfg.dim) if cov0 is None else np.array(cov0, dtype=np.float64)
    state = CmaState(
        mean=mean0.copy(),
        step=cfg.step0 if step0 is None else float(step0),
        cov=cov,
        path_sigma=np.zeros(cfg.dim),
        path_c=np.zeros(cfg.dim),
        eig_basis=np.eye(cfg.dim),
        eig_sqrt=np.ones(cfg.dim),
    )
    if cov0 is not None:
        state.refresh_eigen()
    return state


def ask(cfg: CmaConfig, state: CmaState, rng: np.random.Generator,
        n: int | None = None) -> np.ndarray:
    """``(k, dim)`` candidates ``mean + step * B D zeta``."""
    zeta = rng.standard_normal((cfg.pop_size if n is None else n, cfg.dim))
    return state.mean + state.step * (zeta * state.eig_sqrt) @ state.eig_basis.T


def tell(cfg: CmaConfig, state: CmaState, candidates: np.ndarray, fitnesses) -> CmaState:
    """One CMA-ES update from a full generation; mutates and returns ``state``."""
    x = np.asarray(candidates, dtype=np.float64)
    f = np.asarray(fitnesses, dtype=np.float64)
    if x.shape != (cfg.pop_size, cfg.dim) or f.shape != (cfg.pop_size,):
        raise ValueError(f"expected {cfg.pop_size} candidates of dim {cfg.dim}, got {x.shape}, {f.shape}")
    if np.any(np.isnan(f)):
        raise ValueError("fitness values must not be NaN")
    state.generation += 1
    state.evaluations += len(f)
    order = np.argsort(f, kind="stable")
    if np.isfinite(f[order[0]]) and f[order[0]] < state.best_f:
        state.best_f = float(f[order[0]])
        state.best_x = x[order[0]].copy()
    if not np.isfinite(f).any():
        state.step *= STAGNATION_SHRINK
        return state

    n = cfg.dim
    old = state.mean
    sel = x[order[: cfg.parents]]
    state.mean = cfg.weights @ sel
    y_w = (state.mean - old) / state.step

    cs = cfg.c_sigma
    state.path_sigma = (1 - cs) * state.path_sigma + np.sqrt(cs * (2 - cs) * cfg.mueff) * (state.inv_sqrt() @ y_w)
    ps_norm = np.linalg.norm(state.path_sigma)
    h_sig = ps_norm / np.sqrt(1 - (1 - cs) ** (2 * state.generation)) < (1.4 + 2 / (n + 1)) * cfg.chi_n
    cc = cfg.c_c
    state.path_c = (1 - cc) * state.path_c + h_sig * np.sqrt(cc * (2 - cc) * cfg.mueff) * y_w

    y = (sel - old) / state.step
    rank_mu = (y.T * cfg.weights) @ y
    delta_h = (1 - h_sig) * cc * (2 - cc)
    state.cov = ((1 - cfg.c_1 - cfg.c_mu) * state.cov
                 + cfg.c_1 * (np.outer(state.path_c, state.path_c) + delta_h * state.cov)
                 + cfg.c_mu * rank_mu)
    state.step *= np.exp((cs / cfg.d_sigma) * (ps_norm / cfg.chi_n - 1))
    state.refresh_eigen()
    return state


def fmin(fn, mean0, cfg: CmaConfig, budget: int, seed: int = 0,
         ftarget: float = -np.inf) -> tuple[np.ndarray, float, CmaState]:
    """Minimise ``fn`` for at most ``budget`` evaluations; returns ``(best_x, best_f, state)``."""
    rng = np.random.default_rng(seed)
    state = cma_init(cfg, mean0)
    while state.evaluations + cfg.pop_size <= budget and state.best_f > ftarget:
        cands = ask(cfg, state, rng)
        tell(cfg, state, cands, [fn(c) for c in cands])
        if state.step * state.eig_sqrt.max() < 1e-30:
            break
    return state.best_x, state.best_f, state
