"""Query-based attack: CMA-ES over the flow's base Gaussian, decoded to image space.

Three transfer modes share one loop:

* ``partial``: the pretrained mapping layers are kept frozen and CMA-ES
  searches their input space starting from the pretrained mean with unit
  covariance.
* ``full``: candidates come from the pretrained base Gaussian itself and
  nothing is adapted (ablation).
* ``none``: the mapping layers are the identity and CMA-ES starts at zero.

Candidates of a generation are charged one query at a time in ask order and
the attack stops at the first zero loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .classifier import BALL_TOL, AdvLossSpec, QueryOracle
from .cmaes import CmaConfig, ask, cma_init, tell
from .flow import CondFlow

TRANSFER_MODES = ("partial", "full", "none")


def project_ball(eta: np.ndarray, epsilon: float, x: np.ndarray | None = None) -> np.ndarray:
    """Clamp to ``[-epsilon, epsilon]``; with ``x`` also keep ``x + eta`` inside ``[0, 1]``."""
    eta = np.clip(np.asarray(eta, dtype=np.float64), -epsilon, epsilon)
    if x is None:
        return eta
    x = np.asarray(x, dtype=np.float64)
    adv = x + eta
    # re-derive only where the image clamp is active, so feasible entries stay bit-exact
    return np.where((adv < 0.0) | (adv > 1.0), np.clip(adv, 0.0, 1.0) - x, eta)


@dataclass
class AttackConfig:
    budget: int = 10000
    epsilon: float = 0.1
    mode: str = "untargeted"
    pop: int = 20
    r: float = 0.5
    transfer_mode: str = "partial"
    seed: int = 0
    step0: float = 1.0  # CMA step size in the search space; unit covariance times this

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.transfer_mode not in TRANSFER_MODES:
            raise ValueError(f"transfer_mode must be one of {TRANSFER_MODES}, got {self.transfer_mode!r}")
        if self.pop < 2:
            raise ValueError("population must be at least 2")
        if not self.step0 > 0:
            raise ValueError("step0 must be positive")
        self.spec  # validates epsilon and mode

    @property
    def spec(self) -> AdvLossSpec:
        return AdvLossSpec.parse(self.mode, self.epsilon)


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    perturbation: np.ndarray | None  # full-space eta of the first success
    loss_trace: list[float] = field(default_factory=list)
    image_id: int = 0

    @property
    def final_loss(self) -> float:
        """0 on success, otherwise the best loss seen (``inf`` when nothing was queried)."""
        return min(self.loss_trace) if self.loss_trace else math.inf

    def record(self, cfg: AttackConfig) -> dict:
        loss = self.final_loss
        return {
            "image_id": int(self.image_id),
            "mode": cfg.mode,
            "transfer_mode": cfg.transfer_mode,
            "success": bool(self.success),
            "queries": int(self.queries_used),
            "final_loss": loss if math.isfinite(loss) else None,
            "seed": int(cfg.seed),
        }


def _check_shapes(flow: CondFlow, decoder, x: np.ndarray, cfg: AttackConfig) -> None:
    if tuple(flow.config.latent_shape) != tuple(decoder.latent_shape):
        raise ValueError(f"flow latent {flow.config.latent_shape} != decoder latent {decoder.latent_shape}")
    if tuple(np.shape(x)) != tuple(decoder.image_shape):
        raise ValueError(f"image shape {np.shape(x)} != decoder output {decoder.image_shape}")
    r = getattr(decoder, "r", None)
    if r is not None and abs(r - cfg.r) > 1e-12:
        raise ValueError(f"attack ratio {cfg.r} != flow ratio {r}")


def cg_attack(oracle: QueryOracle, flow: CondFlow, decoder, x: np.ndarray, y: int,
              cfg: AttackConfig, image_id: int = 0) -> AttackResult:
    """Attack one image; never mutates ``flow``."""
    x = np.asarray(x, dtype=np.float64)
    _check_shapes(flow, decoder, x, cfg)
    spec = cfg.spec
    spec.check_classes(oracle.num_classes)
    rng = np.random.default_rng(cfg.seed)
    start, infeasible0 = oracle.count, oracle.infeasible
    cond = decoder.condition(x)
    shape = flow.config.latent_shape
    dim = flow.config.dim

    if cfg.transfer_mode == "none":
        mapper = flow.with_identity_blocks()
        mean0 = np.zeros(dim)
    else:
        mapper = flow
        mean0 = flow.mu.reshape(-1)
    phi_before = L.checksum(flow.phi) if cfg.transfer_mode == "partial" else None

    cma = CmaConfig(dim, pop_size=cfg.pop, parents=max(1, cfg.pop // 2), step0=cfg.step0)
    state = cma_init(cma, mean0)
    sigma_s = flow.sigma.reshape(-1)
    trace: list[float] = []
    found = None

    while oracle.count - start < cfg.budget:
        if cfg.transfer_mode == "full":
            cands = mean0 + sigma_s * rng.standard_normal((cfg.pop, dim))
        else:
            cands = ask(cma, state, rng)
        lat, _ = mapper.blocks_forward(cands.reshape((cfg.pop,) + shape), cond)
        etas = project_ball(decoder.decode(lat), spec.epsilon, x)
        assert np.all(np.abs(etas) <= spec.epsilon + BALL_TOL), "candidate left the ball"
        values = oracle.losses(x, y, etas, spec, stop_at_zero=True,
                               budget=cfg.budget - (oracle.count - start))
        assert oracle.infeasible == infeasible0, "infeasible input reached the oracle"
        trace.extend(values)
        if values and values[-1] == 0.0:
            found = etas[len(values) - 1]
            break
        if len(values) < cfg.pop:
            break  # budget ran out mid-generation: no update
        if cfg.transfer_mode != "full":
            tell(cma, state, cands, values)

    if phi_before is not None:
        assert L.checksum(flow.phi) == phi_before, "mapping parameters changed during the attack"
    return AttackResult(found is not None, oracle.count - start, found, trace, image_id)
