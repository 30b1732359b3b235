"""Fast built-in checks behind ``cgattack selftest``; each returns ``(name, ok, detail)``."""

from __future__ import annotations

import numpy as np

from . import dct
from . import tensor as T
from .attack import AttackConfig, cg_attack
from .classifier import LinearScorer, QueryOracle
from .cmaes import CmaConfig, fmin
from .experiment import summarize, verify_report
from .flow import CondFlow, FlowConfig
from .latent import VectorDecoder


def _autodiff():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    err = T.check_gradient(lambda x, y: T.sum(T.tanh(T.matmul(x, y)) * 2.0), [a, b])
    return err < 1e-4, f"max rel err {err:.2e}"


def _dct():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((8, 8))
    c = dct.dct2(p)
    err = max(np.abs(dct.idct2(c) - p).max(), abs(np.sum(p * p) - np.sum(c * c)))
    return err < 1e-10, f"round trip / energy err {err:.2e}"


def _flow():
    cfg = FlowConfig((2, 4, 4), 1, num_blocks=3, hidden=8, coupling_hidden=8)
    flow = CondFlow.create(cfg, seed=1, identity=False, scale=0.3)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((5,) + cfg.latent_shape)
    cond = rng.standard_normal((5, 1, 4, 4))
    eta, ld = flow.forward(z0, cond)
    back, ld_inv = flow.inverse(eta, cond)
    err = max(np.abs(back - z0).max(), np.abs(ld + ld_inv).max())
    return err < 1e-8, f"round trip err {err:.2e}"


def _cmaes():
    _, best, state = fmin(lambda v: float(v @ v), np.full(5, 2.0), CmaConfig(5), budget=6000, seed=0)
    return best < 1e-8, f"sphere f={best:.2e} after {state.evaluations} evaluations"


def _attack_accounting():
    scorer = LinearScorer(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 5.0]))  # always class 1
    flow = CondFlow.create(FlowConfig((2, 1, 1), 1, num_blocks=1, hidden=0, coupling_hidden=0, kernel=1))
    oracle = QueryOracle(scorer)
    res = cg_attack(oracle, flow, VectorDecoder(2), np.full((1, 1, 2), 0.5), 0,
                    AttackConfig(budget=50, epsilon=0.1, transfer_mode="none", r=0.0))
    ok = res.success and res.queries_used == 1 == oracle.count
    return ok, f"queries {res.queries_used}, oracle {oracle.count}"


def _report():
    recs = [{"success": True, "queries": 1}, {"success": False, "queries": 7}, {"success": True, "queries": 3}]
    rep = summarize(recs)
    ok = abs(rep.asr - 200 / 3) < 1e-12 and rep.mean_queries == 2.0 and rep.median_queries == 1
    return ok and verify_report(rep), f"asr {rep.asr:.1f} mean {rep.mean_queries} median {rep.median_queries}"


CHECKS = {
    "autodiff": _autodiff,
    "dct": _dct,
    "flow-invertibility": _flow,
    "cma-es-sphere": _cmaes,
    "attack-accounting": _attack_accounting,
    "report-arithmetic": _report,
}


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
