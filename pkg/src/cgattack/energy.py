"""Pretraining the conditional flow against surrogate models.

The target density is the unnormalised energy model
``log P_E(eta | x) = -lam * L_adv(eta, x)`` on the epsilon-ball (``-inf``
outside). The flow is fitted by minimising ``KL(P_E || P_theta)`` with the
reparameterised gradient

    grad = -E_z0[ w(z0) * dg(z0)/dtheta . grad_eta D(eta, x) ],
    D = log P_E - log P_theta,   w = exp(-lam L_adv) / P_theta(eta | x),

where ``w`` is self-normalised over the ``K`` draws of each image and draws
that leave the ball get weight zero.

The estimator ignores probability flux through the ball's surface, so it is
only accurate when the target density is small near the boundary. With an
almost flat energy it keeps widening the flow until no draw lands inside.
Training can therefore multiply the energy by a standard-normal reference
density on the latent (``reference_std``), which keeps the target away from
the boundary; ``None`` uses the plain energy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .classifier import BALL_TOL, AdvLossSpec, margin_tensor
from .flow import CondFlow, FlowConfig, standard_normal_logpdf
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class EnergyModel:
    surrogates: Sequence
    lam: float
    spec: AdvLossSpec
    decoder: object
    clamp_image: bool = True  # evaluate surrogates on clip(x + eta, 0, 1)
    project: bool = False  # clamp decoded draws into the ball instead of rejecting them

    def __post_init__(self):
        if not self.surrogates:
            raise ValueError("energy model needs at least one surrogate")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")

    def _full(self, eta: np.ndarray, x: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape[-3:] == np.shape(x)[-3:]:
            return eta
        return self.decoder.decode(eta)

    def perturbation(self, latent: np.ndarray) -> np.ndarray:
        full = self.decoder.decode(latent)
        return np.clip(full, -self.spec.epsilon, self.spec.epsilon) if self.project else full

    def perturbation_t(self, latent: Tensor) -> Tensor:
        full = self.decoder.decode_t(latent)
        return T.clip(full, -self.spec.epsilon, self.spec.epsilon) if self.project else full

    def mean_hinge_t(self, x: np.ndarray, y: np.ndarray, eta_full: Tensor) -> Tensor:
        """Differentiable per-sample ensemble mean of ``max(0, margin)``; no ball check."""
        adv = x + eta_full
        if self.clamp_image:
            adv = T.clip(adv, 0.0, 1.0)
        total = None
        for model in self.surrogates:
            h = T.relu(margin_tensor(model.forward(adv), y, self.spec))
            total = h if total is None else total + h
        return total * (1.0 / len(self.surrogates))


def energy_log(em: EnergyModel, x: np.ndarray, y: int, eta: np.ndarray) -> float:
    """``-lam * L_adv`` with the ensemble-mean loss, or ``-inf`` outside the ball.

    ``eta`` may be given in image space or in the decoder's latent space.
    """
    full = em._full(eta, x)
    if float(np.max(np.abs(full))) > em.spec.epsilon + BALL_TOL:
        return -math.inf
    loss = em.mean_hinge_t(np.asarray(x)[None], np.array([y]), Tensor(full[None])).data[0]
    return float(-em.lam * loss)


@dataclass
class KLTrainConfig:
    K: int = 32
    steps: int = 600
    lr: float = 2e-3
    batch_images: int = 4
    grad_norm_cap: float = 1.0
    seed: int = 0
    reference_std: float | None = 1.0  # latent Gaussian reference measure; None = flat
    project: bool = True  # train on ball-clamped draws, as the attack queries them

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.reference_std is not None and not self.reference_std > 0:
            raise ValueError("reference_std must be positive or None")


@dataclass
class KLGradient:
    grads: dict[str, np.ndarray]
    weights: np.ndarray  # (B, K) self-normalised, zero outside the ball
    in_ball: np.ndarray  # (B, K) bool
    loss_proxy: float  # mean over images of sum_k w_k (log P_E - log P_theta)
    degenerate: int  # images whose K draws all left the ball
    queries: int  # surrogate evaluations (all in-ball)

    @property
    def norm(self) -> float:
        return global_norm(self.grads)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def cap_norm(grads: dict[str, np.ndarray], cap: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global norm is at most ``cap``; returns the pre-cap norm too."""
    norm = global_norm(grads)
    if norm > cap:
        factor = cap / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def self_normalize(log_w: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax of ``log_w`` over ``valid`` entries of each row; invalid entries and
    all-invalid rows get zero."""
    log_w = np.where(valid, log_w, -np.inf)
    top = log_w.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.where(valid, np.exp(log_w - top), 0.0)
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def kl_gradient(flow: CondFlow, em: EnergyModel, xs: np.ndarray, ys, K: int,
                rng: np.random.Generator, reference_std: float | None = None) -> KLGradient:
    """Monte-Carlo estimate of the KL gradient over a batch of images.

    ``xs`` is ``(B, H, W, C)`` (a single image is promoted); gradients are
    averaged over the images. ``reference_std`` adds
    ``-|latent|^2 / (2 std^2)`` to the log target.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[None]
    ys = np.broadcast_to(np.asarray(ys), (len(xs),))
    b = len(xs)
    conds = np.repeat(em.decoder.condition(xs), K, axis=0)
    x_rep = np.repeat(xs, K, axis=0)
    y_rep = np.repeat(ys, K, axis=0)
    z0 = rng.standard_normal((b * K,) + flow.config.latent_shape)

    params = L.as_tensors(flow.params, requires_grad=True)
    eta_t, logdet = flow.forward_t(z0, conds, params)
    eta = eta_t.data
    full = em.perturbation(eta)
    ok = np.abs(full).reshape(b * K, -1).max(axis=1) <= em.spec.epsilon + BALL_TOL
    log_p = standard_normal_logpdf(z0) - logdet.data

    idx = np.flatnonzero(ok)
    energy = np.full(b * K, -np.inf)
    d_eta = np.zeros_like(eta)
    if idx.size:
        assert np.all(np.abs(full[idx]) <= em.spec.epsilon + BALL_TOL), "surrogate query outside the ball"
        leaf = Tensor(eta[idx], requires_grad=True)
        e_t = em.mean_hinge_t(x_rep[idx], y_rep[idx], em.perturbation_t(leaf)) * (-em.lam)
        if reference_std is not None:
            e_t = e_t - T.sum(leaf * leaf, axis=(1, 2, 3)) * (0.5 / reference_std**2)
        # theta is held fixed inside log P_theta: only the path through eta is differentiated
        lp_t = flow.log_prob_t(leaf, conds[idx], L.as_tensors(flow.params))
        T.backward(T.sum(e_t - lp_t))
        d_eta[idx] = leaf.grad
        energy[idx] = e_t.data

    ok2 = ok.reshape(b, K)
    log_w = (energy - log_p).reshape(b, K)
    w = self_normalize(log_w, ok2)
    degenerate = int(np.sum(~ok2.any(axis=1)))

    if idx.size:
        coef = w.reshape(-1)[:, None, None, None] * d_eta
        surrogate = T.sum(eta_t * coef) * (-1.0 / b)
        grads = T.grad(surrogate, params)
        d = np.where(ok, energy - log_p, 0.0).reshape(b, K)
        proxy = float(np.sum(w * d) / max(1, b - degenerate))
    else:
        grads = {k: np.zeros_like(v) for k, v in flow.params.items()}
        proxy = float("nan")
    return KLGradient(grads, w, ok2, proxy, degenerate, int(idx.size))


@dataclass
class PretrainResult:
    flow: CondFlow
    log: list[dict] = field(default_factory=list)
    aborted: bool = False

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")


def pretrain_flow(surrogates: Sequence, images: np.ndarray, labels: np.ndarray, decoder,
                  cfg: KLTrainConfig, spec: AdvLossSpec, lam: float = 20.0,
                  flow_config: FlowConfig | None = None, flow: CondFlow | None = None,
                  log_every: int = 50) -> PretrainResult:
    """Fit ``theta = (phi, mu, sigma)`` on surrogate models; deterministic given ``cfg.seed``.

    Training stops early, keeping the last finite parameters, if an update
    produces non-finite values.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    for m in surrogates:
        if tuple(m.input_shape) != images.shape[1:]:
            raise ValueError(f"surrogate input {m.input_shape} does not match data {images.shape[1:]}")
    if flow is None:
        if flow_config is None:
            flow_config = FlowConfig(decoder.latent_shape, decoder.cond_channels)
        flow = CondFlow.create(flow_config, seed=cfg.seed)
    flow = flow.copy()
    em = EnergyModel(list(surrogates), lam, spec, decoder, project=cfg.project)
    pool = np.arange(len(images))
    if spec.targeted:
        pool = pool[labels != spec.target]
    if pool.size == 0:
        raise ValueError("no training images left to attack")
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(flow.params, lr=cfg.lr)
    result = PretrainResult(flow)
    for step in range(cfg.steps):
        batch = rng.choice(pool, size=min(cfg.batch_images, pool.size), replace=False)
        est = kl_gradient(flow, em, images[batch], labels[batch], cfg.K, rng, cfg.reference_std)
        grads, norm = cap_norm(est.grads, cfg.grad_norm_cap)
        backup = {k: v.copy() for k, v in flow.params.items()}
        if est.queries:
            opt.step(grads)
        # else every draw left the ball: no signal, and stale momentum must not move theta
        if not all(np.all(np.isfinite(v)) for v in flow.params.values()):
            flow.params.update(backup)
            result.aborted = True
            log.warning("pretraining diverged at step %d; keeping last finite parameters", step)
            break
        rec = {"step": step, "loss_proxy": est.loss_proxy, "grad_norm": norm,
               "degenerate_batches": est.degenerate, "in_ball": float(est.in_ball.mean())}
        result.log.append(rec)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d proxy %.4f grad %.3f degenerate %d",
                     step, est.loss_proxy, norm, est.degenerate)
    return result
