"""Desk-scale image classifiers, the hinge adversarial loss and query-only access.

Images are ``(H, W, C)`` arrays in ``[0, 1]`` (a leading batch axis is
allowed everywhere). Scores are raw logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

ARCHS = ("mlp-2", "cnn-small", "cnn-wide", "cnn-deep")

# Sentinel for the ball indicator: ranks above every finite loss and never
# produces NaN under min/sort.
OUT_OF_BALL = math.inf
# Slack for float round-off when a clamped perturbation sits exactly on the sphere.
BALL_TOL = 1e-12


# ---------------------------------------------------------------- architectures


def _init_params(arch: str, input_shape: tuple[int, int, int], num_classes: int,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    h, w, c = input_shape
    p: dict[str, np.ndarray] = {}
    if arch == "mlp-2":
        L.init_dense(p, "fc1", h * w * c, 128, rng)
        L.init_dense(p, "fc2", 128, num_classes, rng)
    elif arch == "cnn-small":
        L.init_conv(p, "conv1", c, 8, 3, rng)
        L.init_conv(p, "conv2", 8, 16, 3, rng)
        L.init_dense(p, "fc", 16 * (h // 4) * (w // 4), num_classes, rng)
    elif arch == "cnn-wide":
        L.init_conv(p, "conv1", c, 32, 5, rng)
        L.init_dense(p, "fc1", 32 * (h // 2) * (w // 2), 64, rng)
        L.init_dense(p, "fc2", 64, num_classes, rng)
    elif arch == "cnn-deep":
        L.init_conv(p, "conv1", c, 8, 3, rng)
        L.init_conv(p, "conv2", 8, 8, 3, rng)
        L.init_conv(p, "conv3", 8, 16, 3, rng)
        L.init_conv(p, "conv4", 16, 16, 3, rng)
        L.init_conv(p, "conv5", 16, 32, 3, rng)
        L.init_dense(p, "fc", 32, num_classes, rng)
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    return p


def _forward(arch: str, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """``x`` is ``(N, C, H, W)``; returns ``(N, num_classes)`` logits."""
    if arch == "mlp-2":
        return L.dense(T.relu(L.dense(L.flatten(x), p, "fc1")), p, "fc2")
    if arch == "cnn-small":
        h = L.avg_pool2(T.relu(L.conv(x, p, "conv1")))
        h = L.avg_pool2(T.relu(L.conv(h, p, "conv2")))
        return L.dense(L.flatten(h), p, "fc")
    if arch == "cnn-wide":
        h = L.avg_pool2(T.relu(L.conv(x, p, "conv1")))
        return L.dense(T.relu(L.dense(L.flatten(h), p, "fc1")), p, "fc2")
    if arch == "cnn-deep":
        h = T.relu(L.conv(x, p, "conv1"))
        h = L.avg_pool2(T.relu(L.conv(h, p, "conv2")))
        h = T.relu(L.conv(h, p, "conv3"))
        h = L.avg_pool2(T.relu(L.conv(h, p, "conv4")))
        h = T.relu(L.conv(h, p, "conv5"))
        return L.dense(T.mean(h, axis=(2, 3)), p, "fc")
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass
class ClassifierModel:
    arch: str
    params: dict[str, np.ndarray]
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.input_shape:
            raise T.ShapeError(f"classifier[{self.arch}]",
                               f"input shape {x.shape[-3:]} != model input {self.input_shape}")
        return x

    def forward(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Differentiable logits for a ``(N, H, W, C)`` tensor."""
        self._check(x.data)
        p = L.as_tensors(self.params) if params is None else params
        return _forward(self.arch, p, T.transpose(x, (0, 3, 1, 2)))

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        single = x.ndim == 3
        batch = x[None] if single else x.reshape((-1,) + self.input_shape)
        out = _forward(self.arch, L.as_tensors(self.params),
                       Tensor(batch.transpose(0, 3, 1, 2))).data
        return out[0] if single else out.reshape(x.shape[:-3] + (self.num_classes,))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


class LinearScorer:
    """``F(v, j) = w_j . v + b_j`` on flattened inputs; used for closed-form checks and toys."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray | None = None,
                 input_shape: Sequence[int] | None = None):
        self.weights = np.asarray(weights, dtype=np.float64)  # (n_in, num_classes)
        self.bias = np.zeros(self.weights.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape) if input_shape is not None else (1, 1, self.weights.shape[0])
        self.num_classes = self.weights.shape[1]

    def forward(self, x: Tensor, params=None) -> Tensor:
        return T.matmul(T.reshape(x, (x.shape[0], -1)), self.weights) + self.bias

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(x.shape[:-3] + (-1,))
        return flat @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


class QuadraticScorer:
    """Two classes: ``F_0 = a * |v - c|^2 - offset`` and ``F_1 = 0``.

    For label 0 the margin is the quadratic itself, so ``exp(-lam * hinge)`` is a
    Gaussian bump (flat-topped when ``offset > 0``) centred on ``c``.
    """

    def __init__(self, center: np.ndarray, curvature: float, offset: float = 0.0,
                 input_shape: Sequence[int] | None = None):
        self.center = np.asarray(center, dtype=np.float64).reshape(-1)
        self.curvature = float(curvature)
        self.offset = float(offset)
        self.input_shape = tuple(input_shape) if input_shape is not None else (1, 1, self.center.size)
        self.num_classes = 2

    def forward(self, x: Tensor, params=None) -> Tensor:
        diff = T.reshape(x, (x.shape[0], -1)) - self.center
        q = T.sum(diff * diff, axis=1, keepdims=True) * self.curvature - self.offset
        return T.concat([q, q * 0.0], axis=1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(x.shape[:-3] + (-1,))
        q = self.curvature * np.sum((flat - self.center) ** 2, axis=-1) - self.offset
        return np.stack([q, np.zeros_like(q)], axis=-1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


def build_classifier(arch: str, input_shape: Sequence[int], num_classes: int,
                     seed: int = 0) -> ClassifierModel:
    h, w, _ = input_shape
    if arch != "mlp-2" and (h % 4 or w % 4):
        raise ValueError(f"{arch} needs H and W divisible by 4, got {h}x{w}")
    rng = np.random.default_rng(seed)
    params = _init_params(arch, tuple(input_shape), num_classes, rng)
    return ClassifierModel(arch, params, num_classes, tuple(input_shape))


# ---------------------------------------------------------------- adversarial loss


@dataclass(frozen=True)
class AdvLossSpec:
    epsilon: float
    target: int | None = None  # None: untargeted

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.target is not None and self.target < 0:
            raise ValueError(f"target class must be non-negative, got {self.target}")

    @property
    def targeted(self) -> bool:
        return self.target is not None

    @property
    def mode(self) -> str:
        return "untargeted" if self.target is None else f"targeted:{self.target}"

    @classmethod
    def parse(cls, mode: str, epsilon: float) -> "AdvLossSpec":
        if mode == "untargeted":
            return cls(epsilon)
        if mode.startswith("targeted:"):
            return cls(epsilon, int(mode.split(":", 1)[1]))
        raise ValueError(f"mode must be 'untargeted' or 'targeted:<t>', got {mode!r}")

    def check_classes(self, num_classes: int) -> None:
        if self.target is not None and not 0 <= self.target < num_classes:
            raise ValueError(f"target {self.target} outside [0, {num_classes})")


def margin(logits: np.ndarray, y: int | np.ndarray, spec: AdvLossSpec) -> np.ndarray:
    """The hinge argument: positive while the attack goal is not met."""
    logits = np.atleast_2d(logits)
    n, k = logits.shape
    ref = np.full(n, spec.target) if spec.targeted else np.broadcast_to(np.asarray(y), (n,))
    ref_score = logits[np.arange(n), ref]
    others = logits.copy()
    others[np.arange(n), ref] = -np.inf
    best_other = others.max(axis=1)
    return best_other - ref_score if spec.targeted else ref_score - best_other


def margin_tensor(logits: Tensor, y: np.ndarray, spec: AdvLossSpec) -> Tensor:
    n, k = logits.shape
    ref = np.full(n, spec.target) if spec.targeted else np.broadcast_to(np.asarray(y), (n,))
    rows = np.arange(n)
    mask = np.zeros((n, k))
    mask[rows, ref] = -1e30
    ref_score = logits[rows, ref]
    best_other = T.max(logits + mask, axis=1)
    return best_other - ref_score if spec.targeted else ref_score - best_other


def in_ball(eta: np.ndarray, epsilon: float) -> bool:
    return float(np.max(np.abs(eta))) <= epsilon + BALL_TOL


def hinge_loss(model, x: np.ndarray, y, etas: np.ndarray, spec: AdvLossSpec) -> np.ndarray:
    """Per-perturbation ``max(0, margin)`` with the ball indicator; ``etas`` is ``(N, H, W, C)``."""
    etas = np.asarray(etas, dtype=np.float64)
    out = np.full(len(etas), OUT_OF_BALL)
    ok = np.array([in_ball(e, spec.epsilon) for e in etas], dtype=bool)
    if ok.any():
        out[ok] = np.maximum(0.0, margin(model.logits(x + etas[ok]), y, spec))
    return out


class QueryOracle:
    """Score-only access to a hidden model; every loss evaluation costs one query.

    ``losses`` computes a generation in one forward pass but charges and
    reveals queries one at a time, stopping after the first zero when
    ``stop_at_zero`` is set, which is observationally identical to
    sequential calls.
    """

    def __init__(self, model, record: bool = False):
        self._model = model
        self.count = 0
        self.infeasible = 0
        self.record = record
        self.history: list[float] = []

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    @property
    def input_shape(self):
        return self._model.input_shape

    def _charge(self, x, etas, spec, values):
        for eta, v in zip(etas, values):
            self.count += 1
            adv = x + eta
            if adv.min() < -BALL_TOL or adv.max() > 1.0 + BALL_TOL or not in_ball(eta, spec.epsilon):
                self.infeasible += 1
            if self.record:
                self.history.append(float(v))

    def loss(self, x: np.ndarray, y: int, eta: np.ndarray, spec: AdvLossSpec) -> float:
        return self.losses(x, y, np.asarray(eta)[None], spec, stop_at_zero=False)[0]

    def losses(self, x: np.ndarray, y: int, etas: np.ndarray, spec: AdvLossSpec,
               stop_at_zero: bool = True, budget: int | None = None) -> list[float]:
        etas = np.asarray(etas, dtype=np.float64)
        if budget is not None:
            etas = etas[: max(0, budget)]
        if len(etas) == 0:
            return []
        values = hinge_loss(self._model, x, y, etas, spec)
        if stop_at_zero:
            hits = np.flatnonzero(values == 0.0)
            if hits.size:
                values = values[: hits[0] + 1]
        self._charge(x, etas[: len(values)], spec, values)
        return [float(v) for v in values]


def adv_loss(scorer, x: np.ndarray, y: int, eta: np.ndarray, spec: AdvLossSpec) -> float:
    """Hinge adversarial loss of one perturbation.

    ``scorer`` is a :class:`QueryOracle` (charged one query), a single model,
    or a sequence of models whose losses are averaged. Any out-of-ball
    perturbation returns :data:`OUT_OF_BALL`.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != np.shape(x):
        raise T.ShapeError("adv_loss", f"perturbation shape {eta.shape} != image shape {np.shape(x)}")
    if isinstance(scorer, QueryOracle):
        return scorer.loss(x, y, eta, spec)
    models = list(scorer) if isinstance(scorer, (list, tuple)) else [scorer]
    if not models:
        raise ValueError("adv_loss needs at least one model")
    values = [float(hinge_loss(m, x, y, eta[None], spec)[0]) for m in models]
    if any(math.isinf(v) for v in values):
        return OUT_OF_BALL
    return float(np.mean(values))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 3e-3
    batch: int = 64
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float | None
    final_loss: float
    losses: list[float] = field(default_factory=list)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n = logits.shape[0]
    picked = logits[np.arange(n), labels]
    return T.mean(T.logsumexp(logits, axis=1) - picked)


def accuracy(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    preds = np.concatenate([model.predict(images[i : i + batch]) for i in range(0, len(images), batch)])
    return float(np.mean(preds == labels))


def train_classifier(images: np.ndarray, labels: np.ndarray, arch: str, cfg: TrainConfig,
                     num_classes: int | None = None, test: tuple[np.ndarray, np.ndarray] | None = None,
                     callback: Callable[[int, float], None] | None = None
                     ) -> tuple[ClassifierModel, TrainReport]:
    """Minibatch Adam on softmax cross-entropy; deterministic given ``cfg.seed``."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    model = build_classifier(arch, images.shape[1:], num_classes, seed=cfg.seed)
    opt = T.Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            p = L.as_tensors(model.params, requires_grad=True)
            loss = cross_entropy(model.forward(Tensor(images[idx]), p), labels[idx])
            grads = T.grad(loss, p)
            if cfg.weight_decay:
                grads = {k: g + cfg.weight_decay * model.params[k] for k, g in grads.items()}
            opt.step(grads)
            total += loss.item() * len(idx)
        losses.append(total / len(images))
        if callback is not None:
            callback(epoch, losses[-1])
        log.debug("%s epoch %d loss %.4f", arch, epoch, losses[-1])
    report = TrainReport(
        train_accuracy=accuracy(model, images, labels),
        test_accuracy=None if test is None else accuracy(model, *test),
        final_loss=losses[-1] if losses else float("nan"),
        losses=losses,
    )
    log.info("trained %s: train acc %.3f test acc %s", arch, report.train_accuracy, report.test_accuracy)
    return model, report
