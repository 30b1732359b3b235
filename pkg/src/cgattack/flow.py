"""Conditional Glow-style flow over the reduced DCT latent.

The generative direction maps a standard-normal draw ``z0`` to a
perturbation ``eta``::

    z   = mu + sigma * z0                 # base layer, independent of x
    eta = block_M(...block_1(z; x)...; x)

Each block applies, in order, a conditional actnorm, a conditional channel
mixing ``W(x) = I + U(x)`` and a conditional affine coupling. All
conditioning nets end in zero-initialised layers, so a fresh flow is the
identity on ``z``.

Parameters live in one flat dict. Keys under ``base.`` are the Gaussian
``(mu, log_sigma)``; every other key belongs to the mapping ``phi``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_ABS_DET = 1e-12


class FlowSingularError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    latent_shape: tuple[int, int, int]  # (C, d_r, d_r)
    cond_channels: int
    num_blocks: int = 3
    hidden: int = 32  # width of the actnorm / mixing conditioning MLPs, 0 = linear
    coupling_hidden: int = 16  # width of the coupling conv net, 0 = single conv
    kernel: int = 3
    alpha: float = 2.0  # coupling log-scale bound
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(v) for v in self.latent_shape))
        if self.num_blocks < 1:
            raise ValueError("a flow needs at least one block")
        c, h, w = self.latent_shape
        if h != w:
            raise ValueError(f"latent must be square, got {self.latent_shape}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.latent_shape))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlowConfig":
        return cls(**{**d, "latent_shape": tuple(d["latent_shape"])})


def _coupling_split(cfg: FlowConfig, block: int):
    """Passive/active channel indices, or a checkerboard mask for single-channel latents."""
    c, d, _ = cfg.latent_shape
    if c == 1:
        ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        mask = ((ii + jj + block) % 2 == 0).astype(np.float64)
        return None, None, mask[None, None]
    half = c // 2
    order = np.arange(c) if block % 2 == 0 else np.arange(c)[::-1]
    passive, active = np.sort(order[:half]), np.sort(order[half:])
    return passive, active, None


class CondFlow:
    def __init__(self, config: FlowConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # ------------------------------------------------------------ construction

    @classmethod
    def create(cls, config: FlowConfig, seed: int = 0, identity: bool = True,
               scale: float = 0.3) -> "CondFlow":
        """Fresh flow; ``identity=False`` gives small random final layers instead of zeros."""
        rng = np.random.default_rng(seed)
        c, d, _ = config.latent_shape
        cond_dim = config.cond_channels * d * d
        p: dict[str, np.ndarray] = {}
        zero = identity
        for i in range(config.num_blocks):
            for name, n_out in (("actnorm", 2 * c), ("mix", c * c)):
                pre = f"block{i}.{name}"
                if config.hidden:
                    L.init_dense(p, f"{pre}.fc1", cond_dim, config.hidden, rng, bias=config.bias)
                    L.init_dense(p, f"{pre}.fc2", config.hidden, n_out, rng, zero=zero,
                                 bias=config.bias, scale=scale)
                else:
                    L.init_dense(p, f"{pre}.fc2", cond_dim, n_out, rng, zero=zero,
                                 bias=config.bias, scale=scale)
            passive, active, mask = _coupling_split(config, i)
            c_in = (c if mask is not None else len(passive)) + config.cond_channels
            c_out = 2 * (c if mask is not None else len(active))
            pre = f"block{i}.coupling"
            k = config.kernel
            if config.coupling_hidden:
                L.init_conv(p, f"{pre}.conv1", c_in, config.coupling_hidden, k, rng, bias=config.bias)
                L.init_conv(p, f"{pre}.conv2", config.coupling_hidden, c_out, k, rng, zero=zero,
                            bias=config.bias, scale=scale)
            else:
                L.init_conv(p, f"{pre}.conv2", c_in, c_out, k, rng, zero=zero,
                            bias=config.bias, scale=scale)
        p["base.mu"] = np.zeros(config.latent_shape)
        p["base.log_sigma"] = np.zeros(config.latent_shape)
        return cls(config, p)

    def copy(self) -> "CondFlow":
        return CondFlow(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def phi_keys(self) -> list[str]:
        return [k for k in self.params if not k.startswith("base.")]

    @property
    def phi(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in self.phi_keys}

    @property
    def mu(self) -> np.ndarray:
        return self.params["base.mu"]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.params["base.log_sigma"])

    def set_base(self, mu: np.ndarray, sigma: np.ndarray) -> None:
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        self.params["base.mu"] = np.broadcast_to(mu, self.config.latent_shape).astype(np.float64)
        self.params["base.log_sigma"] = np.log(np.broadcast_to(sigma, self.config.latent_shape))

    def with_identity_blocks(self) -> "CondFlow":
        """Same base Gaussian, mapping layers reset to the identity."""
        fresh = CondFlow.create(self.config)
        fresh.params["base.mu"] = self.mu.copy()
        fresh.params["base.log_sigma"] = self.params["base.log_sigma"].copy()
        return fresh

    # ------------------------------------------------------------ batching helpers

    def _prep(self, cond: np.ndarray, latent, n: int | None = None):
        c, d, _ = self.config.latent_shape
        lat = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float64)
        if lat.shape[-3:] != self.config.latent_shape:
            raise T.ShapeError("flow", f"latent shape {lat.shape[-3:]} != {self.config.latent_shape}")
        cond = np.asarray(cond, dtype=np.float64)
        cshape = (self.config.cond_channels, d, d)
        if cond.shape[-3:] != cshape:
            raise T.ShapeError("flow", f"condition shape {cond.shape[-3:]} != {cshape}")
        n = lat.shape[0] if lat.ndim == 4 else 1
        if cond.ndim == 3:
            cond = np.broadcast_to(cond, (n,) + cshape)
        elif cond.shape[0] != n:
            raise T.ShapeError("flow", f"{cond.shape[0]} conditions for {n} latents")
        return Tensor(cond)

    # ------------------------------------------------------------ conditioning nets

    def _mlp(self, p, pre: str, cond_flat: Tensor) -> Tensor:
        if self.config.hidden:
            return L.dense(T.tanh(L.dense(cond_flat, p, f"{pre}.fc1")), p, f"{pre}.fc2")
        return L.dense(cond_flat, p, f"{pre}.fc2")

    def _coupling_net(self, p, pre: str, inp: Tensor) -> Tensor:
        if self.config.coupling_hidden:
            return L.conv(T.relu(L.conv(inp, p, f"{pre}.conv1")), p, f"{pre}.conv2")
        return L.conv(inp, p, f"{pre}.conv2")

    def _block_terms(self, p, i: int, cond: Tensor):
        """Condition-only quantities of block ``i``: actnorm (log_s, b) and mixing matrix ``W``."""
        c, d, _ = self.config.latent_shape
        n = cond.shape[0]
        flat = T.reshape(cond, (n, -1))
        an = self._mlp(p, f"block{i}.actnorm", flat)
        log_s = T.tanh(an[:, :c])
        bias = an[:, c:]
        u = T.reshape(self._mlp(p, f"block{i}.mix", flat), (n, c, c))
        w = u + np.eye(c)
        if np.any(np.abs(np.linalg.det(w.data)) <= MIN_ABS_DET):
            raise FlowSingularError(f"block {i}: mixing matrix is singular")
        return log_s, bias, w

    def _coupling_params(self, p, i: int, h_passive_in: Tensor, cond: Tensor, passive, active, mask):
        pre = f"block{i}.coupling"
        inp = T.concat([h_passive_in, cond], axis=1)
        out = self._coupling_net(p, pre, inp)
        ca = out.shape[1] // 2
        raw_s, t = out[:, :ca], out[:, ca:]
        s = T.tanh(raw_s) * self.config.alpha
        if mask is not None:
            s = s * (1.0 - mask)
            t = t * (1.0 - mask)
        return s, t

    # ------------------------------------------------------------ directions

    def _blocks_forward(self, p, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        c, d, _ = self.config.latent_shape
        n = z.shape[0]
        h = z
        logdet = Tensor(np.zeros(n))
        area = float(d * d)
        for i in range(self.config.num_blocks):
            log_s, bias, w = self._block_terms(p, i, cond)
            h = h * T.reshape(T.exp(log_s), (n, c, 1, 1)) + T.reshape(bias, (n, c, 1, 1))
            logdet = logdet + area * T.sum(log_s, axis=1)
            h = T.reshape(T.matmul(w, T.reshape(h, (n, c, d * d))), (n, c, d, d))
            logdet = logdet + area * T.logabsdet(w)
            passive, active, mask = _coupling_split(self.config, i)
            if mask is not None:
                s, t = self._coupling_params(p, i, h * mask, cond, passive, active, mask)
                h = h * T.exp(s) + t
            else:
                hp, ha = h[:, passive], h[:, active]
                s, t = self._coupling_params(p, i, hp, cond, passive, active, mask)
                ha = ha * T.exp(s) + t
                inverse_order = np.argsort(np.concatenate([passive, active]))
                h = T.concat([hp, ha], axis=1)[:, inverse_order]
            logdet = logdet + T.sum(s, axis=(1, 2, 3))
        return h, logdet

    def _blocks_inverse(self, p, eta: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        c, d, _ = self.config.latent_shape
        n = eta.shape[0]
        h = eta
        logdet = Tensor(np.zeros(n))
        area = float(d * d)
        for i in reversed(range(self.config.num_blocks)):
            log_s, bias, w = self._block_terms(p, i, cond)
            passive, active, mask = _coupling_split(self.config, i)
            if mask is not None:
                s, t = self._coupling_params(p, i, h * mask, cond, passive, active, mask)
                h = (h - t) * T.exp(-s)
            else:
                hp, ha = h[:, passive], h[:, active]
                s, t = self._coupling_params(p, i, hp, cond, passive, active, mask)
                ha = (ha - t) * T.exp(-s)
                inverse_order = np.argsort(np.concatenate([passive, active]))
                h = T.concat([hp, ha], axis=1)[:, inverse_order]
            logdet = logdet - T.sum(s, axis=(1, 2, 3))
            h = T.reshape(T.matmul(T.inv(w), T.reshape(h, (n, c, d * d))), (n, c, d, d))
            logdet = logdet - area * T.logabsdet(w)
            h = (h - T.reshape(bias, (n, c, 1, 1))) * T.reshape(T.exp(-log_s), (n, c, 1, 1))
            logdet = logdet - area * T.sum(log_s, axis=1)
        return h, logdet

    def _params(self, params):
        return L.as_tensors(self.params) if params is None else params

    @staticmethod
    def _batch(x) -> tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim == 3:
            return T.reshape(t, (1,) + t.shape), True
        return t, False

    def forward_t(self, z0, cond, params: Mapping[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        """Tensor-level ``z0 -> (eta, logdet)`` through the base layer and all blocks."""
        p = self._params(params)
        z0, _ = self._batch(z0)
        cond_t = self._prep(cond, z0)
        z = p["base.mu"] + T.exp(p["base.log_sigma"]) * z0
        base_ld = T.sum(p["base.log_sigma"]) * np.ones(z0.shape[0])
        eta, ld = self._blocks_forward(p, z, cond_t)
        return eta, ld + base_ld

    def blocks_forward_t(self, z, cond, params=None) -> tuple[Tensor, Tensor]:
        """Tensor-level ``z -> (eta, logdet)`` through the mapping blocks only."""
        p = self._params(params)
        z, _ = self._batch(z)
        return self._blocks_forward(p, z, self._prep(cond, z))

    def inverse_t(self, eta, cond, params=None) -> tuple[Tensor, Tensor]:
        p = self._params(params)
        eta, _ = self._batch(eta)
        cond_t = self._prep(cond, eta)
        z, ld = self._blocks_inverse(p, eta, cond_t)
        z0 = (z - p["base.mu"]) * T.exp(-p["base.log_sigma"])
        return z0, ld - T.sum(p["base.log_sigma"]) * np.ones(eta.shape[0])

    def log_prob_t(self, eta, cond, params=None) -> Tensor:
        z0, ld = self.inverse_t(eta, cond, params)
        n = z0.shape[0]
        dim = self.config.dim
        return -0.5 * T.sum(z0 * z0, axis=(1, 2, 3)) - 0.5 * dim * LOG_2PI + ld

    # ------------------------------------------------------------ numpy API

    def forward(self, z0: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        single = np.ndim(z0) == 3
        eta, ld = self.forward_t(z0, cond)
        return (eta.data[0], float(ld.data[0])) if single else (eta.data, ld.data)

    def blocks_forward(self, z: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        single = np.ndim(z) == 3
        eta, ld = self.blocks_forward_t(z, cond)
        return (eta.data[0], float(ld.data[0])) if single else (eta.data, ld.data)

    def inverse(self, eta: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        single = np.ndim(eta) == 3
        z0, ld = self.inverse_t(eta, cond)
        return (z0.data[0], float(ld.data[0])) if single else (z0.data, ld.data)

    def log_prob(self, eta: np.ndarray, cond: np.ndarray):
        single = np.ndim(eta) == 3
        lp = self.log_prob_t(eta, cond).data
        return float(lp[0]) if single else lp

    def sample(self, cond: np.ndarray, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        if n < 1:
            raise ValueError("need at least one sample")
        z0 = rng.standard_normal((n,) + self.config.latent_shape)
        return self.forward(z0, cond)[0]


def standard_normal_logpdf(z0: np.ndarray) -> np.ndarray:
    z0 = np.asarray(z0)
    flat = z0.reshape(z0.shape[0], -1)
    return -0.5 * np.sum(flat * flat, axis=1) - 0.5 * flat.shape[1] * LOG_2PI
