"""Maps between the flow's latent tensor and image-space perturbations.

A decoder provides the flow condition for an image, and turns a
``(N, C, d_r, d_r)`` latent into an ``(N, H, W, C)`` perturbation, both as
numpy and as a differentiable Tensor op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dct import DctSubspace
from .tensor import Tensor


def default_scale(epsilon: float, d: int, d_r: int) -> float:
    """Coefficient scale giving pixel std ``epsilon / 3`` for a standard-normal latent."""
    return epsilon * d / (3.0 * d_r)


@dataclass(frozen=True)
class DctDecoder:
    """``eta = scale * IDCT(zero_pad(latent))`` per channel; the condition is the
    low-frequency block of the centred image, rescaled to pixel units."""

    d: int
    r: float
    channels: int
    scale: float

    @property
    def subspace(self) -> DctSubspace:
        return DctSubspace(self.d, self.r, self.channels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.subspace.latent_shape

    @property
    def cond_channels(self) -> int:
        return self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.d, self.d, self.channels)

    def condition(self, x: np.ndarray) -> np.ndarray:
        sub = self.subspace
        return sub.encode(np.asarray(x) - 0.5) * (sub.d_r / self.d)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self.scale * self.subspace.decode(latent)

    def decode_t(self, latent: Tensor) -> Tensor:
        n, c, dr, _ = latent.shape
        basis = self.subspace.basis()
        flat = T.matmul(T.reshape(latent, (n * c, dr * dr)), basis)
        img = T.transpose(T.reshape(flat, (n, c, self.d, self.d)), (0, 2, 3, 1))
        return img * self.scale

    def to_dict(self) -> dict:
        return {"kind": "dct", "d": self.d, "r": self.r, "channels": self.channels, "scale": self.scale}


@dataclass(frozen=True)
class VectorDecoder:
    """Low-dimensional toy: latent ``(C, 1, 1)`` is the image ``(1, 1, C)`` itself,
    and every image shares a constant unit condition."""

    channels: int
    scale: float = 1.0

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, 1, 1)

    @property
    def cond_channels(self) -> int:
        return 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (1, 1, self.channels)

    def condition(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.ones(x.shape[:-3] + (1, 1, 1))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self.scale * np.moveaxis(np.asarray(latent, dtype=np.float64), -3, -1)

    def decode_t(self, latent: Tensor) -> Tensor:
        return T.transpose(latent, (0, 2, 3, 1)) * self.scale

    def to_dict(self) -> dict:
        return {"kind": "vector", "channels": self.channels, "scale": self.scale}


def decoder_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "dct":
        return DctDecoder(int(d["d"]), float(d["r"]), int(d["channels"]), float(d["scale"]))
    if kind == "vector":
        return VectorDecoder(int(d["channels"]), float(d.get("scale", 1.0)))
    raise ValueError(f"unknown decoder kind {kind!r}")
