"""Orthonormal 2-D DCT-II / DCT-III and the low-frequency subspace.

Transforms act on the last two axes, so a ``(C, d, d)`` stack is handled
channel by channel without mixing channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def dct_matrix(d: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``T`` with ``coeffs = T @ x`` for a length-``d`` signal."""
    if d < 1:
        raise ValueError(f"DCT size must be positive, got {d}")
    n = np.arange(d)
    t = np.cos(np.pi / d * (n[None, :] + 0.5) * n[:, None])
    t[0] *= np.sqrt(1.0 / d)
    t[1:] *= np.sqrt(2.0 / d)
    t.setflags(write=False)
    return t


def _check_square(plane: np.ndarray) -> int:
    if plane.ndim < 2 or plane.shape[-1] != plane.shape[-2]:
        raise ValueError(f"expected square planes in the last two axes, got {plane.shape}")
    return plane.shape[-1]


def dct2(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    t = dct_matrix(_check_square(plane))
    return t @ plane @ t.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    t = dct_matrix(_check_square(coeffs))
    return t.T @ coeffs @ t


def reduce(coeffs: np.ndarray, d_r: int) -> np.ndarray:
    """Keep the top-left ``d_r x d_r`` (low-frequency) block."""
    d = _check_square(coeffs)
    if not 1 <= d_r <= d:
        raise ValueError(f"reduced size {d_r} outside [1, {d}]")
    return np.array(coeffs[..., :d_r, :d_r], dtype=np.float64)


def expand(reduced: np.ndarray, d: int) -> np.ndarray:
    """Zero-pad a ``d_r x d_r`` block back to ``d x d``."""
    d_r = _check_square(reduced)
    if d_r > d:
        raise ValueError(f"reduced size {d_r} exceeds full size {d}")
    out = np.zeros(reduced.shape[:-2] + (d, d))
    out[..., :d_r, :d_r] = reduced
    return out


def reduced_size(d: int, r: float) -> int:
    if not 0.0 < r <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {r}")
    return int(min(d, max(1, round(r * d))))


@dataclass(frozen=True)
class DctSubspace:
    """Low-frequency DCT block of side ``d_r = round(r * d)`` for ``C``-channel images."""

    d: int
    r: float
    channels: int

    @property
    def d_r(self) -> int:
        return reduced_size(self.d, self.r)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.d_r, self.d_r)

    def encode(self, image_hwc: np.ndarray) -> np.ndarray:
        """``(..., d, d, C)`` image -> ``(..., C, d_r, d_r)`` low-frequency coefficients."""
        chw = np.moveaxis(np.asarray(image_hwc, dtype=np.float64), -1, -3)
        return reduce(dct2(chw), self.d_r)

    def decode(self, reduced_chw: np.ndarray) -> np.ndarray:
        """``(..., C, d_r, d_r)`` coefficients -> ``(..., d, d, C)`` image-space array."""
        plane = idct2(expand(np.asarray(reduced_chw, dtype=np.float64), self.d))
        return np.moveaxis(plane, -3, -1)

    def basis(self) -> np.ndarray:
        """``(d_r*d_r, d*d)`` matrix mapping flattened coefficients to one flattened plane."""
        t = dct_matrix(self.d)[: self.d_r]
        # plane = t.T @ c @ t  =>  plane[i, j] = sum_{a,b} t[a, i] c[a, b] t[b, j]
        return np.einsum("ai,bj->abij", t, t).reshape(self.d_r * self.d_r, self.d * self.d)
