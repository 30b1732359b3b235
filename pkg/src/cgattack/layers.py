"""Parameter initialisers and small layer functions over named parameter dicts."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_dense(params: dict, name: str, n_in: int, n_out: int, rng: np.random.Generator,
               zero: bool = False, bias: bool = True, scale: float = 1.0) -> None:
    if zero:
        params[f"{name}.w"] = np.zeros((n_in, n_out))
    else:
        params[f"{name}.w"] = rng.normal(0.0, scale * np.sqrt(2.0 / n_in), size=(n_in, n_out))
    if bias:
        params[f"{name}.b"] = np.zeros(n_out)


def init_conv(params: dict, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
              zero: bool = False, bias: bool = True, scale: float = 1.0) -> None:
    if zero:
        params[f"{name}.w"] = np.zeros((c_out, c_in, k, k))
    else:
        fan_in = c_in * k * k
        params[f"{name}.w"] = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    if bias:
        params[f"{name}.b"] = np.zeros(c_out)


def dense(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    out = T.matmul(x, p[f"{name}.w"])
    b = p.get(f"{name}.b")
    return out if b is None else out + b


def conv(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}.w"], p.get(f"{name}.b"), padding="same")


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise T.ShapeError("avg_pool2", f"spatial size {h}x{w} not divisible by 2")
    return T.mean(T.reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


def flatten(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0], -1))


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def checksum(params: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()
