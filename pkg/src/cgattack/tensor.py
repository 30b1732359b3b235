"""Dense float64 arrays with eager, tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output records its parents and a closure mapping the output
gradient to the parents' gradients. :func:`backward` walks that tape in
reverse topological order.

Broadcasting follows numpy; gradients are summed back to the input shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "tanh",
    "exp",
    "log",
    "relu",
    "softplus",
    "sigmoid",
    "clip",
    "sum",
    "mean",
    "max",
    "logsumexp",
    "reshape",
    "transpose",
    "concat",
    "split",
    "logabsdet",
    "inv",
    "Adam",
    "check_gradient",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending op."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), "softplus", lambda g: (g * sig,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed only where no clamping happened."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError("matmul", str(exc)) from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), "matmul", backward_fn)


def logabsdet(a) -> Tensor:
    """``log|det A|`` over the last two axes (batched)."""
    a = _as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("logabsdet", f"expected square matrices, got {a.shape}")
    _, value = np.linalg.slogdet(a.data)

    def backward_fn(g):
        inv_t = np.swapaxes(np.linalg.inv(a.data), -1, -2)
        return (np.asarray(g)[..., None, None] * inv_t,)

    return _make(value, (a,), "logabsdet", backward_fn)


def inv(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("inv", f"expected square matrices, got {a.shape}")
    out = np.linalg.inv(a.data)

    def backward_fn(g):
        out_t = np.swapaxes(out, -1, -2)
        return (-(out_t @ g @ out_t),)

    return _make(out, (a,), "inv", backward_fn)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, b=None, padding: int | str = "same") -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is ``(N, C_in, H, W)``, ``w`` is ``(C_out, C_in, k, k)`` and the
    optional bias ``b`` has shape ``(C_out,)``. ``padding="same"`` keeps
    the spatial size for odd kernels.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in:
        raise ShapeError("conv2d", f"kernel expects {c_k} input channels, input has {c_in}")
    if kh != kw:
        raise ShapeError("conv2d", f"only square kernels supported, got {kh}x{kw}")
    k = kh
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("conv2d", "same padding needs an odd kernel")
        padding = k // 2
    padding = int(padding)
    xp = _pad(x.data, padding)
    oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", f"kernel {k} larger than padded input {xp.shape[2:]}")
    # (N, C, oh, ow, k, k) -> (N, oh, ow, C*k*k)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c_in * k * k)
    wmat = w.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({c_out},)")
        out = out + b.data
    out = out.transpose(0, 3, 1, 2)

    def backward_fn(g):
        g_nhwc = g.transpose(0, 2, 3, 1)
        gw = (g_nhwc.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k * k)).reshape(w.shape)
        gcols = (g_nhwc @ wmat).reshape(n, oh, ow, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + oh, j : j + ow] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, "conv2d", backward_fn)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(
        np.asarray(out),
        (a,),
        "sum",
        lambda g: (_expand_reduced(np.asarray(g), a.shape, axes, keepdims).copy(),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties send the gradient to the first maximiser."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=True)
    # first-occurrence mask along the flattened reduced axes
    moved = np.moveaxis(a.data, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    lead = moved.shape[: a.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    mask = np.moveaxis(onehot.reshape(moved.shape), tuple(range(a.ndim - len(axes), a.ndim)), axes)
    value = out if keepdims else out.squeeze(axis=axes)

    def backward_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * g,)

    return _make(np.asarray(value), (a,), "max", backward_fn)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    value = out if keepdims else out.squeeze(axis=axis)

    def backward_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (soft * g,)

    return _make(np.asarray(value), (a,), "logsumexp", backward_fn)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (np.asarray(g).reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a, sections: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    a = _as_tensor(a)
    if int(np.sum(sections)) != a.shape[axis]:
        raise ShapeError("split", f"sections {list(sections)} do not cover axis of size {a.shape[axis]}")
    out, start = [], 0
    for n in sections:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        out.append(_getitem(a, tuple(index)))
        start += n
    return out


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), "getitem", backward_fn)


# ---------------------------------------------------------------- differentiation


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed: float = 1.0) -> None:
    """Accumulate ``d out / d leaf`` into ``leaf.grad`` for every leaf that requires it."""
    if out.data.size != 1:
        raise ShapeError("backward", f"output must be scalar, got shape {out.shape}")
    if not out.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(out): np.full(out.shape, seed)}
    for node in reversed(_topological(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad(out: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``out`` w.r.t. named leaves; unreachable leaves get zeros."""
    for t in wrt.values():
        t.grad = None
    backward(out)
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in wrt.items()}


class Adam:
    """Adam over a dict of named numpy arrays, updated in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def check_gradient(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], step: float = 1e-5,
                   atol: float = 1e-7) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps input Tensors to a scalar Tensor. Relative error is taken
    elementwise as ``|a - n| / max(|a|, |n|, atol)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    out = fn(*leaves)
    backward(out)
    worst = 0.0
    for leaf, x in zip(leaves, arrays):
        analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - step
            f_minus = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        worst = np.maximum(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return float(worst)
