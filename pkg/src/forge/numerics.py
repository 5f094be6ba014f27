"""Dense tensors with reverse-mode gradients.

A deliberately small engine: numpy arrays underneath, a closure per op for
the backward pass, and exactly the operators the networks in this package
need (MLPs, same-padded 1D convolutions, gated linear recurrences).
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_CHECKED = False
_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (float64 for gradient checks)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def checked_mode(on: bool = True):
    global _CHECKED
    old, _CHECKED = _CHECKED, on
    try:
        yield
    finally:
        _CHECKED = old


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def default_dtype():
    return _DTYPE


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Named, seeded random stream. Same (seed, names) -> same draws."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        if isinstance(n, (int, np.integer)):
            key.append(int(n) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(n).encode()))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    if _CHECKED and not np.all(np.isfinite(data)):
        raise ValueError("non-finite values produced")
    out.data = data
    out.name = None
    live = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = live
    out._parents = tuple(parents) if live else ()
    out._backward = backward if live else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _node(x.data * m, (x,), lambda g: (g * m,))


def activation_silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _node(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


silu = activation_silu


# reductions and shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(np.stack([x.data for x in xs], axis=axis), xs, back)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index(x: Tensor, idx) -> Tensor:
    shape, dt = x.shape, x.data.dtype
    basic = _is_basic(idx)

    def back(g):
        out = np.zeros(shape, dtype=dt)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(np.asarray(x.data[idx]), (x,), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes of 3-D operands are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), back)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, channels_last: bool = False) -> Tensor:
    """Same-padded 1D convolution (cross-correlation).

    x: (C_in, L) or (N, C_in, L), or (L, C_in) / (N, L, C_in) with
    ``channels_last``; kernels: (C_out, C_in, K) with K odd. Borders are
    zero-padded so the output keeps length L and the input layout.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if x.ndim not in (2, 3):
        raise DimensionError(f"conv1d expects a 2D or 3D input, got shape {x.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if not channels_last:
        xd = xd.transpose(0, 2, 1)
    n, length, cx = xd.shape
    if cx != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got {cx}")
    if length < 1:
        raise DimensionError("conv1d needs L >= 1")
    pad = k // 2
    lp = length + 2 * pad
    xp = np.zeros((n, lp, c_in), dtype=xd.dtype)
    xp[:, pad : pad + length] = xd
    xflat = xp.reshape(n * lp, c_in)
    # wcat[:, j*C_out:(j+1)*C_out] = W[:, :, j].T; one matmul covers every tap
    wd = kernels.data
    wcat = wd.transpose(1, 2, 0).reshape(c_in, k * c_out)
    y = (xflat @ wcat).reshape(n, lp, k, c_out)
    out = y[:, 0:length, 0].copy()
    for j in range(1, k):
        out += y[:, j : j + length, j]
    if bias is not None:
        out += bias.data
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def _layout(a):
        a = a if channels_last else a.transpose(0, 2, 1)
        return a[0] if squeeze else a

    def back(g):
        g3 = g[None] if squeeze else g
        if not channels_last:
            g3 = g3.transpose(0, 2, 1)
        # spread the output gradient back onto each tap's shifted rows
        gy = np.zeros((n, lp, k, c_out), dtype=g3.dtype)
        for j in range(k):
            gy[:, j : j + length, j] = g3
        gy = gy.reshape(n * lp, k * c_out)
        gw = None
        if kernels.requires_grad:
            gw = (xflat.T @ gy).reshape(c_in, k, c_out).transpose(2, 0, 1)
        gx = None
        if x.requires_grad:
            gx = _layout((gy @ wcat.T).reshape(n, lp, c_in)[:, pad : pad + length])
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 1))

    return _node(np.ascontiguousarray(_layout(out)), parents, back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def back(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _node(y, parents, back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    z = logits.data
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)
    n = z.shape[0]
    rows = np.arange(n)
    loss = -np.log(p[rows, labels] + 1e-30).mean()

    def back(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        return (gz * (g / n),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), back)


# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. trainable leaves.

    Returns a map from each reachable trainable leaf to its gradient. Leaves
    passed in ``params`` that the loss does not reach map to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[node] = leaves[node] + g if node in leaves else g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + gp if key in grads else gp
    if params is not None:
        out = {}
        for p in params:
            out[p] = np.asarray(leaves.get(p, np.zeros_like(p.data)), dtype=p.data.dtype).reshape(p.shape)
        return out
    return {p: np.asarray(g, dtype=p.data.dtype).reshape(p.shape) for p, g in leaves.items()}


class Adam:
    """Adam with bias correction and optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        gs = [grads.get(p) for p in self.params]
        if self.clip is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in gs if g is not None))
            if total > self.clip:
                gs = [None if g is None else g * (self.clip / total) for g in gs]
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, gs)):
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)
