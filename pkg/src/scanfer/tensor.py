"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` orders the recorded graph
topologically and replays the closures in reverse, so each operation is
visited exactly once per call.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "BatchNorm2d",
    "no_grad",
    "conv2d",
    "conv1d_channels",
    "batchnorm2d",
    "prelu",
    "sigmoid",
    "gap_spatial",
    "max_over_set",
    "linear",
    "concat",
    "softmax_cross_entropy",
    "finite_diff_check",
    "glorot_uniform",
    "inject_grad_fault",
    "record_branches",
    "smooth_indices",
]

_GRAD_ENABLED = True
# test hook: multiplies the sigmoid input-gradient, see ``inject_grad_fault``
_SIGMOID_GRAD_FAULT = 1.0

# when a list, prelu/max_over_set append the branch they took (sign masks, winners)
_BRANCH_LOG: list[np.ndarray] | None = None

_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


@contextlib.contextmanager
def record_branches():
    """Collect the piecewise branch choices made by prelu and max_over_set."""
    global _BRANCH_LOG
    prev = _BRANCH_LOG
    _BRANCH_LOG = []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_grad_fault(factor: float = 1.01):
    """Corrupt the sigmoid backward pass by ``factor`` (negative control for gradient checks)."""
    global _SIGMOID_GRAD_FAULT
    prev = _SIGMOID_GRAD_FAULT
    _SIGMOID_GRAD_FAULT = float(factor)
    try:
        yield
    finally:
        _SIGMOID_GRAD_FAULT = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division is only supported by plain scalars")
        return self * (1.0 / float(scalar))

    def __getitem__(self, index):
        src_shape = self.shape

        def backward(g):
            full = np.zeros(src_shape)
            if _has_advanced(index):
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(src_shape),)
        )

    def sum(self):
        src_shape = self.shape
        return Tensor._from_op(
            np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, src_shape).copy(),)
        )

    def mean(self):
        n = self.size
        return self.sum() * (1.0 / n)

    # -- differentiation --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _same_padding(k: int) -> int:
    if k % 2 == 0:
        raise ShapeError(f"'same' padding needs an odd kernel, got {k}")
    return (k - 1) // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation over ``C_in x H x W`` (or batched ``N x C_in x H x W``) input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D/4-D input and 4-D weight, got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"weight expects {wc_in} input channels, input has {c_in}")
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    k = kh
    if padding == "same":
        pad = _same_padding(k)
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < k or wp < k:
        raise ShapeError(f"kernel {k} larger than padded input {hp}x{wp}")
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # (N, Ho, Wo, C_out) -> (N, C_out, Ho, Wo)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    w_data = weight.data

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, w_data, axes=([1], [0]))  # N, Ho, Wo, C_in, k, k
        gxp = np.zeros((n, c_in, hp, wp))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    result = Tensor._from_op(out, parents, backward)
    return result.reshape(result.shape[1:]) if squeeze else result


def conv1d_channels(d: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 'same' 1-D cross-correlation along the last axis, no bias."""
    (k,) = kernel.shape
    pad = _same_padding(k)
    c = d.shape[-1]
    dp = np.pad(d.data, [(0, 0)] * (d.ndim - 1) + [(pad, pad)])
    kd = kernel.data
    out = np.zeros(d.shape)
    for j in range(k):
        out += kd[j] * dp[..., j:j + c]

    def backward(g):
        gdp = np.zeros(dp.shape)
        gk = np.empty(k)
        for j in range(k):
            gdp[..., j:j + c] += kd[j] * g
            gk[j] = np.sum(g * dp[..., j:j + c])
        return gdp[..., pad:pad + c], gk

    return Tensor._from_op(out, (d, kernel), backward)


# ---------------------------------------------------------------------------
# normalisation and activations
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalisation of ``N x C x H x W`` input.

    In training mode the batch statistics (biased variance) normalise the
    input and ``running_mean``/``running_var`` are updated in place.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects N x C x H x W, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta length must equal channel count")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        axes = (0, 2, 3)
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = ((xd - mu[None, :, None, None]) ** 2).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = (inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            gx = g * gd * inv_std[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data[None, :, None, None]
    return Tensor._from_op(out, (x, gamma, beta), backward)


@dataclass
class BatchNorm2d:
    """Learnable affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int) -> "BatchNorm2d":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.eps, self.momentum)


def _channel_view(param: np.ndarray, ndim: int) -> np.ndarray:
    if ndim >= 2:
        return param.reshape((1, -1) + (1,) * (ndim - 2))
    return param


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1; axis 0 for vectors)."""
    xd = x.data
    channels = xd.shape[1] if xd.ndim >= 2 else xd.shape[0]
    if slope.ndim != 1 or slope.shape[0] not in (1, channels):
        raise ShapeError(f"slope length {slope.shape} does not match {channels} channels")
    a = _channel_view(slope.data, xd.ndim)
    neg = xd < 0
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(neg)
    out = np.where(neg, a * xd, xd)

    def backward(g):
        gx = np.where(neg, a * g, g)
        gs = _unbroadcast(np.where(neg, g * xd, 0.0), a.shape).reshape(slope.shape)
        return gx, gs

    return Tensor._from_op(out, (x, slope), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1)."""
    s = np.clip(expit(x.data), _TINY, _ONE_MINUS)

    def backward(g):
        return (g * s * (1.0 - s) * _SIGMOID_GRAD_FAULT,)

    return Tensor._from_op(s, (x,), backward)


def gap_spatial(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    if x.ndim < 2:
        raise ShapeError("gap_spatial needs at least two spatial axes")
    h, w = x.shape[-2], x.shape[-1]
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward)


def max_over_set(vectors: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum across a set of equally shaped tensors.

    The gradient goes to the first tensor holding the maximum.
    """
    if len(vectors) == 0:
        raise ValueError("max_over_set needs at least one tensor")
    shape = vectors[0].shape
    if any(v.shape != shape for v in vectors):
        raise ShapeError("all tensors in the set must share one shape")
    stacked = np.stack([v.data for v in vectors])
    winner = np.argmax(stacked, axis=0)
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(winner)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward(g):
        return [np.where(winner == i, g, 0.0) for i in range(len(vectors))]

    return Tensor._from_op(out, tuple(vectors), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(out, tuple(tensors), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``N x K`` logits (or one ``K`` vector) against class indices."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    k = z2.shape[1]
    if y.shape != (z2.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {z2.shape[0]} logit rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    m = z2.max(axis=1, keepdims=True)
    shifted = z2 - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, y].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        p *= g / z2.shape[0]
        return (p[0] if single else p,)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Iterable[int] | None = None) -> float:
    """Largest relative gap between the analytic gradient and central differences.

    ``f`` must rebuild its graph from ``x.data`` on every call. Only the
    flat ``indices`` given are probed (all elements by default).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not x.requires_grad:
        raise ValueError("x must require grad")
    saved = x.grad
    x.grad = None
    f(x).backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = saved

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst


def smooth_indices(f: Callable[[Tensor], Tensor], x: Tensor, h: float,
                   candidates: Iterable[int], limit: int | None = None) -> list[int]:
    """Flat indices of ``x`` whose +-h probes keep every prelu/max branch unchanged.

    Central differences straddling a kink do not estimate the derivative, so
    gradient checks should only probe these indices.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)

    def pattern():
        with no_grad(), record_branches() as log:
            f(x)
        return log

    base = pattern()
    keep: list[int] = []
    for i in candidates:
        orig = flat[i]
        smooth = True
        for delta in (h, -h):
            flat[i] = orig + delta
            probe = pattern()
            flat[i] = orig
            if len(probe) != len(base) or any(not np.array_equal(a, b) for a, b in zip(probe, base)):
                smooth = False
                break
        if smooth:
            keep.append(int(i))
            if limit is not None and len(keep) >= limit:
                break
    return keep
