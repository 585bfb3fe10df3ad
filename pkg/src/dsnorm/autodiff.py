"""Reverse-mode differentiable tensor engine on top of numpy arrays.

Every value is a `Tensor` wrapping a float64 ndarray. Operations record a
backward closure and their input tensors; `Tensor.backward()` replays those
closures in exact reverse execution order (tensors carry a monotonically
increasing creation id, and a node's inputs are always created before the
node itself, so descending-id order is a valid adjoint schedule).

Only the primitives the 1D residual networks need are implemented: basic
arithmetic, reductions, reshape/slice/concat, 1D cross-correlation, the
dense layer, exact-CDF GELU, sigmoid, dropout, softmax, and cross entropy.
All math is double precision.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

from .errors import ContractViolationError, DimensionError, ParameterError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ids = itertools.count()


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff.

    Tensors are treated as immutable values once created; gradients
    accumulate into `.grad` during `backward()`.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)
        self._backward_done = False

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable input.

        Visits recorded operations in exact reverse execution order. Calling
        backward a second time on the same output is an error because the
        recorded closures reference state from the original forward pass.
        """
        if self.data.size != 1:
            raise ContractViolationError("backward() requires a scalar output")
        if self._backward_done:
            raise ContractViolationError(
                "backward() already ran for this output; run a new forward pass"
            )
        self._backward_done = True

        nodes: list[Tensor] = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._id, reverse=True)

        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._backward is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def sqrt(self):
        return tsqrt(self)

    def __repr__(self):
        grad = "grad" if self.requires_grad else "nograd"
        return f"Tensor(shape={self.data.shape}, {grad})"


class Parameter(Tensor):
    """A trainable tensor; gradient storage is always allocated."""

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result; only tracks the graph when some input needs grads."""
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward(out)
    return out


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.data.shape))

        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-out.grad, b.data.shape))

        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

        return run

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(
                    b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape)
                )

        return run

    return _make(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, -out.grad)

        return run

    return _make(-a.data, (a,), bw)


def tsqrt(a) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, out.grad * 0.5 / root)

        return run

    return _make(root, (a,), bw)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, out.grad * e)

        return run

    return _make(e, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, out.grad * s * (1.0 - s))

        return run

    return _make(s, (a,), bw)


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit x * Phi(x), no tanh approximation."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bw(out):
        def run():
            if a.requires_grad:
                pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
                _accumulate(a, out.grad * (cdf + a.data * pdf))

        return run

    return _make(a.data * cdf, (a,), bw)


# -- reductions and shape ops -------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axes)
                _accumulate(a, np.broadcast_to(g, a.data.shape))

        return run

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axes)
                _accumulate(a, np.broadcast_to(g / count, a.data.shape))

        return run

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                _accumulate(a, out.grad.reshape(a.data.shape))

        return run

    return _make(a.data.reshape(shape), (a,), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along `axis`."""
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                _accumulate(a, g)

        return run

    return _make(a.data[index], (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    extents = [t.data.shape[axis] for t in tensors]

    def bw(out):
        def run():
            offset = 0
            for t, extent in zip(tensors, extents):
                if t.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(offset, offset + extent)
                    _accumulate(t, out.grad[tuple(index)])
                offset += extent

        return run

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- neural-network primitives ------------------------------------------


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation (no kernel flip) with stride and zero padding.

    Shapes: x [B, C_in, T], weight [C_out, C_in, K], bias [C_out] or None.
    Output length is floor((T + 2*padding - K) / stride) + 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(
            f"conv1d expects 3D input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    batch, c_in, t_in = x.data.shape
    c_out, c_in_w, k = weight.data.shape
    if c_in != c_in_w:
        raise DimensionError(
            f"conv1d channel mismatch: input has {c_in}, weight expects {c_in_w}"
        )
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if t_in + 2 * padding < k:
        raise DimensionError(
            f"input length {t_in} with padding {padding} is shorter than kernel {k}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.data.shape} != ({c_out},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    t_out = (t_in + 2 * padding - k) // stride + 1

    cols = np.empty((batch, c_in, k, t_out), dtype=np.float64)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j : j + stride * t_out : stride]
    cols2 = cols.reshape(batch, c_in * k, t_out)
    w2 = weight.data.reshape(c_out, c_in * k)
    out_data = np.matmul(w2, cols2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            g = out.grad
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2)))
            if weight.requires_grad:
                gw = np.tensordot(g, cols2, axes=([0, 2], [0, 2]))
                _accumulate(weight, gw.reshape(weight.data.shape))
            if x.requires_grad:
                gcols = np.matmul(w2.T, g).reshape(batch, c_in, k, t_out)
                gxp = np.zeros((batch, c_in, t_in + 2 * padding), dtype=np.float64)
                for j in range(k):
                    gxp[:, :, j : j + stride * t_out : stride] += gcols[:, :, j, :]
                if padding:
                    gxp = gxp[:, :, padding : padding + t_in]
                _accumulate(x, gxp)

        return run

    return _make(out_data, parents, bw)


def linear(x, weight, bias) -> Tensor:
    """Dense layer x @ weight.T + bias with x [B, F] and weight [C, F]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear shapes incompatible: x {x.data.shape}, weight {weight.data.shape}"
        )

    def bw(out):
        def run():
            g = out.grad
            if x.requires_grad:
                _accumulate(x, g @ weight.data)
            if weight.requires_grad:
                _accumulate(weight, g.T @ x.data)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))

        return run

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), bw)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time zeroing with 1/(1-rate) rescale, identity at eval."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs a seeded generator")
    scale = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bw(out):
        def run():
            if x.requires_grad:
                _accumulate(x, out.grad * scale)

        return run

    return _make(x.data * scale, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            if x.requires_grad:
                g = out.grad
                _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return run

    return _make(y, (x,), bw)


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable softmax for inference-side code."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    logits [B, C], labels int array [B]. Gradient w.r.t. logits is
    (softmax(logits) - one_hot(labels)) / B.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.data.shape}")
    batch, classes = logits.data.shape
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= classes:
        raise IndexError(f"labels must lie in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(batch), labels].mean()

    def bw(out):
        def run():
            if logits.requires_grad:
                g = np.exp(log_probs)
                g[np.arange(batch), labels] -= 1.0
                _accumulate(logits, out.grad * g / batch)

        return run

    return _make(np.float64(loss), (logits,), bw)


# -- optimizer and gradient checking ------------------------------------


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_check(fn, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn` maps the tensor to a scalar Tensor. The input is perturbed one
    coordinate at a time: (f(x+h) - f(x-h)) / 2h.
    """
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    out.backward()
    analytic = np.array(x.grad, copy=True)

    numeric = np.zeros_like(x.data)
    for i in range(x.data.size):
        orig = x.data.flat[i]
        x.data.flat[i] = orig + h
        hi = float(fn(x).data)
        x.data.flat[i] = orig - h
        lo = float(fn(x).data)
        x.data.flat[i] = orig
        numeric.flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())
