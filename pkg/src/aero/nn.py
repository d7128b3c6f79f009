"""Minimal reverse-mode autodiff substrate backed by numpy.

Implements exactly the primitives the detector needs: dense linear maps,
softmax, layer normalization, pointwise nonlinearities, mean squared error,
an Adam optimizer, and a finite-difference gradient checker. Gradients are
computed over a dynamically recorded operation tape.

Tensors are 2-D in the public contracts (``rows``/``cols``); internally any
number of leading batch dimensions is supported so that whole minibatches can
be pushed through a single BLAS call.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` accumulate ``.grad``
    after :meth:`backward`. Non-leaf tensors hold a closure that propagates
    the adjoint to their parents; their grads are freed as soon as they have
    been consumed.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward",
                 "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if requires_grad and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or '<unnamed>'}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._grad_owned = False

    # -- 2-D convenience ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.data.dtype), self)

    def __truediv__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype) ** -1.0)

    def __pow__(self, exponent: float):
        return power(self, float(exponent))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    def reshape(self, *shape: int):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backprop ----------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode pass seeding d(self)/d(self) = 1."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate adjoint no longer needed
                node._grad_owned = False


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # keep a borrowed reference; copy lazily on the second accumulation
        t.grad = g
        t._grad_owned = False
    elif not t._grad_owned:
        t.grad = t.grad + g
        t._grad_owned = True
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _result(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast as in np.matmul."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return _result(data, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _result(data, (a,), backward)


def take(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _result(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def sin(a: Tensor) -> Tensor:
    data = np.sin(a.data)

    def backward(g):
        _accumulate(a, g * np.cos(a.data))

    return _result(data, (a,), backward)


def cos(a: Tensor) -> Tensor:
    data = np.cos(a.data)

    def backward(g):
        _accumulate(a, -g * np.sin(a.data))

    return _result(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _result(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, np.where(a.data > 0.0, g, 0.0))

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _result(data, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gs = g * data
        _accumulate(a, gs - data * gs.sum(axis=-1, keepdims=True))

    return _result(data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (feature) axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gain.data * xhat + bias.data

    def backward(g):
        d = a.data.shape[-1]
        batch_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, _unbroadcast((g * xhat).sum(axis=batch_axes), gain.data.shape))
        _accumulate(bias, _unbroadcast(g.sum(axis=batch_axes), bias.data.shape))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv_std)

    return _result(data, (a, gain, bias), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense map ``y = w @ x`` with optional broadcast bias."""
    y = matmul(w, x)
    if b is not None:
        y = add(y, b)
    return y


def mse(pred: Tensor, target: Tensor) -> Tensor:
    diff = sub(pred, target)
    return tmean(mul(diff, diff))


# ---------------------------------------------------------------------------
# parameters, optimizer, checker
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   dtype=DEFAULT_DTYPE, name: str | None = None) -> Tensor:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], dtype=DEFAULT_DTYPE,
                name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones_param(shape: tuple[int, ...], dtype=DEFAULT_DTYPE,
               name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


class GradientError(RuntimeError):
    """Raised when a non-finite gradient reaches the optimizer."""


class Adam:
    """Standard bias-corrected Adam over a list of named parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(
                    f"non-finite gradient in parameter {p.name or f'#{i}'}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    params = list(params)
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4, abs_floor: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Returns the maximum relative error over all parameter entries.
    """
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    max_err = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(f().data)
            flat[j] = orig - h
            f_minus = float(f().data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ga = float(analytic[pi].reshape(-1)[j])
            denom = max(abs_floor, abs(ga), abs(numeric))
            max_err = max(max_err, abs(ga - numeric) / denom)
    return max_err


# ---------------------------------------------------------------------------
# checkpoint format: versioned npz with one array per parameter name
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write a key -> array map as a versioned ``.npz`` (endianness-fixed)."""
    payload = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.items()}
    payload["__checkpoint_version__"] = np.array([CHECKPOINT_VERSION])
    np.savez(path, **payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path) as npz:
        version = int(npz["__checkpoint_version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {k: npz[k] for k in npz.files if k != "__checkpoint_version__"}
