"""Dense f64 tensors with reverse-mode differentiation on an explicit tape.

Everything runs in float64. Ops record a backward callback on the active
tape; the tape's append order is a topological order by construction, so
``backward`` is a single reverse sweep that visits each node exactly once.
Stochastic inputs (dropout masks, Dirichlet draws) enter as constants and
never receive gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AllKeysMasked, NonFiniteLoss, ShapeMismatch

MASK_NEG = -1e9  # additive logit mask for excluded attention keys

_finite_checks = True


def set_finite_checks(on: bool) -> None:
    """Toggle the per-op NaN/Inf guard (on by default)."""
    global _finite_checks
    _finite_checks = bool(on)


class Tensor:
    """A dense float64 array, optionally participating in differentiation.

    ``grad`` is lazily allocated by the backward sweep and holds the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteLoss("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be a view of (or shared with) another node's buffer
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(x, requires_grad=False)


class ComputationTape:
    """Ordered op records; forward append order doubles as topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss, accumulating into ``.grad``."""
        if loss.data.size != 1:
            raise ShapeMismatch("backward needs a scalar loss")
        if not np.isfinite(loss.data).all():
            raise NonFiniteLoss("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


_tape_stack: list[ComputationTape] = []


@contextmanager
def tape():
    """Record ops onto a fresh tape within the context."""
    t = ComputationTape()
    _tape_stack.append(t)
    try:
        yield t
    finally:
        _tape_stack.pop()


@contextmanager
def no_grad():
    """Disable recording (evaluation paths)."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create an op output and record it when recording is active."""
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise NonFiniteLoss("non-finite values produced in forward op")
    t = _active_tape()
    req = t is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out.grad = None
    if req:
        t.nodes.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out)

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        if a.requires_grad:
            x = a.data
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ez = np.exp(x[~pos])
            s[~pos] = ez / (1.0 + ez)
            a.accumulate_grad(g * s)

    return _make(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU (smooth, FD-friendly)."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 0.134145 * x2)
            da = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
            a.accumulate_grad(g * da)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2).copy()

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, ax1, ax2))

    return _make(out, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _make(out, tuple(parts), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a.accumulate_grad(buf)

    return _make(out, (a,), bw)


def scatter_rows(src: Tensor, idx, n_rows: int) -> Tensor:
    """Place src rows at positions ``idx`` of a zero output with ``n_rows``
    rows (duplicate indices accumulate); backward gathers."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + src.data.shape[1:])
    np.add.at(out, idx, src.data)

    def bw(g):
        if src.requires_grad:
            src.accumulate_grad(g[idx])

    return _make(out, (src,), bw)


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(lo, hi)
    out = a.data[tuple(idx)].copy()

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[tuple(idx)] = g
            a.accumulate_grad(buf)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and attention primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, supporting broadcast batch dims on either side."""
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeMismatch("matmul needs at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - dot) * out)

    return _make(out, (a,), bw)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         bias: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ + bias) v as one fused tape node.

    q: (..., T, dh), k/v: (..., L, dh), bias broadcastable to (..., T, L).
    The softmax weights are saved for the closed-form backward.
    """
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    if bias is not None:
        scores = scores + bias
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    attn = scores  # (..., T, L)
    out = attn @ v.data

    def bw(g):
        if v.requires_grad:
            v.accumulate_grad(_unbroadcast(np.swapaxes(attn, -1, -2) @ g,
                                           v.data.shape))
        if q.requires_grad or k.requires_grad:
            da = g @ np.swapaxes(v.data, -1, -2)
            ds = (da - (da * attn).sum(axis=-1, keepdims=True)) * attn
            if q.requires_grad:
                q.accumulate_grad(_unbroadcast(ds @ k.data, q.data.shape))
            if k.requires_grad:
                k.accumulate_grad(_unbroadcast(np.swapaxes(ds, -1, -2) @ q.data,
                                               k.data.shape))

    return _make(out, (q, k, v), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)

    def bw(g):
        if a.requires_grad:
            soft = np.exp(a.data - np.expand_dims(out, axis))
            a.accumulate_grad(np.expand_dims(g, axis) * soft)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to mean 0 / var 1 (1/N variance), then affine.

    Fused into one tape node with the closed-form backward."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.data.shape))
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.data.shape))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gg - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), bw)


def cross_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention of queries over keys/values.

    Shapes: q ``(..., T_q, D)``, k/v ``(..., L, D)``; ``key_mask`` is a bool
    array broadcastable to ``(..., L)`` marking valid keys. Masked keys get
    an additive ``MASK_NEG`` logit. Raises AllKeysMasked when any sample has
    no valid key at all.
    """
    D = q.data.shape[-1]
    if D % n_heads != 0:
        raise ShapeMismatch(f"D={D} not divisible by n_heads={n_heads}")
    if k.data.shape[-1] != D or v.data.shape[-1] != D:
        raise ShapeMismatch("q/k/v feature dims differ")
    L = k.data.shape[-2]
    if key_mask is not None:
        km = np.broadcast_to(np.asarray(key_mask, dtype=bool), k.data.shape[:-1])
        if not km.any(axis=-1).all():
            raise AllKeysMasked("a sample has no valid attention key")
    dh = D // n_heads

    def split_heads(t: Tensor) -> Tensor:
        # (..., T, D) -> (..., H, T, dh)
        r = reshape(t, t.data.shape[:-1] + (n_heads, dh))
        return swapaxes(r, -2, -3)

    # fold the 1/sqrt(dh) scale into the (small) query tensor
    qh = mul(split_heads(q), constant(1.0 / math.sqrt(dh)))
    kh = split_heads(k)
    vh = split_heads(v)
    bias = None
    if key_mask is not None:
        bias = np.expand_dims(np.where(km, 0.0, MASK_NEG), (-3, -2))
    ctx = scaled_dot_attention(qh, kh, vh, bias)  # (..., H, T_q, dh)
    ctx = swapaxes(ctx, -2, -3)
    return reshape(ctx, ctx.data.shape[:-2] + (D,))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients of a scalar graph against central differences.

    ``f`` rebuilds the loss from current parameter values on every call.
    Returns ``(max_rel_err, per_param_worst)`` with relative error
    ``|analytic - fd| / (|fd| + 1e-8)``. ``coords_per_param`` subsamples
    coordinates (all, when None). Raises NonFiniteLoss if f() is not finite.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    with tape() as t:
        loss = f()
        if loss.data.size != 1 or not np.isfinite(loss.data).all():
            raise NonFiniteLoss("grad_check target is not a finite scalar")
        t.backward(loss)
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params
    }
    rng = rng or np.random.default_rng(0)
    worst: dict[str, float] = {}
    max_err = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is not None and coords_per_param < n:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        err_here = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                f_plus = float(f().data)
            flat[c] = orig - eps
            with no_grad():
                f_minus = float(f().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = analytic[name].reshape(-1)[c]
            rel = abs(an - fd) / (abs(fd) + 1e-8)
            err_here = max(err_here, rel)
        worst[name] = err_here
        max_err = max(max_err, err_here)
    return max_err, worst
