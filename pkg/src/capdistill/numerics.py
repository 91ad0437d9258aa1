"""Dense-array compute substrate with reverse-mode differentiation.

Every loss and model in this package is differentiable through the
:class:`Tensor` type defined here. The design is deliberately small: a numpy
array, a ``requires_grad`` flag, and per-operation vector-Jacobian closures.
Training runs use float32; gradient verification runs use float64 via the
:func:`precision` context manager, because 32-bit central differences are too
noisy for 1e-5 tolerances.

Stability conventions used throughout:

* softmax / log-softmax always subtract the running maximum,
* division by vector norms floors the denominator at ``NORM_FLOOR``,
* ``log_clamped`` floors its argument so zero probabilities cannot produce
  ``-inf``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-8


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """An operation received (or would silently produce) non-finite values."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(name):
    """Set the default float width ("f32" or "f64") for new tensors."""
    global _DEFAULT_DTYPE
    if name not in _DTYPE_NAMES:
        raise ValueError(f"unknown precision {name!r}, expected 'f32' or 'f64'")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = _DTYPE_NAMES[name]
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """A dense real-valued array plus optional reverse-mode gradient.

    Tensors produced by operations are immutable; only leaf tensors
    (parameters) may be updated in place, via :meth:`assign_`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def is_leaf(self):
        return self._vjp is None

    def assign_(self, new_data):
        """In-place update of a leaf tensor (optimizer steps only)."""
        if not self.is_leaf():
            raise ValueError("only leaf tensors (parameters) may be assigned in place")
        arr = np.asarray(new_data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Accumulates gradients into ``.grad`` of every tensor on the path that
        has ``requires_grad`` set.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._vjp(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pgrad, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pgrad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    """Build a tensor in the current default precision."""
    arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=None):
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise NumericsError(
                f"mixed dtypes {dt.name} / {t.data.dtype.name}: cast inputs explicitly"
            )
    return dt


def _make(out_data, parents, vjp):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(out_data)


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    _check_same_dtype(a, b)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    _check_same_dtype(a, b)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), -_sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    _check_same_dtype(a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def div(a, b):
    _check_same_dtype(a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _sum_to_shape(g / b.data, a.data.shape),
            _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), vjp)


def scale(a, c):
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.data.dtype)

    def vjp(g):
        return (g * np.asarray(c, dtype=a.data.dtype),)

    return _make(out, (a,), vjp)


def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def square(a):
    out = a.data * a.data

    def vjp(g):
        return (2.0 * g * a.data,)

    return _make(out, (a,), vjp)


def log_clamped(a, floor=1e-12):
    """Natural log with the argument floored, so log(0) cannot occur."""
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)
    active = a.data > floor

    def vjp(g):
        return (np.where(active, g / clamped, 0.0),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions / shape


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def linear(x, w, b=None):
    """x @ w (+ b); weight convention is (in_dim, out_dim)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    if not np.isfinite(a.data).all():
        raise NumericsError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1):
    if not np.isfinite(a.data).all():
        raise NumericsError("log_softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def l2_normalize(a, floor=NORM_FLOOR):
    """Row-normalize along the last axis; the norm is floored at `floor`."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, floor)
    out = a.data / denom
    active = norm > floor

    def vjp(g):
        g_direct = g / denom
        proj = (g * a.data).sum(axis=-1, keepdims=True) / (denom * denom * denom)
        return (np.where(active, g_direct - a.data * proj, g_direct),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# indexing


def take_last(a, idx):
    """Pick one entry along the last axis per leading position.

    `idx` has shape a.shape[:-1]; out[..] = a[.., idx[..]].
    """
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} != {a.data.shape[:-1]}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= a.data.shape[-1]:
        raise IndexError("take_last index out of range")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        flat = ga.reshape(-1, a.data.shape[-1])
        flat[np.arange(flat.shape[0]), idx.reshape(-1)] = g.reshape(-1)
        return (ga,)

    return _make(out, (a,), vjp)


def embedding(table, ids):
    """Row lookup into an embedding table; gradients scatter-add."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _make(out, (table,), vjp)


# ---------------------------------------------------------------------------
# fused layers


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learned gain/bias."""
    _check_same_dtype(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gbias = g.sum(axis=lead)
        ggain = (g * xhat).sum(axis=lead)
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def conv1d(x, kernel, bias=None, stride=1, padding=0):
    """Temporal convolution: x is (T, Cin) or (B, T, Cin), kernel (Cout, Cin, k).

    Output length is floor((T + 2*padding - k) / stride) + 1.
    """
    single = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if single else x
    if xb.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects (B,T,Cin) and (Cout,Cin,k), got {x.shape}, {kernel.shape}")
    B, T, Cin = xb.shape
    Cout, Cin_k, k = kernel.shape
    if Cin != Cin_k:
        raise ShapeError(f"conv1d channel mismatch: input {Cin}, kernel {Cin_k}")
    if k > T + 2 * padding:
        raise ShapeError(f"kernel width {k} exceeds padded length {T + 2 * padding}")
    t_out = (T + 2 * padding - k) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (padding, padding), (0, 0))) if padding else xb.data
    # windows: (B, t_out, Cin, k), flattened with Cin outer / tap inner
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    win_flat = np.ascontiguousarray(win).reshape(B, t_out, Cin * k)
    kmat = kernel.data.transpose(1, 2, 0).reshape(Cin * k, Cout)
    out = win_flat @ kmat
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gwin = (g @ kmat.T).reshape(B, t_out, Cin, k)
        gkernel = np.tensordot(win_flat, g, axes=([0, 1], [0, 1]))
        gkernel = gkernel.reshape(Cin, k, Cout).transpose(2, 0, 1)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + stride * t_out : stride, :] += gwin[:, :, :, j]
        gx = gxp[:, padding : padding + T, :] if padding else gxp
        gb = g.sum(axis=(0, 1)) if bias is not None else None
        parts = [gx, gkernel]
        if bias is not None:
            parts.append(gb)
        return tuple(parts)

    parents = (xb, kernel) + ((bias,) if bias is not None else ())
    res = _make(out, parents, vjp)
    return reshape(res, (t_out, Cout)) if single else res


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    per_param: dict = field(default_factory=dict)
    max_rel_err: float = 0.0
    passed: bool = True
    eps: float = 1e-5
    tolerance: float = 1e-5
    failure: str | None = None


def grad_check(loss_fn, params, eps=1e-5, tolerance=1e-5, names=None):
    """Compare analytic gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild its graph on each call and return a scalar Tensor
    that depends on `params`. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = names or [f"param{i}" for i in range(len(params))]
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError("grad_check loss_fn must return a scalar")
    loss.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]

    report = GradCheckReport(eps=eps, tolerance=tolerance)
    for p, a_grad, name in zip(params, analytic, names):
        flat = p.data.flat
        num = np.zeros(p.data.size, dtype=p.data.dtype)
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                f_minus = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failure = (
                    f"non-finite loss while perturbing {name}[{i}]: "
                    f"f(+eps)={f_plus}, f(-eps)={f_minus}"
                )
                report.passed = False
                report.per_param[name] = float("inf")
                break
            num[i] = (f_plus - f_minus) / (2.0 * eps)
        else:
            a_flat = a_grad.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(num)), 1e-8)
            err = float(np.max(np.abs(a_flat - num) / denom)) if p.data.size else 0.0
            report.per_param[name] = err
            report.max_rel_err = max(report.max_rel_err, err)
    if report.failure is None:
        report.passed = report.max_rel_err <= tolerance
    return report
