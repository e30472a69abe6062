"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine records a tape of vectorized array operations (dense affine maps,
pointwise nonlinearities, gather, scatter-add, reductions, batched 3x3 linear
algebra) and computes vector-Jacobian products by walking the tape backwards.
Every public function accepts either a ``Tensor`` or a plain ndarray; plain
inputs are evaluated eagerly with numpy and stay off the tape, so the same
numerical code can run in "recording" and "plain" mode.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the context (ops return constant Tensors)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph: a value plus backward plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100  # numpy defers binary ops to Tensor

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.value)

    def numpy(self):
        return self.value

    # -- graph constructor ---------------------------------------------
    @staticmethod
    def _make(value, parents, backward):
        out = Tensor(value)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self, seed=None):
        """Reverse accumulation from this node; populates ``.grad`` fields."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.value)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            node.grad = None  # free intermediates; leaves keep their grads
            node._backward(g)

    # -- operator overloads ----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


def value_of(x):
    """Underlying ndarray of a Tensor, or the input coerced to ndarray."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _is_var(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------

def add(a, b):
    if not _is_var(a, b):
        return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def sub(a, b):
    if not _is_var(a, b):
        return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.value - b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def mul(a, b):
    if not _is_var(a, b):
        return np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.value * b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def div(a, b):
    if not _is_var(a, b):
        return np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64)
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.value / b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_val / b.value, b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def power(a, exponent):
    """Elementwise power with a constant (non-taped) exponent."""
    if not _is_var(a):
        return np.asarray(a, dtype=np.float64) ** exponent
    a = _as_tensor(a)
    out_val = a.value**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.value ** (exponent - 1))

    return Tensor._make(out_val, (a,), backward)


def exp(a):
    if not _is_var(a):
        return np.exp(np.asarray(a, dtype=np.float64))
    a = _as_tensor(a)
    out_val = np.exp(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_val)

    return Tensor._make(out_val, (a,), backward)


def log(a):
    if not _is_var(a):
        return np.log(np.asarray(a, dtype=np.float64))
    a = _as_tensor(a)
    out_val = np.log(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.value)

    return Tensor._make(out_val, (a,), backward)


def tanh(a):
    if not _is_var(a):
        return np.tanh(np.asarray(a, dtype=np.float64))
    a = _as_tensor(a)
    out_val = np.tanh(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_val * out_val))

    return Tensor._make(out_val, (a,), backward)


def sqrt(a):
    if not _is_var(a):
        return np.sqrt(np.asarray(a, dtype=np.float64))
    a = _as_tensor(a)
    out_val = np.sqrt(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_val)

    return Tensor._make(out_val, (a,), backward)


def absolute(a):
    if not _is_var(a):
        return np.abs(np.asarray(a, dtype=np.float64))
    a = _as_tensor(a)
    out_val = np.abs(a.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.value))

    return Tensor._make(out_val, (a,), backward)


# -- reductions ----------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    if not _is_var(a):
        return np.asarray(a, dtype=np.float64).sum(axis=axis, keepdims=keepdims)
    a = _as_tensor(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    return Tensor._make(out_val, (a,), backward)


def mean(a, axis=None, keepdims=False):
    shape = value_of(a).shape
    if axis is None:
        n = int(np.prod(shape)) if shape else 1
    elif isinstance(axis, tuple):
        n = int(np.prod([shape[ax] for ax in axis]))
    else:
        n = shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def maximum(a, b):
    if not _is_var(a, b):
        return np.maximum(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    a, b = _as_tensor(a), _as_tensor(b)
    mask = a.value >= b.value
    out_val = np.where(mask, a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def minimum(a, b):
    if not _is_var(a, b):
        return np.minimum(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    a, b = _as_tensor(a), _as_tensor(b)
    mask = a.value <= b.value
    out_val = np.where(mask, a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select by a constant boolean mask; gradient routes to the taken side."""
    cond = value_of(cond).astype(bool) if not isinstance(cond, np.ndarray) else cond
    if not _is_var(a, b):
        return np.where(cond, np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = np.where(cond, a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


# -- shape ops -------------------------------------------------------------

def reshape(a, shape):
    if not _is_var(a):
        return np.asarray(a, dtype=np.float64).reshape(shape)
    a = _as_tensor(a)
    out_val = a.value.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.value.shape))

    return Tensor._make(out_val, (a,), backward)


def swapaxes(a, ax1, ax2):
    if not _is_var(a):
        return np.swapaxes(np.asarray(a, dtype=np.float64), ax1, ax2)
    a = _as_tensor(a)
    out_val = np.swapaxes(a.value, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return Tensor._make(out_val, (a,), backward)


def transpose_last2(a):
    return swapaxes(a, -1, -2)


def concatenate(parts, axis=0):
    if not _is_var(*parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                p._accumulate(g[tuple(sl)])
            offset += s

    return Tensor._make(out_val, tuple(parts), backward)


def stack(parts, axis=0):
    if not _is_var(*parts):
        return np.stack([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    out_val = np.stack([p.value for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(out_val, tuple(parts), backward)


def take(a, key):
    """Numpy indexing (slices or integer arrays); backward scatters into place."""
    if not _is_var(a):
        return np.asarray(a, dtype=np.float64)[key]
    a = _as_tensor(a)
    out_val = a.value[key]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            np.add.at(acc, key, g)
            a._accumulate(acc)

    return Tensor._make(out_val, (a,), backward)


def gather(a, idx, axis=0):
    """Pick rows (or slices) by integer index array along ``axis``."""
    idx = np.asarray(idx)
    if not _is_var(a):
        return np.take(np.asarray(a, dtype=np.float64), idx, axis=axis)
    a = _as_tensor(a)
    out_val = np.take(a.value, idx, axis=axis)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            if axis == 0:
                np.add.at(acc, idx, g)
            else:
                acc_m = np.moveaxis(acc, axis, 0)
                np.add.at(acc_m, idx, np.moveaxis(g, axis, 0))
            a._accumulate(acc)

    return Tensor._make(out_val, (a,), backward)


def _scatter_rows(values, idx, size):
    """Sum rows of ``values`` into ``size`` bins given by ``idx`` (axis 0)."""
    trailing = values.shape[1:]
    k = int(np.prod(trailing)) if trailing else 1
    if k == 1:
        out = np.bincount(idx, weights=values.reshape(-1), minlength=size)
        return out.reshape((size,) + trailing)
    flat_idx = (idx[:, None] * k + np.arange(k)[None, :]).reshape(-1)
    out = np.bincount(flat_idx, weights=values.reshape(-1), minlength=size * k)
    return out.reshape((size,) + trailing)


def scatter_add(values, idx, size):
    """Accumulate ``values[n]`` into output bin ``idx[n]`` along axis 0.

    Deterministic: bins are summed in input order (serial reduction).
    """
    idx = np.asarray(idx)
    if not _is_var(values):
        return _scatter_rows(np.asarray(values, dtype=np.float64), idx, size)
    values = _as_tensor(values)
    out_val = _scatter_rows(values.value, idx, size)

    def backward(g):
        if values.requires_grad:
            values._accumulate(np.take(g, idx, axis=0))

    return Tensor._make(out_val, (values,), backward)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    if not _is_var(a, b):
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.value @ b.value
    a_vec = a.value.ndim == 1
    b_vec = b.value.ndim == 1

    def backward(g):
        ga = gb = None
        if a_vec and b_vec:  # inner product
            ga = g * b.value
            gb = g * a.value
        elif b_vec:
            ga = g[..., :, None] * b.value
            gb = np.swapaxes(a.value, -1, -2) @ g[..., None]
            gb = gb[..., 0]
        elif a_vec:
            ga = b.value @ g[..., None]
            ga = ga[..., 0] if ga.ndim > 1 else ga
            gb = a.value[:, None] * g[..., None, :]
        else:
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
        if a.requires_grad:
            a._accumulate(_unbroadcast(ga, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(gb, b.value.shape))

    return Tensor._make(out_val, (a, b), backward)


def norm(a, axis=-1, keepdims=False, eps=0.0):
    """Euclidean norm along ``axis``; ``eps`` guards the sqrt at zero."""
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims) + eps)


# -- batched 3x3 linear algebra -------------------------------------------

def det3(a):
    """Determinant of (...,3,3) via cofactor expansion (tape-friendly)."""
    a00, a01, a02 = a[..., 0, 0], a[..., 0, 1], a[..., 0, 2]
    a10, a11, a12 = a[..., 1, 0], a[..., 1, 1], a[..., 1, 2]
    a20, a21, a22 = a[..., 2, 0], a[..., 2, 1], a[..., 2, 2]
    return (
        a00 * (a11 * a22 - a12 * a21)
        - a01 * (a10 * a22 - a12 * a20)
        + a02 * (a10 * a21 - a11 * a20)
    )


def trace3(a):
    return a[..., 0, 0] + a[..., 1, 1] + a[..., 2, 2]


def svd3(a, eps=1e-10):
    """Batched SVD of (...,3,3): returns (U, S, V) with ``a = U @ diag(S) @ V^T``.

    The backward pass uses the standard square-case SVD adjoint; inverse
    singular-value gaps are regularized by ``eps`` so near-degenerate inputs
    stay finite (at the cost of accuracy exactly at a tie).
    """
    if not _is_var(a):
        u, s, vh = np.linalg.svd(np.asarray(a, dtype=np.float64))
        return u, s, np.swapaxes(vh, -1, -2)
    a = _as_tensor(a)
    u_val, s_val, vh_val = np.linalg.svd(a.value)
    v_val = np.swapaxes(vh_val, -1, -2)
    if not (_GRAD_ENABLED and a.requires_grad):
        return Tensor(u_val), Tensor(s_val), Tensor(v_val)

    # Multi-output primitive: the three outputs stash their cotangents and
    # route through a shared hidden node, which sits between them and ``a``
    # in topological order and fires the combined VJP exactly once.
    cot = {"u": None, "s": None, "v": None}
    hidden = Tensor(np.zeros(a.value.shape[:-2]))
    hidden.requires_grad = True
    hidden._parents = (a,)

    def hidden_backward(_g):
        gu = cot["u"] if cot["u"] is not None else np.zeros_like(u_val)
        gs = cot["s"] if cot["s"] is not None else np.zeros_like(s_val)
        gv = cot["v"] if cot["v"] is not None else np.zeros_like(v_val)
        a._accumulate(_svd3_vjp(u_val, s_val, v_val, gu, gs, gv, eps))

    hidden._backward = hidden_backward

    def make_output(name, val):
        out = Tensor(val)
        out.requires_grad = True
        out._parents = (hidden,)

        def backward(g):
            cot[name] = g if cot[name] is None else cot[name] + g
            hidden._accumulate(np.zeros_like(hidden.value))

        out._backward = backward
        return out

    return make_output("u", u_val), make_output("s", s_val), make_output("v", v_val)


def _svd3_vjp(u, s, v, gu, gs, gv, eps):
    s2 = s**2
    diff = s2[..., None, :] - s2[..., :, None]
    f = diff / (diff**2 + eps)
    np.einsum("...ii->...i", f)[...] = 0.0

    ut_gu = np.swapaxes(u, -1, -2) @ gu
    vt_gv = np.swapaxes(v, -1, -2) @ gv
    j = f * (ut_gu - np.swapaxes(ut_gu, -1, -2))
    k = f * (vt_gv - np.swapaxes(vt_gv, -1, -2))
    s_mat = s[..., None, :] * np.eye(3)
    inner = j @ s_mat + s_mat @ k
    np.einsum("...ii->...i", inner)[...] += gs
    return u @ inner @ np.swapaxes(v, -1, -2)


# aliases matching numpy naming used by callers
abs_ = absolute
