"""Minimal dense-tensor reverse-mode autodiff on numpy float64.

Every op builds a closure-based backward rule; `Tensor.backward()` walks the
graph in reverse topological order exactly once. A global grad mode switch
(`no_grad`) lets inference paths skip graph construction entirely, which is
what makes batched generation cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class GradMode:
    """Global switch: when disabled, ops return detached tensors."""

    enabled = True


class no_grad:
    def __enter__(self):
        self._prev = GradMode.enabled
        GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        GradMode.enabled = self._prev
        return False


class checked_mode:
    """Reject NaN/Inf at tensor creation while active (slow, test-only)."""

    enabled = False

    def __enter__(self):
        self._prev = checked_mode.enabled
        checked_mode.enabled = True
        return self

    def __exit__(self, *exc):
        checked_mode.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        if checked_mode.enabled and not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite values in tensor of shape %s" % (self.data.shape,))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g):
        # single-contributor case keeps a reference (may alias an upstream
        # buffer or be a broadcast view); a second contribution materializes
        # an owned array before any in-place update
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor; visits each node once."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo = topo_order(self)
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                # interior grads are not retained; frees memory as we go
                node.grad = None
        self._parents = ()
        self._backward = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def topo_order(root):
    """Iterative DFS topological order over the parent DAG."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward):
    """Build an op result; detaches when grad mode is off or inputs are constant."""
    if GradMode.enabled and any(p.requires_grad or p._parents for p in parents):
        t = Tensor(data, requires_grad=True)
        t._parents = tuple(parents)
        t._backward = backward
        return t
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic primitives --------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        g = np.asarray(g)
        if a.requires_grad or a._parents:
            if b.data.ndim == 1:
                ga = g[..., None] * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            if a.data.ndim == 1:
                gb = a.data[:, None] * g[..., None, :] if b.data.ndim > 1 else a.data * g
            elif b.data.ndim == 1:
                gb = np.swapaxes(a.data, -1, -2) @ g[..., None]
                gb = gb[..., 0]
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), backward)


def power(a, p):
    a = _lift(a)
    out = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out, (a,), backward)


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, (a,), backward)


def log(a):
    a = _lift(a)
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(out, (a,), backward)


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return _node(out, (a,), backward)


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), backward)


def sigmoid(a):
    a = _lift(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), backward)


def gelu(a):
    """Exact GELU x*Phi(x) with the erf form."""
    a = _lift(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * phi

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (phi + a.data * pdf))

    return _node(out, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    a = _lift(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        s[~pos] = ez / (1.0 + ez)
        a._accumulate(g * s)

    return _node(out, (a,), backward)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis, keepdims=False):
    """Max-reduce; subgradient routes only to the (first) argmax positions."""
    a = _lift(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis=axis)
        a._accumulate(buf)

    return _node(out, (a,), backward)


# -- softmax family -----------------------------------------------------------


def softmax(a, axis=-1):
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), backward)


def masked_softmax(a, mask, axis=-1):
    """Softmax over positions where mask is True.

    Masked positions get exactly zero weight (they never enter the exp),
    and rows with no True entry come out all-zero instead of NaN.
    """
    a = _lift(a)
    m = np.asarray(mask, dtype=bool)
    m = np.broadcast_to(m, a.data.shape)
    neg = np.where(m, a.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    safe_mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(a.data - safe_mx), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), backward)


def softmax_add(a, additive_mask, axis=-1):
    """Softmax of (a + additive_mask) where the mask is a constant float
    array (0 to keep, a large negative to exclude). Exactly-excluded entries
    underflow to weight 0. One graph node; used for causal attention."""
    a = _lift(a)
    z = a.data + additive_mask
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), backward)


def log_softmax(a, axis=-1):
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), backward)


def layer_norm(a, eps=LN_EPS):
    """Normalize the last axis to zero mean, unit variance (pre-affine).

    A constant row maps to zeros: variance 0 + eps inside the sqrt keeps
    the division finite and the numerator is identically zero.
    """
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        n = a.data.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - out * gy))

    return _node(out, (a,), backward)


# -- structural ops -----------------------------------------------------------


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(out, (a,), backward)


def reshape(a, shape):
    a = _lift(a)
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(out, (a,), backward)


def concatenate(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out, tuple(ts), backward)


def take(a, idx):
    """Basic slicing/indexing with gradient scatter-back."""
    a = _lift(a)
    out = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _node(out, (a,), backward)


def take_along_last(a, idx):
    """Pick one entry per row along the last axis (e.g. target log-probs)."""
    a = _lift(a)
    ii = np.asarray(idx, dtype=np.int64)[..., None]
    out = np.take_along_axis(a.data, ii, axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, ii, np.asarray(g)[..., None], axis=-1)
        a._accumulate(buf)

    return _node(out, (a,), backward)


def gather_rows(table, indices):
    """Embedding lookup: rows of `table` selected by an integer array."""
    table = _lift(table)
    idx = np.asarray(indices)
    out = table.data[idx]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(buf)

    return _node(out, (table,), backward)


def masked_fill(a, mask, value):
    """Set masked positions to a constant; they receive zero gradient."""
    a = _lift(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = np.where(m, value, a.data)

    def backward(g):
        a._accumulate(np.where(m, 0.0, g))

    return _node(out, (a,), backward)


def scatter_by_mask(base, mask, rows):
    """Replace base rows at True mask positions by `rows`, in order.

    base: (..., T, d), mask: (..., T) with exactly rows.shape[-2] True
    entries per leading index, rows: (..., K, d). Gradient flows into
    `rows` only through scattered positions and into `base` elsewhere.
    """
    base, rows = _lift(base), _lift(rows)
    m = np.asarray(mask, dtype=bool)
    k = int(m.sum(axis=-1).ravel()[0]) if m.any() else 0
    if not np.all(m.sum(axis=-1) == rows.data.shape[-2]):
        raise ShapeError(
            f"mask true-count {m.sum(axis=-1)} != rows per batch {rows.data.shape[-2]}"
        )
    out = base.data.copy()
    out[m] = rows.data.reshape(-1, rows.data.shape[-1])

    def backward(g):
        if rows.requires_grad or rows._parents:
            rows._accumulate(g[m].reshape(rows.data.shape))
        if base.requires_grad or base._parents:
            base._accumulate(np.where(m[..., None], 0.0, g))

    return _node(out, (base, rows), backward)


def where(cond, a, b):
    """Elementwise select; differentiable in both branches."""
    a, b = _lift(a), _lift(b)
    c = np.asarray(cond, dtype=bool)
    out = np.where(c, a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(np.where(c, g, 0.0), a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(np.where(c, 0.0, g), b.data.shape))

    return _node(out, (a, b), backward)


def dropout(a, mask, keep_prob):
    """Apply a precomputed boolean keep-mask with 1/keep_prob scaling.

    Mask generation (and train/eval switching) lives in the module layer so
    the primitive stays pure and gradient checks can replay a recorded mask.
    """
    a = _lift(a)
    scale = 1.0 / keep_prob
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data * scale, 0.0)

    def backward(g):
        a._accumulate(np.where(m, g * scale, 0.0))

    return _node(out, (a,), backward)


# -- composite helpers --------------------------------------------------------


def linear(x, w, b=None):
    """x @ w.T (+ b). w is (out, in) so parameters print in torch order."""
    out = matmul(x, transpose(w))
    if b is not None:
        out = add(out, b)
    return out


def cosine_matrix(a, b, eps=1e-8):
    """Pairwise cosine similarity between rows of a (n,d) and b (m,d)."""
    an = mul(a, power(add(tsum(mul(a, a), axis=-1, keepdims=True), eps), -0.5))
    bn = mul(b, power(add(tsum(mul(b, b), axis=-1, keepdims=True), eps), -0.5))
    return matmul(an, transpose(bn))


def pairwise_sqdist(a, b):
    """Squared Euclidean distances between rows of a (n,d) and b (m,d)."""
    aa = tsum(mul(a, a), axis=-1, keepdims=True)
    bb = tsum(mul(b, b), axis=-1, keepdims=True)
    cross = matmul(a, transpose(b))
    d = add(add(aa, transpose(bb)), mul(cross, -2.0))
    # exact zeros can drift to -1e-17 through the expansion; clamp via masked_fill
    return masked_fill(d, d.data < 0.0, 0.0)


# -- SVD and gradient checking ------------------------------------------------


def svd_thin(m, k):
    """Top-k SVD: U (rows,k) orthonormal cols, S descending, Vt (k,cols)."""
    m = np.asarray(m, dtype=np.float64)
    if k > min(m.shape):
        raise ShapeError(f"rank {k} exceeds min dimension of {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u[:, :k], s[:k], vt[:k, :]


@dataclass
class CheckReport:
    passed: bool
    tol: float
    per_param: dict = field(default_factory=dict)
    worst: float = 0.0
    worst_param: str = ""
    failure: str = ""

    def __str__(self):
        head = "PASS" if self.passed else "FAIL"
        return f"grad-check {head}: worst rel-err {self.worst:.3e} ({self.worst_param})"


def grad_check(f, params, h=1e-5, tol=1e-3, max_elems=24, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    params: dict name -> Tensor (requires_grad). For large tensors only
    `max_elems` randomly chosen elements are probed per parameter.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        return CheckReport(passed=False, tol=tol, failure="non-finite objective")
    out.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    report = CheckReport(passed=True, tol=tol)
    for name, p in params.items():
        n = p.data.size
        picks = np.arange(n) if n <= max_elems else rng.choice(n, size=max_elems, replace=False)
        worst = 0.0
        with no_grad():
            for i in picks:
                orig = p.data.flat[i]
                p.data.flat[i] = orig + h
                fp = float(f().data)
                p.data.flat[i] = orig - h
                fm = float(f().data)
                p.data.flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
        report.per_param[name] = worst
        if worst > report.worst:
            report.worst, report.worst_param = worst, name
    report.passed = report.worst < tol and not report.failure
    for p in params.values():
        p.zero_grad()
    return report
