"""Minimal reverse-mode differentiation over dense float64 arrays.

Values are 2-D matrices, optionally carrying an explicit leading batch axis
``(L, rows, cols)`` so a mini-batch of per-frame matrices runs as one op.
There is no implicit broadcasting: every op checks its shapes.

Usage::

    x = Node(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = frobenius(matmul(x, Node(np.eye(3))))
    backward(tape, loss)
    x.grad
"""
from __future__ import annotations

import numpy as np

EPS_NORM = 1e-12
EPS_SIGMA = 1e-8


class ShapeError(ValueError):
    pass


class DegeneracyError(ArithmeticError):
    pass


_ACTIVE: list["Tape"] = []


class Node:
    """A value plus (for leaves) an accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.parents: tuple[Node, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def detach(self):
        return Node(self.value.copy())

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Node(shape={self.shape}, leaf={self.is_leaf}, name={self.name!r})"


class Tape:
    """Op nodes in forward execution order, replayed in reverse by ``backward``."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _const(x):
    return x if isinstance(x, Node) else Node(x)


def _record(value, parents, backward_fn):
    out = Node(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE[-1].nodes.append(out)
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(tape: Tape, loss: Node):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls accumulate; call ``zero_grad`` on leaves to reset.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += np.ones_like(loss.value)
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad += pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    a, b = _const(a), _const(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.value.ndim == 3 and b.value.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ _swap(bv)
        gb = _swap(av) @ g
        # reduce over the batch axis when one side is unbatched
        if ga.ndim > av.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > bv.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _record(av @ bv, (a, b), bw)


def add(a, b):
    a, b = _const(a), _const(b)
    _check_same(a, b, "add")
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _const(a), _const(b)
    _check_same(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c: float):
    a = _const(a)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def mul_const(a, m):
    """Elementwise product with a constant array (masks)."""
    a = _const(a)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {m.shape}")
    return _record(a.value * m, (a,), lambda g: (g * m,))


def add_bias(a, b):
    """``a`` is C x N, ``b`` is C x 1; adds ``b`` to every column."""
    a, b = _const(a), _const(b)
    if a.value.ndim != 2 or b.shape != (a.shape[0], 1):
        raise ShapeError(f"add_bias: expected (C,N) and (C,1), got {a.shape}, {b.shape}")
    return _record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=1, keepdims=True)))


def leaky_relu(a, slope: float = 0.2):
    a = _const(a)
    d = np.where(a.value > 0, 1.0, slope)
    return _record(a.value * d, (a,), lambda g: (g * d,))


def reshape(a, shape):
    a = _const(a)
    old = a.shape
    try:
        v = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {shape}") from e
    return _record(v, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = _const(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index, axis=0):
    """Select entries of ``a`` along ``axis`` (used to reorder a batch)."""
    a = _const(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(np.take(a.value, index, axis=axis), (a,), bw)


def sum_all(a):
    a = _const(a)
    shape = a.shape
    return _record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g.item()),))


def mean_all(a):
    a = _const(a)
    shape, n = a.shape, a.value.size
    return _record(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g.item() / n),)
    )


def frobenius(a):
    """Scalar Frobenius norm; subgradient zero at the origin."""
    a = _const(a)
    v = a.value
    n = float(np.sqrt(np.sum(v * v)))

    def bw(g):
        if n < EPS_NORM:
            return (np.zeros_like(v),)
        return (g.item() * v / n,)

    return _record(np.array([[n]]), (a,), bw)


def batch_frobenius(a):
    """Per-item Frobenius norms of an (L, r, c) stack, returned as L x 1."""
    a = _const(a)
    v = a.value
    if v.ndim != 3:
        raise ShapeError(f"batch_frobenius: expected (L,r,c), got {a.shape}")
    n = np.sqrt(np.sum(v * v, axis=(1, 2)))
    safe = np.where(n < EPS_NORM, 1.0, n)
    live = (n >= EPS_NORM).astype(np.float64)

    def bw(g):
        w = (g[:, 0] * live / safe)[:, None, None]
        return (v * w,)

    return _record(n[:, None], (a,), bw)


def l2_normalize(a):
    """Normalize each column of a d x N matrix to unit Euclidean norm."""
    a = _const(a)
    v = a.value
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize: expected (d,N), got {a.shape}")
    n = np.sqrt(np.sum(v * v, axis=0, keepdims=True))
    if np.any(n <= EPS_NORM):
        raise DegeneracyError("l2_normalize: near-zero norm")
    u = v / n

    def bw(g):
        return ((g - u * np.sum(u * g, axis=0, keepdims=True)) / n,)

    return _record(u, (a,), bw)


def logsumexp(a, mask=None):
    """Column-wise log-sum-exp of a k x N matrix, returned as 1 x N.

    ``mask`` (k x N booleans) restricts each column's sum to the marked rows;
    a column with no marked rows yields -inf and receives no gradient.
    """
    a = _const(a)
    v = a.value
    if v.ndim != 2 or v.shape[0] < 1:
        raise ShapeError(f"logsumexp: expected (k,N) with k >= 1, got {a.shape}")
    m = np.ones(v.shape, bool) if mask is None else np.asarray(mask, bool)
    if m.shape != v.shape:
        raise ShapeError(f"logsumexp: mask shape {m.shape} vs {v.shape}")
    masked = np.where(m, v, -np.inf)
    top = masked.max(axis=0, keepdims=True)
    top_safe = np.where(np.isfinite(top), top, 0.0)
    e = np.where(m, np.exp(masked - top_safe), 0.0)
    s = e.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + top_safe
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return _record(out, (a,), lambda g: (w * g,))


def singular_values_2x3(a):
    """Singular values (descending) of one 2x3 or a stack of (L, 2, 3)."""
    v = np.asarray(a, dtype=np.float64)
    return np.linalg.svd(v, compute_uv=False)


def svd_orthogonalize(a):
    """Nearest row-orthonormal matrix ``U V^T`` of a 2x3 (or (L,2,3)) input.

    The forward value comes from a batched SVD. The backward pass treats it as
    ``(a a^T)^{-1/2} a`` and uses divided differences of ``x -> x^{-1/2}``,
    which stay finite when the singular values coincide.
    """
    a = _const(a)
    single = a.value.ndim == 2
    if a.shape[-2:] != (2, 3) or a.value.ndim not in (2, 3):
        raise ShapeError(f"svd_orthogonalize: expected (2,3) or (L,2,3), got {a.shape}")
    M = a.value.reshape(-1, 2, 3)
    U, r, Vt = np.linalg.svd(M, full_matrices=False)
    if np.any(r[:, 1] <= EPS_SIGMA):
        bad = int(np.argmin(r[:, 1]))
        err = DegeneracyError(
            f"svd_orthogonalize: rank-deficient input (item {bad}, sigma_min={r[bad, 1]:.3e})"
        )
        err.item = bad
        raise err
    R = U @ Vt
    Q = (U * (1.0 / r)[:, None, :]) @ _swap(U)
    F = -1.0 / (r[:, :, None] * r[:, None, :] * (r[:, :, None] + r[:, None, :]))

    def bw(g):
        g = g.reshape(-1, 2, 3)
        gM = Q @ g
        gQ = g @ _swap(M)
        gG = U @ ((_swap(U) @ gQ @ U) * F) @ _swap(U)
        gM = gM + (gG + _swap(gG)) @ M
        return (gM.reshape(a.shape),)

    return _record(R[0] if single else R, (a,), bw)
