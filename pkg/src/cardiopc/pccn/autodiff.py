"""Minimal reverse-mode autodiff over numpy arrays.

Just enough operations for a point-completion network: dense layers, ReLU,
column-wise max pooling, concatenation, row tiling, and a Chamfer-distance
node. Gradients flow through a tape-free DAG; each Var holds its parents and
a closure that maps the upstream gradient to parent gradients.

All argmax/argmin selections are frozen at forward time with lowest-index
tie-breaking, so the backward pass is deterministic.
"""
import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape


def constant(value, dtype=np.float64) -> Var:
    return Var(np.asarray(value, dtype=dtype))


def _toposort(root: Var) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Accumulate gradients of `root` (scalar) into every reachable Var."""
    if root.value.ndim != 0:
        raise ValueError("backward expects a scalar root")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, contribution in node._backward(node.grad):
            if contribution is None:
                continue
            if parent.grad is None:
                # copy: closures may hand back the upstream buffer itself
                parent.grad = np.array(contribution)
            else:
                parent.grad += contribution


def matmul(a: Var, w: Var) -> Var:
    out = a.value @ w.value

    def back(g):
        return ((a, g @ w.value.T), (w, a.value.T @ g))

    return Var(out, (a, w), back)


def add_bias(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def back(g):
        return ((a, g), (b, g.sum(axis=0)))

    return Var(out, (a, b), back)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError("add expects matching shapes")
    out = a.value + b.value

    def back(g):
        return ((a, g), (b, g))

    return Var(out, (a, b), back)


def scale(a: Var, factor: float) -> Var:
    out = a.value * factor

    def back(g):
        return ((a, g * factor),)

    return Var(out, (a,), back)


def relu(a: Var) -> Var:
    mask = a.value > 0

    def back(g):
        return ((a, g * mask),)

    # np.maximum (not where) so NaN propagates instead of clamping to 0,
    # letting the loss-level finiteness check catch divergence
    return Var(np.maximum(a.value, 0.0), (a,), back)


def max_rows(a: Var) -> Var:
    """Column-wise max over rows, (n, k) -> (1, k). np.argmax picks the
    lowest row index on ties, which freezes the subgradient."""
    idx = np.argmax(a.value, axis=0)
    out = a.value[idx, np.arange(a.value.shape[1])][None, :]

    def back(g):
        ga = np.zeros_like(a.value)
        ga[idx, np.arange(a.value.shape[1])] = g[0]
        return ((a, ga),)

    return Var(out, (a,), back)


def broadcast_rows(a: Var, n: int) -> Var:
    """(1, k) -> (n, k) by repetition."""
    out = np.broadcast_to(a.value, (n, a.value.shape[1])).copy()

    def back(g):
        return ((a, g.sum(axis=0, keepdims=True)),)

    return Var(out, (a,), back)


def repeat_rows(a: Var, k: int) -> Var:
    """(m, d) -> (m*k, d), each row repeated k times consecutively."""
    m, d = a.value.shape
    out = np.repeat(a.value, k, axis=0)

    def back(g):
        return ((a, g.reshape(m, k, d).sum(axis=1)),)

    return Var(out, (a,), back)


def concat_cols(parts) -> Var:
    parts = list(parts)
    values = [p.value for p in parts]
    widths = [v.shape[1] for v in values]
    out = np.concatenate(values, axis=1)
    edges = np.cumsum([0] + widths)

    def back(g):
        return tuple((p, g[:, edges[i]:edges[i + 1]])
                     for i, p in enumerate(parts))

    return Var(out, tuple(parts), back)


def slice_rows(a: Var, start: int, stop: int) -> Var:
    out = a.value[start:stop].copy()

    def back(g):
        ga = np.zeros_like(a.value)
        ga[start:stop] = g
        return ((a, ga),)

    return Var(out, (a,), back)


def reshape(a: Var, shape) -> Var:
    out = a.value.reshape(shape)

    def back(g):
        return ((a, g.reshape(a.value.shape)),)

    return Var(out, (a,), back)


def add_scalars(terms) -> Var:
    terms = list(terms)
    out = terms[0].value
    for t in terms[1:]:
        out = out + t.value

    def back(g):
        return tuple((t, g) for t in terms)

    return Var(out, tuple(terms), back)


def _nn_pairs(a: np.ndarray, b: np.ndarray):
    """Argmin pairings a->b and b->a via the squared-distance matrix, then
    exact Euclidean distances for the selected pairs. Ties keep the lowest
    index (np.argmin)."""
    d2 = (np.einsum("ij,ij->i", a, a)[:, None]
          + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * (a @ b.T))
    ia = np.argmin(d2, axis=1)
    ib = np.argmin(d2, axis=0)
    da = np.linalg.norm(a - b[ia], axis=1)
    db = np.linalg.norm(a[ib] - b, axis=1)
    return ia, ib, da, db


def chamfer(a: Var, b: np.ndarray) -> Var:
    """Symmetric Chamfer distance between (n,3) Var a and constant (m,3) b:
    half the sum of the two directed mean nearest-neighbor distances.

    The backward pass keeps the forward argmin correspondences; coincident
    pairs (zero distance) contribute a zero subgradient.
    """
    bv = np.asarray(b, dtype=a.value.dtype)
    ia, ib, da, db = _nn_pairs(a.value, bv)
    out = a.value.dtype.type(0.5) * (da.mean() + db.mean())
    n, m = len(da), len(db)

    def back(g):
        g = float(g)
        diff_a = a.value - bv[ia]
        safe_a = np.where(da > 0.0, da, 1.0)
        ga = (diff_a / safe_a[:, None]) * (da > 0.0)[:, None] / (2.0 * n)
        diff_b = a.value[ib] - bv
        safe_b = np.where(db > 0.0, db, 1.0)
        gb = (diff_b / safe_b[:, None]) * (db > 0.0)[:, None] / (2.0 * m)
        acc = ga
        np.add.at(acc, ib, gb)
        return ((a, g * acc),)

    return Var(np.float64(out), (a,), back)
