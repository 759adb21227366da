"""Define-by-run reverse-mode automatic differentiation over matrices.

A Tape records every primitive applied to its nodes, in creation order.
The tape is rebuilt on every forward pass; backward() replays it once in
exact reverse order, accumulating vector-Jacobian products. Leaves are
registered as trainable or frozen; frozen leaves never receive gradient
entries, though gradients still flow through operations that consume
them (a frozen weight in the middle of a network does not block the
chain rule).

All node values are 2-D float64 arrays; scalars are 1x1.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ShapeMismatchError, SymloraError
from .matrix import Matrix

GradientMap = dict[str, Matrix]

_GELU_K = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715


def _as_array(value) -> np.ndarray:
    a = value.to_numpy() if isinstance(value, Matrix) else np.asarray(value, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"tape values must be 2-D, got shape {a.shape}")
    return a


class Node:
    """One value in the computation, with the recipe to backpropagate into
    its parents."""

    __slots__ = ("value", "idx", "needs_grad", "parents", "vjps", "name", "trainable")

    def __init__(self, value, idx, needs_grad, parents, vjps, name=None, trainable=False):
        self.value = value
        self.idx = idx
        self.needs_grad = needs_grad
        self.parents = parents
        self.vjps = vjps
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def matrix(self) -> Matrix:
        return Matrix(self.value)


class Tape:
    """Ordered record of primitive operations plus the leaf registry."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._leaf_names: set[str] = set()

    def __len__(self) -> int:
        return len(self._nodes)

    # -- leaves ----------------------------------------------------------

    def leaf(self, value, name: str | None = None, trainable: bool = False) -> Node:
        """Register a leaf. Trainable leaves must carry a unique name."""
        if trainable and name is None:
            raise SymloraError("trainable leaves require a name")
        if name is not None:
            if name in self._leaf_names:
                raise SymloraError(f"duplicate leaf name on tape: {name!r}")
            self._leaf_names.add(name)
        node = Node(_as_array(value), len(self._nodes), trainable, (), (),
                    name=name, trainable=trainable)
        self._nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value)

    def trainable_leaves(self) -> list[Node]:
        return [n for n in self._nodes if n.trainable]

    def _record(self, value: np.ndarray,
                parents: Sequence[Node],
                vjps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Node:
        needs = any(p.needs_grad for p in parents)
        # Keep only the vjps that can reach a trainable leaf.
        kept = tuple((p, f) for p, f in zip(parents, vjps) if p.needs_grad)
        node = Node(value, len(self._nodes), needs, tuple(p for p, _ in kept),
                    tuple(f for _, f in kept))
        self._nodes.append(node)
        return node

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(
                f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        av, bv = a.value, b.value
        return self._record(av @ bv, (a, b),
                            (lambda g: g @ bv.T, lambda g: av.T @ g))

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "add")
        return self._record(a.value + b.value, (a, b), (lambda g: g, lambda g: g))

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "sub")
        return self._record(a.value - b.value, (a, b), (lambda g: g, lambda g: -g))

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product."""
        self._same_shape(a, b, "mul")
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))

    def scale(self, a: Node, c: float) -> Node:
        """Multiply by a constant scalar (not a tape value)."""
        c = float(c)
        return self._record(a.value * c, (a,), (lambda g: g * c,))

    def smul(self, s: Node, a: Node) -> Node:
        """Multiply by a trainable 1x1 scalar node."""
        if s.shape != (1, 1):
            raise ShapeMismatchError(f"smul: scalar operand must be 1x1, got {s.shape}")
        sv = float(s.value[0, 0])
        av = a.value
        return self._record(sv * av, (s, a),
                            (lambda g: np.array([[float(np.sum(g * av))]]),
                             lambda g: sv * g))

    def transpose(self, a: Node) -> Node:
        return self._record(np.ascontiguousarray(a.value.T), (a,),
                            (lambda g: np.ascontiguousarray(g.T),))

    def add_col(self, a: Node, v: Node) -> Node:
        """Add a column vector to every column of a."""
        if v.shape != (a.shape[0], 1):
            raise ShapeMismatchError(f"add_col: expected {(a.shape[0], 1)}, got {v.shape}")
        return self._record(a.value + v.value, (a, v),
                            (lambda g: g, lambda g: g.sum(axis=1, keepdims=True)))

    def mul_col(self, a: Node, v: Node) -> Node:
        """Scale row i of a by v[i]; realizes diag(v) @ a."""
        if v.shape != (a.shape[0], 1):
            raise ShapeMismatchError(f"mul_col: expected {(a.shape[0], 1)}, got {v.shape}")
        av, vv = a.value, v.value
        return self._record(av * vv, (a, v),
                            (lambda g: g * vv,
                             lambda g: (g * av).sum(axis=1, keepdims=True)))

    def add_const(self, a: Node, m: np.ndarray) -> Node:
        """Add a constant array (e.g. an attention mask)."""
        if m.shape != a.shape:
            raise ShapeMismatchError(f"add_const: shapes {a.shape} and {m.shape} differ")
        return self._record(a.value + m, (a,), (lambda g: g,))

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._record(np.array([[float(a.value.sum())]]), (a,),
                            (lambda g: np.full(shape, g[0, 0]),))

    def mean(self, a: Node) -> Node:
        shape = a.shape
        size = shape[0] * shape[1]
        return self._record(np.array([[float(a.value.mean())]]), (a,),
                            (lambda g: np.full(shape, g[0, 0] / size),))

    def tanh(self, a: Node) -> Node:
        t = np.tanh(a.value)
        return self._record(t, (a,), (lambda g: g * (1.0 - t * t),))

    def gelu(self, a: Node) -> Node:
        """Gaussian error linear unit, tanh form."""
        x = a.value
        x2 = x * x
        t = np.tanh(_GELU_K * (x + _GELU_C * x2 * x))
        y = 0.5 * x * (1.0 + t)
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return self._record(y, (a,), (lambda g: g * dy,))

    def softmax_cols(self, a: Node) -> Node:
        """Softmax over each column."""
        z = a.value - a.value.max(axis=0, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=0, keepdims=True)
        return self._record(
            p, (a,),
            (lambda g: p * (g - (g * p).sum(axis=0, keepdims=True)),))

    def layer_norm_cols(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
        """Normalize each column to zero mean / unit variance, then apply a
        per-row affine map."""
        n = x.shape[0]
        if gamma.shape != (n, 1) or beta.shape != (n, 1):
            raise ShapeMismatchError(
                f"layer_norm_cols: affine params must be {(n, 1)}, "
                f"got {gamma.shape} and {beta.shape}")
        xv = x.value
        mu = xv.mean(axis=0, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        gv = gamma.value
        out = gv * xhat + beta.value

        def vjp_x(g: np.ndarray) -> np.ndarray:
            gh = g * gv
            return inv * (gh - gh.mean(axis=0, keepdims=True)
                          - xhat * (gh * xhat).mean(axis=0, keepdims=True))

        return self._record(
            out, (x, gamma, beta),
            (vjp_x,
             lambda g: (g * xhat).sum(axis=1, keepdims=True),
             lambda g: g.sum(axis=1, keepdims=True)))

    def embed(self, table: Node, ids: np.ndarray) -> Node:
        """Gather columns of table by integer id; out[:, k] = table[:, ids[k]]."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        vocab = table.shape[1]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ShapeMismatchError(f"embed: id out of range for table with {vocab} columns")
        shape = table.shape

        def vjp(g: np.ndarray) -> np.ndarray:
            dt = np.zeros(shape)
            np.add.at(dt.T, ids, g.T)
            return dt

        return self._record(np.ascontiguousarray(table.value[:, ids]), (table,), (vjp,))

    def seq_mean_pool(self, x: Node, seq_len: int) -> Node:
        """Mean over each consecutive block of seq_len columns."""
        d, n = x.shape
        if n % seq_len != 0:
            raise ShapeMismatchError(f"seq_mean_pool: {n} columns not divisible by {seq_len}")
        b = n // seq_len
        out = x.value.reshape(d, b, seq_len).mean(axis=2)
        return self._record(np.ascontiguousarray(out), (x,),
                            (lambda g: np.repeat(g, seq_len, axis=1) / seq_len,))

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        shape = a.shape
        if not (0 <= start < stop <= shape[0]):
            raise ShapeMismatchError(f"slice_rows: [{start}:{stop}] out of range for {shape}")

        def vjp(g: np.ndarray) -> np.ndarray:
            out = np.zeros(shape)
            out[start:stop, :] = g
            return out

        return self._record(np.ascontiguousarray(a.value[start:stop, :]), (a,), (vjp,))

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        if not parts:
            raise SymloraError("concat_rows: need at least one part")
        cols = parts[0].shape[1]
        for p in parts:
            if p.shape[1] != cols:
                raise ShapeMismatchError("concat_rows: column counts differ")
        offsets = np.cumsum([0] + [p.shape[0] for p in parts])

        def make_vjp(i: int):
            lo, hi = offsets[i], offsets[i + 1]
            return lambda g: g[lo:hi, :]

        value = np.concatenate([p.value for p in parts], axis=0)
        return self._record(value, tuple(parts),
                            tuple(make_vjp(i) for i in range(len(parts))))

    def cross_entropy_cols(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean negative log-likelihood of per-column class labels."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        n_classes, batch = logits.shape
        if labels.shape[0] != batch:
            raise ShapeMismatchError(
                f"cross_entropy_cols: {labels.shape[0]} labels for {batch} columns")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ShapeMismatchError("cross_entropy_cols: label out of range")
        z = logits.value - logits.value.max(axis=0, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=0, keepdims=True)
        cols = np.arange(batch)
        nll = -(z[labels, cols] - np.log(e.sum(axis=0)))
        loss = np.array([[float(nll.mean())]])

        def vjp(g: np.ndarray) -> np.ndarray:
            d = p.copy()
            d[labels, cols] -= 1.0
            return d * (g[0, 0] / batch)

        return self._record(loss, (logits,), (vjp,))

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def _same_shape(a: Node, b: Node, op: str) -> None:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def register_leaves(
    tape: Tape,
    entries: Sequence[tuple[str, np.ndarray, bool]],
    freeze_all: bool = False,
) -> tuple[dict[str, Node], dict[str, np.ndarray], set[str]]:
    """Register (key, array, trainable) parameter entries as tape leaves.

    Entries sharing one underlying array (tied parameters) map to a
    single leaf under the first key seen; alias keys resolve to the same
    node so gradients accumulate once. Returns (leaves by key, canonical
    arrays by key, trainable key set).
    """
    leaves: dict[str, Node] = {}
    arrays: dict[str, np.ndarray] = {}
    trainset: set[str] = set()
    seen: dict[int, str] = {}
    for key, arr, trainable in entries:
        owner = seen.get(id(arr))
        if owner is not None:
            leaves[key] = leaves[owner]
            continue
        seen[id(arr)] = key
        is_trainable = trainable and not freeze_all
        leaves[key] = tape.leaf(arr, name=key, trainable=is_trainable)
        arrays[key] = arr
        if is_trainable:
            trainset.add(key)
    return leaves, arrays, trainset


def backward(tape: Tape, loss: Node) -> GradientMap:
    """Gradients of a scalar loss w.r.t. every trainable leaf on the tape.

    Frozen leaves are absent from the result; trainable leaves the loss
    does not depend on get zero gradients of matching shape.
    """
    if tape._nodes[loss.idx] is not loss:
        raise SymloraError("backward: loss node does not belong to this tape")
    if loss.shape != (1, 1):
        raise SymloraError(f"backward: loss must be scalar (1x1), got {loss.shape}")

    out: GradientMap = {
        n.name: Matrix.zeros(*n.shape) for n in tape._nodes if n.trainable
    }
    if not loss.needs_grad:
        return out

    grads: dict[int, np.ndarray] = {loss.idx: np.ones((1, 1))}
    for node in reversed(tape._nodes[: loss.idx + 1]):
        g = grads.pop(node.idx, None)
        if g is None or not node.needs_grad:
            continue
        if node.trainable:
            out[node.name] = out[node.name] + Matrix._wrap(g.copy())
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(parent.idx)
            grads[parent.idx] = contrib if prev is None else prev + contrib
    return out


def finite_difference_gradient(
    f: Callable[[Mapping[str, Matrix]], float],
    params: Mapping[str, Matrix],
    eps: float,
) -> GradientMap:
    """Central-difference gradient of a scalar function, one coordinate at
    a time: (f(p + eps*e) - f(p - eps*e)) / (2*eps)."""
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    out: GradientMap = {}
    base = {k: v.to_numpy().copy() for k, v in params.items()}
    for name, value in params.items():
        grad = np.zeros(value.shape)
        work = base[name]
        flat = work.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f({k: Matrix(v) for k, v in base.items()})
            flat[i] = orig - eps
            lo = f({k: Matrix(v) for k, v in base.items()})
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out[name] = Matrix._wrap(grad)
    return out


def max_relative_error(a: Mapping[str, Matrix], b: Mapping[str, Matrix]) -> float:
    """Largest |a - b| / max(1, |a|, |b|) over all shared entries.

    The unit floor in the denominator keeps the measure absolute for
    near-zero gradients and relative for large ones.
    """
    worst = 0.0
    for name in a:
        if name not in b:
            raise SymloraError(f"gradient maps disagree on parameter set: {name!r}")
        av = a[name].to_numpy()
        bv = b[name].to_numpy()
        denom = np.maximum(1.0, np.maximum(np.abs(av), np.abs(bv)))
        worst = max(worst, float(np.max(np.abs(av - bv) / denom)))
    return worst


def check_gradients(
    build_loss: Callable[[Tape, dict[str, Node]], Node],
    params: Mapping[str, Matrix],
    trainable: set[str] | None = None,
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    build_loss receives a fresh Tape plus a leaf node per parameter and
    must return a scalar node. Parameters outside `trainable` (when
    given) enter the tape frozen.
    """

    def is_trainable(name: str) -> bool:
        return trainable is None or name in trainable

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k, trainable=is_trainable(k)) for k, v in params.items()}
    loss = build_loss(tape, leaves)
    analytic = backward(tape, loss)

    def f(values: Mapping[str, Matrix]) -> float:
        t2 = Tape()
        lv = {k: t2.leaf(values[k], name=k, trainable=is_trainable(k)) for k in params}
        return float(build_loss(t2, lv).value[0, 0])

    checked = {k: v for k, v in params.items() if is_trainable(k)}
    numeric = finite_difference_gradient(f, checked, eps)
    return max_relative_error({k: analytic[k] for k in checked}, numeric)
