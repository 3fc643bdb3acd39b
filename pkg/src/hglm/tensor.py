"""Dense float64 tensors with reverse-mode automatic differentiation.

Provides exactly the primitives a small decoder-only transformer needs:
matrix multiply, elementwise arithmetic, SiLU, RMSNorm, softmax, rotary
rotation, embedding gather, and a fused cross-entropy head with an optional
log-partition penalty. Gradients accumulate by summation into ``.grad``;
the graph is freed after ``backward()`` unless asked otherwise.

Everything is float64 and single-threaded-deterministic: the same inputs
always produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff.

    Non-leaf tensors remember their parents, a backward closure and a
    recompute closure (used by ComputationRecord.replay). Data is never
    mutated after creation; only ``.grad`` is written to.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_recompute", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._recompute = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, op, backward, recompute):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
            out._recompute = recompute
            out._op = op
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("add expects a Tensor; use add_const for raw arrays")
        if self.data.shape != other.data.shape:
            raise ShapeError(f"add shapes {self.data.shape} and {other.data.shape} differ")
        a, b = self, other

        def backward(g):
            a._accumulate(g)
            b._accumulate(g)

        return Tensor._result(a.data + b.data, (a, b), "add", backward, lambda: a.data + b.data)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if self.data.shape != other.data.shape:
                raise ShapeError(f"mul shapes {self.data.shape} and {other.data.shape} differ")
            a, b = self, other

            def backward(g):
                a._accumulate(g * b.data)
                b._accumulate(g * a.data)

            return Tensor._result(a.data * b.data, (a, b), "mul", backward, lambda: a.data * b.data)
        c = float(other)
        a = self

        def backward_scalar(g):
            a._accumulate(g * c)

        return Tensor._result(a.data * c, (a,), "scale", backward_scalar, lambda: a.data * c)

    __rmul__ = __mul__

    def add_const(self, const) -> "Tensor":
        """Add a constant array (no gradient flows into the constant)."""
        arr = np.asarray(const, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"add_const shapes {self.data.shape} and {arr.shape} differ")
        a = self

        def backward(g):
            a._accumulate(g)

        return Tensor._result(a.data + arr, (a,), "add_const", backward, lambda: a.data + arr)

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {self.data.shape} and {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul shapes {self.data.shape} and {other.data.shape} are incompatible")
        a, b = self, other

        def backward(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

        return Tensor._result(a.data @ b.data, (a, b), "matmul", backward, lambda: a.data @ b.data)

    __matmul__ = matmul

    def t(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose needs a 2-D operand, got {self.data.shape}")
        a = self

        def backward(g):
            a._accumulate(g.T)

        return Tensor._result(a.data.T.copy(), (a,), "transpose", backward, lambda: a.data.T.copy())

    def cols(self, lo: int, hi: int) -> "Tensor":
        """Contiguous column slice of a 2-D tensor (one attention head)."""
        if self.data.ndim != 2:
            raise ShapeError(f"cols needs a 2-D operand, got {self.data.shape}")
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            a._accumulate(full)

        return Tensor._result(a.data[:, lo:hi].copy(), (a,), "cols", backward,
                              lambda: a.data[:, lo:hi].copy())

    def sum(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(np.full_like(a.data, float(g)))

        return Tensor._result(a.data.sum(), (a,), "sum", backward, lambda: a.data.sum())

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size

        def backward(g):
            a._accumulate(np.full_like(a.data, float(g) / n))

        return Tensor._result(a.data.mean(), (a,), "mean", backward, lambda: a.data.mean())

    def silu(self) -> "Tensor":
        a = self
        s = _sigmoid(a.data)

        def backward(g):
            a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

        return Tensor._result(a.data * s, (a,), "silu", backward, lambda: a.data * _sigmoid(a.data))

    # -- backward ------------------------------------------------------------

    def backward(self, free_graph: bool = True) -> None:
        """Reverse-mode pass from a scalar; populates .grad on requires_grad leaves.

        Gradients add into any existing .grad, so repeated backward calls
        across separate graphs accumulate (used for multi-sequence batches).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        order = _topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if free_graph:
            for node in order:
                if node._prev:
                    node.grad = None
                    node._prev = ()
                    node._backward = None
                    node._recompute = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form: never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS post-order: parents appear before consumers get popped
    # in the reversed traversal. Recursion would overflow on deep models.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- module-level primitives used by the model --------------------------------


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    return x.silu()


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row root-mean-square normalization with a learned scale.

    Each length-d row of x is divided by sqrt(mean(x^2) + eps) and scaled
    elementwise by gamma.
    """
    if gamma.data.ndim != 1 or x.data.shape[-1] != gamma.data.shape[0]:
        raise ShapeError(f"rmsnorm: last dim of {x.data.shape} must match gamma {gamma.data.shape}")
    d = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    inv = 1.0 / r

    def forward():
        return (x.data * (1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps))) * gamma.data

    out_data = (x.data * inv) * gamma.data

    def backward(g):
        gg = g * gamma.data
        # d/dx of x_j / r: diagonal term minus the mean-square coupling.
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        x._accumulate(gg * inv - x.data * (dot / (d * r ** 3)))
        gamma._accumulate(np.sum(g * (x.data * inv), axis=tuple(range(x.data.ndim - 1))))

    return Tensor._result(out_data, (x, gamma), "rmsnorm", backward, forward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along an axis; every slice sums to 1."""

    def forward():
        shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    out_data = forward()

    def backward(g):
        x._accumulate(out_data * (g - np.sum(g * out_data, axis=axis, keepdims=True)))

    return Tensor._result(out_data, (x,), "softmax", backward, forward)


def rope(x: Tensor, positions, theta: float) -> Tensor:
    """Rotary rotation of a (T, d) tensor, d even, half-split convention.

    Dimension pair (j, j + d/2) is rotated by angle pos * theta^(-2j/d).
    An isometry per row, so gradients rotate back by the transpose.
    """
    T, d = x.data.shape
    if d % 2 != 0:
        raise ShapeError(f"rope needs an even last dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (T,):
        raise ShapeError(f"rope positions length {pos.shape} does not match T={T}")
    half = d // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    angles = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    def forward():
        x1, x2 = x.data[:, :half], x.data[:, half:]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)

    def backward(g):
        g1, g2 = g[:, :half], g[:, half:]
        x._accumulate(np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=1))

    return Tensor._result(forward(), (x,), "rope", backward, forward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of a (V, d) table; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return Tensor._result(table.data[idx], (table,), "embedding", backward,
                          lambda: table.data[idx])


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns (reassemble attention heads)."""
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError("concat_cols needs 2-D tensors with equal row counts")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[:, lo:hi])

    def forward():
        return np.concatenate([p.data for p in parts], axis=1)

    return Tensor._result(forward(), tuple(parts), "concat_cols", backward, forward)


def cross_entropy(logits: Tensor, targets, z_coeff: float = 0.0) -> Tensor:
    """Mean next-token cross-entropy plus z_coeff * mean((log Z)^2).

    Z is the per-position partition sum of exp(logits); the squared
    log-partition penalty keeps logit scale anchored. Fused so the backward
    rule is the exact analytic softmax gradient.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    T, V = logits.data.shape
    if tgt.shape != (T,):
        raise ShapeError(f"cross_entropy targets shape {tgt.shape} does not match T={T}")
    if tgt.min(initial=0) < 0 or tgt.max(initial=0) >= V:
        raise ValueError(f"cross_entropy target id out of range for vocab {V}")

    def compute():
        m = np.max(logits.data, axis=1, keepdims=True)
        e = np.exp(logits.data - m)
        z = np.sum(e, axis=1, keepdims=True)
        log_z = (m + np.log(z))[:, 0]
        p = e / z
        ce = float(np.mean(log_z - logits.data[np.arange(T), tgt]))
        zl = z_coeff * float(np.mean(log_z ** 2))
        return np.asarray(ce + zl), p, log_z

    out_data, probs, log_z = compute()

    def backward(g):
        gs = float(g)
        grad = probs.copy()
        grad[np.arange(T), tgt] -= 1.0
        if z_coeff != 0.0:
            grad += (2.0 * z_coeff) * log_z[:, None] * probs
        logits._accumulate(grad * (gs / T))

    return Tensor._result(out_data, (logits,), "cross_entropy", backward, lambda: compute()[0])


# -- computation record --------------------------------------------------------


@dataclass(frozen=True)
class RecordEntry:
    """One primitive application: op name, parent tensor ids, output id."""

    op: str
    inputs: tuple[int, ...]
    output: int


class ComputationRecord:
    """Topologically ordered trace of the primitives behind one output.

    Capture before backward(): the default backward frees the graph. Replay
    recomputes every non-leaf from its parents and checks the result is
    bit-identical to the recorded forward.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def capture(cls, root: Tensor) -> "ComputationRecord":
        return cls(_topo_order(root))

    def entries(self) -> list[RecordEntry]:
        return [
            RecordEntry(n._op, tuple(id(p) for p in n._prev), id(n))
            for n in self.nodes
            if n._prev
        ]

    def replay(self) -> np.ndarray:
        """Recompute every recorded primitive; raise if any output changed."""
        for node in self.nodes:
            if not node._prev:
                continue
            if node._recompute is None:
                raise RuntimeError("record was freed; capture before backward()")
            fresh = np.asarray(node._recompute())
            if not np.array_equal(fresh, node.data):
                raise RuntimeError(f"replay of {node._op} did not reproduce the forward output")
        return self.nodes[-1].data
