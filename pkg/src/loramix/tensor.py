"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Row-major storage, explicit shape checks, no broadcasting beyond bias-add
over the leading dimension. Every documented operation validates that its
output is finite; NaN/Inf is an error state, never a value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ComputationTape",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "causal_self_attention",
    "column",
    "layernorm",
    "nll_mean",
    "scale_rows",
    "scatter_rows",
    "softmax",
    "take_rows",
    "tensor",
    "zeros",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced or received NaN/Inf values."""


def _as_f64(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


class Tensor:
    """Dense float64 array plus the graph bookkeeping needed for backward().

    Tensors produced by operations are immutable by convention; only leaf
    parameters may have their .data rewritten in place (by an optimizer,
    between graphs). After backward() on a downstream scalar, every
    requires_grad tensor reachable from it holds its accumulated gradient
    in .grad, with contributions from multiple uses added together.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "tensor constructor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, contribution: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.shape == other.shape:
            return _from_op(
                self.data + other.data,
                "add",
                (self, lambda g: g),
                (other, lambda g: g),
            )
        # bias-add: (n, d) + (d,) broadcasts over the leading dimension only
        if self.data.ndim == 2 and other.data.ndim == 1 and self.shape[1] == other.shape[0]:
            return _from_op(
                self.data + other.data,
                "bias_add",
                (self, lambda g: g),
                (other, lambda g: g.sum(axis=0)),
            )
        raise ShapeError(f"add: incompatible shapes {self.shape} and {other.shape}")

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self + (-other)

    def __neg__(self) -> "Tensor":
        return _from_op(-self.data, "neg", (self, lambda g: -g))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"mul: shapes differ {self.shape} vs {other.shape}")
            return _from_op(
                self.data * other.data,
                "mul",
                (self, lambda g, o=other.data: g * o),
                (other, lambda g, s=self.data: g * s),
            )
        c = float(other)
        return _from_op(self.data * c, "scale", (self, lambda g: g * c))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul needs 2-d operands, got {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul: inner dimensions differ, {self.shape} x {other.shape}"
            )
        return _from_op(
            self.data @ other.data,
            "matmul",
            (self, lambda g, b=other.data: g @ b.T),
            (other, lambda g, a=self.data: a.T @ g),
        )

    def t(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"t() needs a 2-d tensor, got {self.shape}")
        return _from_op(
            np.ascontiguousarray(self.data.T), "transpose", (self, lambda g: g.T)
        )

    # -- reductions and elementwise ------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            return _from_op(
                self.data.sum(),
                "sum",
                (self, lambda g, shp=self.shape: np.broadcast_to(g, shp)),
            )
        if axis != 0 or self.data.ndim != 2:
            raise ShapeError("sum(axis=...) supports axis=0 on 2-d tensors only")
        n = self.shape[0]
        return _from_op(
            self.data.sum(axis=0),
            "sum0",
            (self, lambda g: np.broadcast_to(g, (n, g.shape[0]))),
        )

    def mean(self) -> "Tensor":
        n = self.data.size
        return _from_op(
            self.data.mean(),
            "mean",
            (self, lambda g, shp=self.shape: np.broadcast_to(g / n, shp)),
        )

    def silu(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out = self.data * sig
        return _from_op(
            out,
            "silu",
            (self, lambda g, s=sig, x=self.data: g * (s * (1.0 + x * (1.0 - s)))),
        )

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _from_op(data: np.ndarray, op: str, *edges) -> Tensor:
    """Build the result tensor of an op, wiring backward edges for parents
    that require gradients. Tensors with no grad-requiring ancestors carry
    no graph at all, so frozen-weight subtrees cost nothing in backward."""
    out = Tensor.__new__(Tensor)
    out.data = _as_f64(data)
    _check_finite(out.data, f"op '{op}'")
    out.grad = None
    kept = [(p, fn) for p, fn in edges if p.requires_grad or p._parents]
    out.requires_grad = bool(kept)
    if kept:
        out._parents = tuple(p for p, _ in kept)
        out._grad_fns = tuple(fn for _, fn in kept)
    else:
        out._parents = ()
        out._grad_fns = ()
    return out


# -- tape ---------------------------------------------------------------------


@dataclass
class ComputationTape:
    """Topologically ordered record of the graph below a root tensor.

    run_backward visits entries in reverse topological order exactly once,
    applying each recorded gradient function and accumulating into parents.
    """

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def run_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.grad is None or not node._parents:
                continue
            for parent, fn in zip(node._parents, node._grad_fns):
                parent._accumulate(fn(node.grad))


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    ComputationTape.from_root(loss).run_backward(loss)


# -- fused / structured ops ----------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last dimension, computed with
    max-subtraction; output rows sum to 1 and are strictly positive."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g, p=p):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _from_op(p, "softmax", (x, grad_fn))


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a 2-d tensor to zero mean, unit variance."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm needs a 2-d tensor, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def grad_fn(g, xhat=xhat, inv=inv):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return inv * (g - gm - xhat * gx)

    return _from_op(xhat, "layernorm", (x, grad_fn))


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor at integer positions, preserving order."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got {x.shape}")

    def grad_fn(g, idx=idx, shape=x.shape):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return dx

    return _from_op(x.data[idx], "take_rows", (x, grad_fn))


def scatter_rows(rows: Tensor, idx: np.ndarray, total_rows: int) -> Tensor:
    """Place rows at integer positions in a zero tensor of total_rows rows.

    Inverse of take_rows for disjoint position sets; positions must be unique.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if rows.data.ndim != 2:
        raise ShapeError(f"scatter_rows needs 2-d rows, got {rows.shape}")
    if idx.size != rows.shape[0]:
        raise ShapeError(
            f"scatter_rows: {idx.size} positions for {rows.shape[0]} rows"
        )
    out = np.zeros((total_rows, rows.shape[1]))
    out[idx] = rows.data
    return _from_op(out, "scatter_rows", (rows, lambda g, idx=idx: g[idx]))


def column(x: Tensor, j: int) -> Tensor:
    """Extract column j of a 2-d tensor as a 1-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"column needs a 2-d tensor, got {x.shape}")

    def grad_fn(g, j=j, shape=x.shape):
        dx = np.zeros(shape)
        dx[:, j] = g
        return dx

    return _from_op(x.data[:, j].copy(), "column", (x, grad_fn))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of a 2-d tensor by scalar w[i]."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {w.shape}")
    return _from_op(
        x.data * w.data[:, None],
        "scale_rows",
        (x, lambda g, wv=w.data: g * wv[:, None]),
        (w, lambda g, xv=x.data: (g * xv).sum(axis=1)),
    )


def nll_mean(logits: Tensor, rows: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax.

    rows[i] selects the logit row scoring targets[i]; the mean runs over the
    selected rows only.
    """
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if rows.size == 0:
        raise ShapeError("nll_mean: no target positions")
    if rows.size != targets.size:
        raise ShapeError("nll_mean: rows and targets length mismatch")
    sub = logits.data[rows]
    z = sub - sub.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = logp[np.arange(rows.size), targets]
    loss = -picked.mean()

    def grad_fn(g, logp=logp, rows=rows, targets=targets, shape=logits.shape):
        dsub = np.exp(logp)
        dsub[np.arange(rows.size), targets] -= 1.0
        dsub *= g / rows.size
        dlogits = np.zeros(shape)
        np.add.at(dlogits, rows, dsub)
        return dlogits

    return _from_op(loss, "nll_mean", (logits, grad_fn))


def causal_self_attention(
    q: Tensor, k: Tensor, v: Tensor, num_heads: int, num_sequences: int
) -> Tensor:
    """Multi-head causal attention over num_sequences stacked sequences.

    q, k, v are (num_sequences * seq_len, dim); each sequence attends only to
    its own positions at or before the query position.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise ShapeError(f"attention: q/k/v must share a 2-d shape, got {q.shape}")
    total, dim = q.shape
    if total % num_sequences != 0:
        raise ShapeError(
            f"attention: {total} rows not divisible by {num_sequences} sequences"
        )
    if dim % num_heads != 0:
        raise ShapeError(f"attention: dim {dim} not divisible by {num_heads} heads")
    seq_len = total // num_sequences
    dh = dim // num_heads
    scale = 1.0 / np.sqrt(dh)

    def split(a):  # (B*L, d) -> (B, H, L, dh)
        return a.reshape(num_sequences, seq_len, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.einsum("bhid,bhjd->bhij", qh, kh) * scale
    mask = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("bhij,bhjd->bhid", w, vh)
    out2d = np.ascontiguousarray(
        out.transpose(0, 2, 1, 3).reshape(total, dim)
    )

    def merge(a):  # (B, H, L, dh) -> (B*L, d)
        return np.ascontiguousarray(a.transpose(0, 2, 1, 3).reshape(total, dim))

    def dq_fn(g):
        gh = split(g)
        dw = np.einsum("bhid,bhjd->bhij", gh, vh)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        return merge(np.einsum("bhij,bhjd->bhid", ds, kh) * scale)

    def dk_fn(g):
        gh = split(g)
        dw = np.einsum("bhid,bhjd->bhij", gh, vh)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        return merge(np.einsum("bhij,bhid->bhjd", ds, qh) * scale)

    def dv_fn(g):
        gh = split(g)
        return merge(np.einsum("bhij,bhid->bhjd", w, gh))

    return _from_op(out2d, "attention", (q, dq_fn), (k, dk_fn), (v, dv_fn))
