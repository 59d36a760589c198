"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records one node on an implicit tape. ``backward`` replays
the tape for a scalar root in reverse record order, which fixes the gradient
accumulation order and makes gradients bitwise reproducible. Tensor data is
immutable after construction; training code produces new tensors instead of
updating in place.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

_seq = itertools.count()
_state = threading.local()

# tanh-form GELU constant sqrt(2/pi)
_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


def _tracing() -> bool:
    return getattr(_state, "tracing", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher/eval forwards)."""
    prev = _tracing()
    _state.tracing = False
    try:
        yield
    finally:
        _state.tracing = prev


class _Node:
    """One primitive application: op id, input refs, output ref, vjp."""

    __slots__ = ("op", "inputs", "output", "vjp", "seq")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    """Immutable dense array, optionally tracked for gradients."""

    __slots__ = ("_data", "grad_tracked", "grad", "_node")

    def __init__(self, data, grad_tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        self._data = arr
        self.grad_tracked = bool(grad_tracked)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, grad_tracked: bool) -> "Tensor":
        """Take ownership of a freshly allocated float64 array, no copy."""
        t = cls.__new__(cls)
        if arr.dtype != np.float64 or arr.base is not None:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t._data = arr
        t.grad_tracked = grad_tracked
        t.grad = None
        t._node = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self._data)

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = ", tracked" if self.grad_tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; the named functions below are the real surface
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, grad_tracked: bool = False) -> Tensor:
    return Tensor(data, grad_tracked=grad_tracked)


def constant(data) -> Tensor:
    return Tensor(data)


def _result(op, out_data, inputs, vjp) -> Tensor:
    tracked = _tracing() and any(t.grad_tracked for t in inputs)
    out = Tensor._wrap(np.asarray(out_data), tracked)
    if tracked:
        out._node = _Node(op, tuple(inputs), out, vjp)
    return out


def _require_2d(op: str, *xs: Tensor) -> None:
    for x in xs:
        if x.ndim != 2:
            raise DimensionError(f"{op} expects 2-D operands, got shape {x.shape}")


class ComputeGraph:
    """Topologically ordered record of the primitives behind one tensor."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes

    @classmethod
    def of(cls, root: Tensor) -> "ComputeGraph":
        seen: set[int] = set()
        nodes: list[_Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


def backward(root: Tensor, populate: bool = True) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every grad-tracked leaf under root.

    Returns a map keyed by tensor identity. When ``populate`` is set the
    ``grad`` buffer of each tracked tensor is also filled in.
    """
    if root.ndim != 0:
        raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
    graph = ComputeGraph.of(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(root): root}
    for node in reversed(graph.nodes):
        out_grad = grads.get(id(node.output))
        if out_grad is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(out_grad)):
            if g is None or not (inp.grad_tracked or inp._node is not None):
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g
            holders[id(inp)] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = holders[key]
        if t.grad_tracked:
            out[t] = g
            if populate:
                t.grad = g.copy()
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(dy):
        return dy @ b.data.T, a.data.T @ dy

    return _result("matmul", out, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a broadcast bias row; one fused node."""
    _require_2d("affine", x, w)
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shapes disagree: {x.shape} x {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data

    def vjp(dy):
        return dy @ w.data.T, x.data.T @ dy, dy.sum(axis=0)

    return _result("affine", out, (x, w, b), vjp)


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)

    def vjp(dy):
        return (dy.T,)

    return _result("transpose", x.data.T, (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise kernels


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} operand shapes disagree: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def vjp(dy):
        return dy, dy

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def vjp(dy):
        return dy, -dy

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def vjp(dy):
        return dy * b.data, dy * a.data

    return _result("mul", a.data * b.data, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(dy):
        return (dy * c,)

    return _result("scale", x.data * c, (x,), vjp)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def vjp(dy):
        return (dy,)

    return _result("add_scalar", x.data + float(c), (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(dy):
        return (dy * out,)

    return _result("exp", out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    def vjp(dy):
        return (dy / x.data,)

    return _result("log", np.log(x.data), (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(dy):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        return (dy * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return _result("gelu", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor) -> Tensor:
    n = x.size

    def vjp(dy):
        return (np.full(x.shape, float(dy) / n),)

    return _result("mean", np.asarray(x.data.mean()), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(dy):
        return (np.full(x.shape, float(dy)),)

    return _result("sum_all", np.asarray(x.data.sum()), (x,), vjp)


def sum_rows(x: Tensor) -> Tensor:
    """Row sums of a 2-D tensor, shape (m,)."""
    _require_2d("sum_rows", x)

    def vjp(dy):
        return (np.repeat(dy[:, None], x.shape[1], axis=1),)

    return _result("sum_rows", x.data.sum(axis=1), (x,), vjp)


def mean_vec(x: Tensor) -> Tensor:
    """Mean of a 1-D tensor as a scalar."""
    if x.ndim != 1:
        raise DimensionError(f"mean_vec expects a vector, got shape {x.shape}")
    n = x.size

    def vjp(dy):
        return (np.full(x.shape, float(dy) / n),)

    return _result("mean_vec", np.asarray(x.data.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# structure


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    _require_2d("concat_rows", *parts)
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise DimensionError(
                f"concat_rows widths disagree: {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(dy):
        return tuple(dy[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _result("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise ContractError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")

    def vjp(dy):
        g = np.zeros(x.shape)
        g[start:stop] = dy
        return (g,)

    return _result("slice_rows", x.data[start:stop], (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise ContractError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")

    def vjp(dy):
        g = np.zeros(x.shape)
        g[:, start:stop] = dy
        return (g,)

    return _result("slice_cols", x.data[:, start:stop], (x,), vjp)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows by index; scatter-add on backward (embedding lookup)."""
    _require_2d("take_rows", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take_rows indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"take_rows index out of range for table {table.shape}")

    def vjp(dy):
        g = np.zeros(table.shape)
        np.add.at(g, idx, dy)
        return (g,)

    return _result("take_rows", table.data[idx], (table,), vjp)


def diag_part(x: Tensor) -> Tensor:
    _require_2d("diag_part", x)
    if x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag_part expects a square matrix, got {x.shape}")

    def vjp(dy):
        return (np.diag(dy),)

    return _result("diag_part", np.diagonal(x.data).copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# row-structured kernels


def softmax_rows(x: Tensor) -> Tensor:
    """Stable per-row softmax (max subtraction before exponentiation)."""
    _require_2d("softmax_rows", x)
    if not np.isfinite(x.data).all():
        raise NumericDomainError("softmax_rows input contains non-finite entries")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(dy):
        inner = (dy * out).sum(axis=1, keepdims=True)
        return ((dy - inner) * out,)

    return _result("softmax_rows", out, (x,), vjp)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (x - mean)/sqrt(var + eps) * gain + bias, population variance."""
    _require_2d("layer_norm_rows", x)
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm_rows gain/bias must be ({n},), got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm_rows eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(dy):
        dgain = (dy * xhat).sum(axis=0)
        dbias = dy.sum(axis=0)
        dxhat = dy * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, dgain, dbias

    return _result("layer_norm_rows", out, (x, gain, bias), vjp)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; rows with norm < eps are scaled by 1/eps."""
    _require_2d("l2_normalize_rows", x)
    if eps <= 0:
        raise ContractError("l2_normalize_rows eps must be positive")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    out = x.data / denom

    def vjp(dy):
        small = norms < eps
        inner = (dy * out).sum(axis=1, keepdims=True)
        dx = np.where(small, dy / eps, (dy - out * inner) / denom)
        return (dx,)

    return _result("l2_normalize_rows", out, (x,), vjp)


def cross_entropy_rows(scores: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over rows of cross-entropy between row-softmaxed scores and targets.

    ``target_probs`` is a constant row-stochastic matrix; the common case is
    one-hot rows. Computed through a stable log-softmax.
    """
    _require_2d("cross_entropy_rows", scores)
    p = np.asarray(target_probs, dtype=np.float64)
    if p.shape != scores.shape:
        raise DimensionError(
            f"cross_entropy_rows target shape {p.shape} != scores shape {scores.shape}"
        )
    m = scores.shape[0]
    row_max = scores.data.max(axis=1, keepdims=True)
    shifted = scores.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + row_max
    loss = float((lse[:, 0] - (p * scores.data).sum(axis=1)).mean())
    softmax = np.exp(scores.data - lse)

    def vjp(dy):
        return (float(dy) * (softmax - p) / m,)

    return _result("cross_entropy_rows", np.asarray(loss), (scores,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Bidirectional multi-head scaled dot-product attention, one fused node.

    q, k, v are (seq, d_model); columns are split into n_heads equal slices.
    """
    _require_2d("attention", q, k, v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(
            f"attention operand shapes disagree: {q.shape}, {k.shape}, {v.shape}"
        )
    s, d = q.shape
    if n_heads < 1 or d % n_heads != 0:
        raise ContractError(f"n_heads {n_heads} must divide d_model {d}")
    dh = d // n_heads
    inv_scale = 1.0 / np.sqrt(dh)

    def split(t):
        # (seq, d) -> (heads, seq, dh)
        return t.reshape(s, n_heads, dh).transpose(1, 0, 2)

    q3, k3, v3 = split(q.data), split(k.data), split(v.data)
    z = (q3 @ k3.transpose(0, 2, 1)) * inv_scale
    z -= z.max(axis=2, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=2, keepdims=True)
    out3 = a @ v3
    out = out3.transpose(1, 0, 2).reshape(s, d)

    def vjp(dy):
        dy3 = dy.reshape(s, n_heads, dh).transpose(1, 0, 2)
        dv3 = a.transpose(0, 2, 1) @ dy3
        da = dy3 @ v3.transpose(0, 2, 1)
        dz = (da - (da * a).sum(axis=2, keepdims=True)) * a * inv_scale
        dq3 = dz @ k3
        dk3 = dz.transpose(0, 2, 1) @ q3

        def merge(t3):
            return t3.transpose(1, 0, 2).reshape(s, d)

        return merge(dq3), merge(dk3), merge(dv3)

    return _result("attention", out, (q, k, v), vjp)
