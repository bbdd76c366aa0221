"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy array of 64-bit floats in row-major order.  Ops build
an explicit computation graph (each output remembers its parents and a
closure computing parent gradients), and `backward` walks that graph once in
reverse topological order.  Graph construction can be switched off with
`no_grad()` for pure inference.

Broadcasting support is deliberately narrow: equal shapes, a trailing-axis
vector against a matrix (bias rows), and scalars.  That is all the encoder
needs.
"""
from __future__ import annotations

import math
import warnings

import numpy as np

NORM_EPS = 1e-12  # floor for vector norms in cosine / normalization
LN_EPS = 1e-5     # variance floor inside layer_norm

_GRAD_ENABLED = True


class NormClampWarning(UserWarning):
    """Raised-as-warning when a vector norm hits the NORM_EPS floor."""


class no_grad:
    """Context manager: ops executed inside build no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Detached copy of the value."""
        return np.array(self.data, dtype=np.float64)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.array(self.data), requires_grad=requires_grad)

    def is_leaf(self) -> bool:
        return self._backward is None

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return sum_all(self) * (1.0 / self.size)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic primitives -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back(g):
        A, B = a.data, b.data
        A2 = A.reshape(1, -1) if A.ndim == 1 else A
        B2 = B.reshape(-1, 1) if B.ndim == 1 else B
        if A.ndim == 1 and B.ndim == 1:
            G2 = g.reshape(1, 1)
        elif A.ndim == 1:
            G2 = g.reshape(1, -1)
        elif B.ndim == 1:
            G2 = g.reshape(-1, 1)
        else:
            G2 = g
        return (G2 @ B2.T).reshape(A.shape), (A2.T @ G2).reshape(B.shape)

    return _make(data, (a, b), back, "matmul")


def sum_all(t: Tensor) -> Tensor:
    data = np.asarray(t.data.sum())

    def back(g):
        return (np.broadcast_to(g, t.shape).astype(np.float64),)

    return _make(data, (t,), back, "sum")


# -- shape primitives --------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    data = t.data.reshape(shape)

    def back(g):
        return (g.reshape(t.shape),)

    return _make(data, (t,), back, "reshape")


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {t.shape}")
    data = t.data.T

    def back(g):
        return (g.T,)

    return _make(data, (t,), back, "transpose")


def embedding_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by index; gradients scatter-add back."""
    if table.ndim != 2:
        raise ValueError(f"embedding_rows expects a matrix table, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    data = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(data, (table,), back, "embedding_rows")


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    if t.ndim != 2:
        raise ValueError(f"slice_rows expects a matrix, got shape {t.shape}")
    if not 0 <= start <= stop <= t.shape[0]:
        raise IndexError(f"row slice [{start}:{stop}] out of range for shape {t.shape}")
    data = t.data[start:stop].copy()

    def back(g):
        full = np.zeros_like(t.data)
        full[start:stop] = g
        return (full,)

    return _make(data, (t,), back, "slice_rows")


def take_row(t: Tensor, index: int) -> Tensor:
    if t.ndim != 2:
        raise ValueError(f"take_row expects a matrix, got shape {t.shape}")
    if not 0 <= index < t.shape[0]:
        raise IndexError(f"row {index} out of range for shape {t.shape}")
    data = t.data[index].copy()

    def back(g):
        full = np.zeros_like(t.data)
        full[index] = g
        return (full,)

    return _make(data, (t,), back, "take_row")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero parts")
    if axis not in (0, 1):
        raise ValueError(f"concat axis must be 0 or 1, got {axis}")
    for p in parts:
        if p.ndim != 2:
            raise ValueError(f"concat expects matrices, got shape {p.shape}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(parts), back, "concat")


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors into the rows of a matrix."""
    return concat([reshape(v, (1, v.size)) for v in vectors], axis=0)


def masked_fill(t: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where `keep` is False with `value` (no gradient there)."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != t.shape:
        raise ValueError(f"mask shape {keep.shape} != tensor shape {t.shape}")
    data = np.where(keep, t.data, value)

    def back(g):
        return (np.where(keep, g, 0.0),)

    return _make(data, (t,), back, "masked_fill")


# -- nonlinear primitives ----------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def back(g):
        sech2 = 1.0 - th ** 2
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * d,)

    return _make(data, (t,), back, "gelu")


def softmax(t: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    x = t.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (t,), back, "softmax")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    gamma, beta = _wrap(gamma), _wrap(beta)
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = gamma.data * xhat + beta.data

    def back(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(data, (t, gamma, beta), back, "layer_norm")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of `label`; scalar output."""
    if logits.ndim != 1:
        raise ValueError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    x = logits.data
    m = x.max()
    z = x - m
    lse = math.log(np.exp(z).sum())
    data = np.asarray(lse - z[label])

    def back(g):
        p = np.exp(z - lse)
        p[label] -= 1.0
        return (g * p,)

    return _make(data, (logits,), back, "cross_entropy")


def _floored_norm(x: np.ndarray, op: str) -> float:
    n = float(np.sqrt((x * x).sum()))
    if n < NORM_EPS:
        warnings.warn(f"{op}: vector norm {n:.3e} clamped to {NORM_EPS}", NormClampWarning, stacklevel=3)
        return NORM_EPS
    return n


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = _floored_norm(u.data, "cosine_similarity")
    nv = _floored_norm(v.data, "cosine_similarity")
    c = float(u.data @ v.data) / (nu * nv)
    data = np.asarray(c)

    def back(g):
        du = g * (v.data / (nu * nv) - c * u.data / (nu * nu))
        dv = g * (u.data / (nu * nv) - c * v.data / (nv * nv))
        return du, dv

    return _make(data, (u, v), back, "cosine_similarity")


def l2_normalize(u: Tensor) -> Tensor:
    if u.ndim != 1:
        raise ValueError(f"l2_normalize expects a vector, got shape {u.shape}")
    n = _floored_norm(u.data, "l2_normalize")
    y = u.data / n

    def back(g):
        return ((g - y * (y @ g)) / n,)

    return _make(y, (u,), back, "l2_normalize")


# -- attention (composite over the primitives above) -------------------------


def multi_head_attention(seq: Tensor, q_heads, k_heads, v_heads, out_proj: Tensor,
                         mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over a T x d sequence.

    Per-head projection weights are (d, d_head) matrices; `out_proj` is
    (d, d).  `mask`, when given, is a boolean T x T array where True marks
    attendable pairs; blocked pairs get -inf before softmax.
    """
    if seq.ndim != 2:
        raise ValueError(f"attention expects a T x d sequence, got shape {seq.shape}")
    if not (len(q_heads) == len(k_heads) == len(v_heads)):
        raise ValueError("per-head weight lists must have equal length")
    outs = []
    for wq, wk, wv in zip(q_heads, k_heads, v_heads):
        q = matmul(seq, wq)
        k = matmul(seq, wk)
        v = matmul(seq, wv)
        scale = 1.0 / math.sqrt(wq.shape[1])
        scores = mul(matmul(q, transpose(k)), scale)
        if mask is not None:
            scores = masked_fill(scores, mask, -np.inf)
        outs.append(matmul(softmax(scores), v))
    return matmul(concat(outs, axis=1), out_proj)


# -- reverse-mode driver ------------------------------------------------------


def backward(root: Tensor) -> dict:
    """Reverse-mode gradients of a scalar `root`.

    Returns a map {leaf tensor: gradient array} covering exactly the
    requires_grad leaves reachable from `root`.  Frozen tensors never appear.
    Deterministic: traversal is reverse topological order with parents
    visited in insertion order, so repeated calls are bit-identical.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return leaves
