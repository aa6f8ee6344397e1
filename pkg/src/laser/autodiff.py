"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every tensor is a matrix. Batch and sequence axes are flattened into rows by
the caller; ops that need more structure (multi-head attention, block means)
take that structure as explicit arguments.

The graph is implicit: each result tensor records its parents and a closure
that maps the output gradient to parent gradients. Node ids come from a
global counter, so sorting reachable nodes by id gives a valid topological
order without a separate graph object.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Within this block (per thread) results never record parents."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward", "_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"only 2-D tensors are supported, got shape {arr.shape}")
        arr.flags.writeable = True
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._grad: np.ndarray | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.node_id = next(_ids)
        t.op = op
        t.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        t._parents = parents if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        t._grad = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor._result(A @ B, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    return Tensor._result(np.ascontiguousarray(a.data.T), (a,), "transpose", lambda g: (g.T,))


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return Tensor._result(a.data + b, (a,), "add_scalar", lambda g: (g,))
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return Tensor._result(a.data - b, (a,), "sub_scalar", lambda g: (g,))
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return Tensor._result(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * a.data.dtype.type(c), (a,), "scale",
                          lambda g: (g * g.dtype.type(c),))


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Dispatch for add|sub|mul|scale; ``b`` may be a scalar for any kind."""
    ops = {"add": add, "sub": sub, "mul": mul, "scale": lambda x, c: scale(x, c)}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def sum_all(a: Tensor) -> Tensor:
    return Tensor._result(a.data.sum(dtype=a.dtype).reshape(1, 1), (a,), "sum",
                          lambda g: (np.full_like(a.data, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive entries")
    A = a.data
    return Tensor._result(np.log(A), (a,), "log", lambda g: (g / A,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return Tensor._result(out.astype(x.dtype, copy=False), (a,), "gelu", backward)


def softmax_rows(t: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax_rows: temperature must be positive, got {temperature}")
    z = t.data * t.dtype.type(1.0 / temperature)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) * p.dtype.type(1.0 / temperature),)

    return Tensor._result(p, (t,), "softmax", backward)


def log_softmax_rows(t: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"log_softmax_rows: temperature must be positive, got {temperature}")
    z = t.data * t.dtype.type(1.0 / temperature)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) * p.dtype.type(1.0 / temperature),)

    return Tensor._result(out, (t,), "log_softmax", backward)


def mean_rows(t: Tensor, block: int | None = None) -> Tensor:
    """Mean over rows. With ``block`` set, averages each run of ``block``
    consecutive rows, mapping [n*block x m] to [n x m]."""
    rows, cols = t.shape
    if rows == 0:
        raise ValueError("mean_rows: empty input")
    block = rows if block is None else block
    if block < 1 or rows % block:
        raise ValueError(f"mean_rows: {rows} rows not divisible into blocks of {block}")
    n = rows // block
    out = t.data.reshape(n, block, cols).mean(axis=1)

    def backward(g):
        return (np.repeat(g * g.dtype.type(1.0 / block), block, axis=0),)

    return Tensor._result(out, (t,), "mean_rows", backward)


def l2_normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    x = t.data
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    bad = np.flatnonzero(norm[:, 0] < eps)
    if bad.size:
        raise ValueError(f"l2_normalize_rows: degenerate (near-zero) row(s) {bad.tolist()}")
    y = x / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return Tensor._result(y, (t,), "l2_normalize", backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows: no parts")
    cols = parts[0].shape[1]
    for i, p in enumerate(parts):
        if p.shape[1] != cols:
            raise ValueError(f"concat_rows: part {i} has {p.shape[1]} columns, expected {cols}")
    if len(parts) == 1:
        return Tensor._result(parts[0].data.copy(), (parts[0],), "concat", lambda g: (g,))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                          "concat", backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    rows = parts[0].shape[0]
    for i, p in enumerate(parts):
        if p.shape[0] != rows:
            raise ValueError(f"concat_cols: part {i} has {p.shape[0]} rows, expected {rows}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=1), tuple(parts),
                          "concat_cols", backward)


def take_rows(t: Tensor, idx) -> Tensor:
    """Row gather; repeated indices accumulate in the backward pass."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = t.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")

    def backward(g):
        out = np.zeros_like(t.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(t.data[idx], (t,), "take_rows", backward)


def take(t: Tensor, rows, cols) -> Tensor:
    """Pick single elements (rows[i], cols[i]) into an [n x 1] column."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)

    def backward(g):
        out = np.zeros_like(t.data)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return Tensor._result(t.data[rows, cols].reshape(-1, 1), (t,), "take", backward)


def sum_cols(t: Tensor) -> Tensor:
    """Row sums, [n x m] -> [n x 1]."""
    m = t.shape[1]
    return Tensor._result(t.data.sum(axis=1, keepdims=True), (t,), "sum_cols",
                          lambda g: (np.repeat(g, m, axis=1),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization followed by a learned per-column gain."""
    X, w = x.data, weight.data
    if w.shape != (1, X.shape[1]):
        raise ValueError(f"rms_norm: weight shape {w.shape} does not match width {X.shape[1]}")
    inv = 1.0 / np.sqrt((X * X).mean(axis=1, keepdims=True) + X.dtype.type(eps))
    xhat = X * inv
    out = xhat * w

    def backward(g):
        gx = g * w
        dx = inv * (gx - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        dw = (g * xhat).sum(axis=0, keepdims=True)
        return (dx, dw)

    return Tensor._result(out, (x, weight), "rms_norm", backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, allowed: np.ndarray) -> Tensor:
    """Multi-head scaled dot-product attention over flattened rows.

    ``q`` is [Tq x m]; ``k`` and ``v`` are [Tk x m]; ``allowed`` is a boolean
    [Tq x Tk] mask (causality and sequence membership are encoded there by the
    caller). Every query row must be allowed at least one key.
    """
    Tq, m = q.shape
    Tk = k.shape[0]
    if k.shape != (Tk, m) or v.shape != (Tk, m):
        raise ValueError(f"causal_attention: shapes q{q.shape} k{k.shape} v{v.shape}")
    if m % n_heads:
        raise ValueError(f"causal_attention: width {m} not divisible by {n_heads} heads")
    if allowed.shape != (Tq, Tk):
        raise ValueError(f"causal_attention: mask shape {allowed.shape}, expected {(Tq, Tk)}")
    if Tq and not allowed.any(axis=1).all():
        raise ValueError("causal_attention: a query row has no visible keys")
    d = m // n_heads
    dt = q.dtype.type
    sc = dt(1.0 / math.sqrt(d))
    Q = q.data.reshape(Tq, n_heads, d).transpose(1, 0, 2)
    K = k.data.reshape(Tk, n_heads, d).transpose(1, 0, 2)
    V = v.data.reshape(Tk, n_heads, d).transpose(1, 0, 2)
    s = (Q @ K.transpose(0, 2, 1)) * sc
    s = np.where(allowed[None], s, -np.inf)
    s = s - s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    out = (p @ V).transpose(1, 0, 2).reshape(Tq, m)

    def backward(g):
        G = g.reshape(Tq, n_heads, d).transpose(1, 0, 2)
        dV = p.transpose(0, 2, 1) @ G
        dp = G @ V.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * sc
        dQ = ds @ K
        dK = ds.transpose(0, 2, 1) @ Q
        back = lambda a, n: a.transpose(1, 0, 2).reshape(n, m)
        return (back(dQ, Tq), back(dK, Tk), back(dV, Tk))

    return Tensor._result(out, (q, k, v), "attention", backward)


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) for explicit distributions, [n x V] -> [n x 1].

    Zero entries of ``p`` contribute nothing.
    """
    _check_same(p, q, "kl_div")
    P, Q = p.data, q.data
    if (P < 0).any() or (Q < 0).any():
        raise ValueError("kl_div: negative probability entries")
    pos = P > 0
    if (pos & (Q <= 0)).any():
        raise ValueError("kl_div: q has zero mass where p is positive")
    safe_q = np.where(pos, Q, 1.0)
    ratio = np.where(pos, P / safe_q, 1.0)
    logr = np.log(ratio)
    out = (np.where(pos, P * logr, 0.0)).sum(axis=1, keepdims=True)

    def backward(g):
        dp = np.where(pos, logr + 1.0, 0.0) * g
        dq = np.where(pos, -P / safe_q, 0.0) * g
        return (dp.astype(P.dtype, copy=False), dq.astype(Q.dtype, copy=False))

    return Tensor._result(out.astype(P.dtype, copy=False), (p, q), "kl_div", backward)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def _topo(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack.extend(t._parents)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor
    that requires grad."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be 1x1, got {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in _topo(loss):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        node._grad = g.copy() if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from ``params`` on every call and returns a 1x1
    loss. Parameters with ``requires_grad`` off are skipped. The relative error
    per coordinate is |a - n| / max(1, |a|, |n|).
    """
    params = [p for p in params if p.requires_grad]
    zero_grad(params)
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: non-finite function value")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data[0, 0])
            flat[i] = orig - step
            fm = float(fn().data[0, 0])
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("grad_check: non-finite function value")
            num = (fp - fm) / (2 * step)
            a = float(gflat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    zero_grad(params)
    return worst
