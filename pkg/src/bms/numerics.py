"""Small dense-tensor kernel with reverse-mode differentiation.

Values are float64 numpy arrays. Every op returns a new :class:`Tensor` that
remembers its parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` walks that record in reverse topological order.

Only the ops the graph models need are provided. Broadcasting is limited to
adding a bias row vector to a matrix.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericError, ShapeError

PROB_CLAMP = 1e-12
_DEBUG = os.environ.get("BMS_DEBUG", "") not in ("", "0")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accum(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(p for p in parents if p.requires_grad or p._parents)
    out.requires_grad = bool(live)
    out._parents = live
    out._backward = backward if live else None
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# elementwise and linear ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        return (
            (a, g @ b.data.T if _needs(a) else None),
            (b, a.data.T @ g if _needs(b) else None),
        )

    return _result(out, (a, b), back)


def spmm(m: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor; gradient flows to ``x`` only."""
    m = sp.csr_matrix(m)
    if x.data.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.data)
    mt = m.T.tocsr()

    def back(g):
        return ((x, np.asarray(mt @ g)),)

    return _result(out, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def back(g):
            return ((a, g), (b, g))
        return _result(a.data + b.data, (a, b), back)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def back_row(g):
            return ((a, g), (b, g.sum(axis=0)))
        return _result(a.data + b.data, (a, b), back_row)
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def back(g):
        return ((a, g), (b, -g))

    return _result(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def back(g):
        return (
            (a, g * b.data if _needs(a) else None),
            (b, g * a.data if _needs(b) else None),
        )

    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return ((a, g * c),)

    return _result(a.data * c, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        return ((a, g * mask),)

    return _result(np.where(mask, a.data, 0.0), (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def back(g):
        return ((a, g * s * (1.0 - s)),)

    return _result(s, (a,), back)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def back(g):
        return ((a, g * (1.0 - t * t)),)

    return _result(t, (a,), back)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def back(g):
        return ((a, g * e),)

    return _result(e, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        return ((a, g / a.data),)

    return _result(np.log(a.data), (a,), back)


def identity(a: Tensor) -> Tensor:
    return a


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    def back(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _result(np.array(a.data.sum()), (a,), back)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, d) -> (d,)."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a non-empty matrix, got {a.shape}")
    n = a.shape[0]

    def back(g):
        return ((a, np.broadcast_to(g / n, a.shape).copy()),)

    return _result(a.data.mean(axis=0), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shape mismatch: {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        res = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            res.append((p, g[tuple(idx)]))
        return res

    return _result(out, parts, back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def back(g):
        return ((a, g.reshape(a.shape)),)

    return _result(out, (a,), back)


def transpose(a: Tensor) -> Tensor:
    def back(g):
        return ((a, g.T),)

    return _result(a.data.T.copy(), (a,), back)


def take(a: Tensor, index) -> Tensor:
    """Numpy fancy indexing; the backward pass scatter-adds repeated entries."""
    out = a.data[index]

    def back(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return ((a, grad),)

    return _result(np.array(out, copy=True), (a,), back)


def gather_rows(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row ids out of range for table {table.shape}")
    return take(table, ids)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    x = a.data
    shift = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    out = shift - lse
    soft = np.exp(out)

    def back(g):
        return ((a, g - soft * g.sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), back)


def softmax(x: np.ndarray) -> np.ndarray:
    shift = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, classes, weights=None) -> Tensor:
    """Cross-entropy of softmax(logits) against integer classes.

    A 1-D ``logits`` with an int class gives ``-log p(class)``. For a batch,
    the mean over rows is returned, or the ``weights``-weighted sum.
    """
    single = logits.data.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
        classes = [classes]
    classes = np.asarray(classes, dtype=np.int64)
    n, c = logits.shape
    if classes.shape != (n,):
        raise ShapeError(f"classes shape {classes.shape} does not match logits {logits.shape}")
    if classes.size and (classes.min() < 0 or classes.max() >= c):
        raise ShapeError(f"class index out of range for {c} classes")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"weights shape {w.shape} does not match batch {n}")
    x = logits.data
    shift = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    picked = shift[np.arange(n), classes]
    loss = float(np.sum(w * (lse - picked)))

    def back(g):
        p = softmax(x)
        p[np.arange(n), classes] -= 1.0
        return ((logits, g * p * w[:, None]),)

    return _result(np.array(loss), (logits,), back)


def bce(prob: Tensor, target, weights=None) -> Tensor:
    """Binary cross-entropy with probabilities clamped to [1e-12, 1-1e-12].

    Mean over entries, or the ``weights``-weighted sum. Entries sitting on the
    clamp get zero gradient.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != prob.shape:
        raise ShapeError(f"bce shape mismatch: prob {prob.shape} vs target {t.shape}")
    w = np.full(prob.shape, 1.0 / max(1, prob.data.size)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != prob.shape:
        raise ShapeError(f"bce weights shape {w.shape} vs prob {prob.shape}")
    p = np.clip(prob.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (prob.data > PROB_CLAMP) & (prob.data < 1.0 - PROB_CLAMP)
    loss = float(-np.sum(w * (t * np.log(p) + (1.0 - t) * np.log1p(-p))))

    def back(g):
        d = -(t / p - (1.0 - t) / (1.0 - p)) * w * inside
        return ((prob, g * d),)

    return _result(np.array(loss), (prob,), back)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over all entries."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl shape mismatch: {mu.shape} vs {logvar.shape}")
    ev = np.exp(logvar.data)
    val = 0.5 * float(np.sum(mu.data ** 2 + ev - 1.0 - logvar.data))

    def back(g):
        return ((mu, g * mu.data), (logvar, g * 0.5 * (ev - 1.0)))

    return _result(np.array(val), (mu, logvar), back)


# ---------------------------------------------------------------------------
# parameters, optimizer, gradient check, checkpoints

class ModelParams(OrderedDict):
    """Named trainable tensors."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.items()}

    def numel(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self[k].data = np.array(v, dtype=np.float64, copy=True)


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in parameter-name order."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, {k: t.grad for k, t in self.params.items() if t.grad is not None}, self.state, self.lr, self.betas, self.eps)


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
               max_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error is ``|a - b| / max(1, |a|, |b|)``. ``max_per_param`` samples
    that many entries per parameter instead of checking all of them.
    """
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = ga[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    for t in params.values():
        t.grad = None
    return worst


CHECKPOINT_FORMAT = "bms-params-v1"


def save_params(params: dict[str, Tensor], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` and ``<path>.json``.

    Binary layout per entry: u32 name length, utf-8 name, u32 ndim, ndim x u64
    dims, then the little-endian float64 payload in row-major order. The JSON
    index lists name, shape, byte offset of the payload and payload size.
    """
    path = Path(path)
    bin_path, idx_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries = []
    with open(bin_path, "wb") as fh:
        for name, t in params.items():
            raw = name.encode("utf-8")
            shape = t.data.shape
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}Q", *shape))
            offset = fh.tell()
            payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(payload)
            entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(payload)})
    idx_path.write_text(json.dumps({"format": CHECKPOINT_FORMAT, "entries": entries}, indent=1), encoding="utf-8")
    return bin_path, idx_path


def load_params(path: str | Path) -> ModelParams:
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if index.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unknown checkpoint format {index.get('format')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    params = ModelParams()
    for e in index["entries"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"]).reshape(e["shape"])
        params.add(e["name"], arr.astype(np.float64))
    return params


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
