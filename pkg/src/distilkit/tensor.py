"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that pushes the output gradient back to its inputs.
``backward`` walks the recorded graph in reverse topological order.

Broadcasting is limited to leading batch dimensions: in binary ops one
operand's shape must equal the other's or be a suffix of it.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Graph", "GradCheckReport", "ShapeError", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "neg", "scale", "matmul", "sum", "mean", "reshape", "transpose",
    "softmax", "log_softmax", "layer_norm", "gelu", "embedding", "take_rows", "pick",
    "masked_fill", "clip_min", "cosine_similarity", "dropout", "backward", "grad_check",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float64 value that may participate in the gradient tape."""

    no_targets = False

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self._op or 'leaf'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("division is only defined by a Python scalar")

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          grad_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = grad_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        # undo leading-dimension broadcast
        lead = g.ndim - t.data.ndim
        g = g.sum(axis=tuple(range(lead)))
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dimensions")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim and b.data.ndim:
        _check_broadcast(a, b, "add")

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim and b.data.ndim:
        _check_broadcast(a, b, "sub")

    def grad_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim and b.data.ndim:
        _check_broadcast(a, b, "mul")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast_scalar(g * b.data, a))
        if b.requires_grad:
            _accumulate(b, _unbroadcast_scalar(g * a.data, b))

    return _make(a.data * b.data, (a, b), "mul", grad_fn)


def _unbroadcast_scalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim:
        return np.asarray(g.sum())
    return g


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: _accumulate(a, g * c))


def clip_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _make(np.maximum(a.data, floor), (a,), "clip_min",
                 lambda g: _accumulate(a, g * keep))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, ``x * Phi(x)``."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)

    def grad_fn(g):
        _accumulate(x, g * (cdf + v * pdf))

    return _make(v * cdf, (x,), "gelu", grad_fn)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; ``keep`` broadcasts against x."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, value)
    return _make(out, (x,), "masked_fill", lambda g: _accumulate(x, np.where(keep, g, 0.0)))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: _accumulate(x, g * keep))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(out, (x,), "sum", grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _make(out, (x,), "reshape", lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return _make(out, (x,), "transpose", lambda g: _accumulate(x, np.transpose(g, inv)))


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows (first axis) of ``x`` by integer index; repeated indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            _accumulate(x, full)

    return _make(x.data[idx], (x,), "take_rows", grad_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Look up rows of ``weight`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = take_rows(weight, ids.reshape(-1))
    return reshape(out, ids.shape + (weight.shape[1],))


def pick(x: Tensor, idx) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        _accumulate(x, full)

    return _make(x.data[rows, idx], (x,), "pick", grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch dimensions; ``b`` is either 2-D (a shared
    weight) or has the same leading dimensions as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb)

    return _make(out, (a, b), "matmul", grad_fn)


# ---------------------------------------------------------------- normalisers

def _stable_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    # rows that are entirely -inf (fully masked) produce all-zero weights
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s == 0.0, 1.0, s)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    y = _stable_softmax(x.data)

    def grad_fn(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), "softmax", grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    v = x.data
    m = v.max(axis=-1, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def grad_fn(g):
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), "log_softmax", grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gain``/``bias``."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: hidden size {h} vs gain {gain.shape} / bias {bias.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_fn(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, h).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, h).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accumulate(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", grad_fn)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity over the last axis; zero-norm rows score 0."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    dot = (a.data * b.data).sum(axis=-1)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)

    def grad_fn(g):
        gg = np.where(ok, g, 0.0)[..., None]
        c = cos[..., None]
        if a.requires_grad:
            safe = np.where(ok, na, 1.0)[..., None]
            _accumulate(a, gg * (b.data / denom[..., None] - c * a.data / safe**2))
        if b.requires_grad:
            safe = np.where(ok, nb, 1.0)[..., None]
            _accumulate(b, gg * (a.data / denom[..., None] - c * b.data / safe**2))

    return _make(cos, (a, b), "cosine_similarity", grad_fn)


# ---------------------------------------------------------------- graph + backward

@dataclass
class Graph:
    """Executed ops reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` for every requires-grad tensor feeding ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; zero them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    if not graph.nodes or graph.nodes[-1] is not loss:
        raise ValueError("loss must be the terminal node of the graph")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple[int, int] | None = None  # (tensor index, flat index)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
               x: Tensor | Sequence[Tensor],
               step: float = 1e-6,
               tol: float = 1e-4,
               max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``f`` maps ``x`` (a tensor, called as ``f(x)``) or, when ``x`` is a
    sequence of tensors, takes no argument and reads them by closure.
    ``max_entries`` limits how many coordinates of each tensor are probed;
    they are drawn without replacement from a seeded generator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(x, Tensor)
    xs: list[Tensor] = [x] if single else list(x)
    call = (lambda: f(x)) if single else f

    for t in xs:
        t.grad = None
    loss = call()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0.0, None, 0
    with no_grad():
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                idx = np.arange(flat.size)
            ga = analytic[ti].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = call().item()
                flat[i] = orig - step
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                rel = abs(num - ga[i]) / max(abs(num), abs(ga[i]), 1e-8)
                checked += 1
                if rel > worst:
                    worst, worst_at = rel, (ti, int(i))
    for t in xs:
        t.grad = None
    return GradCheckReport(worst, tol, checked, worst_at)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
