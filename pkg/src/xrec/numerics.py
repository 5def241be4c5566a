"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Only a fixed menu of operations is supported; each one has a forward rule and a
vector-Jacobian product.  Everything trained in this package (GNN embeddings,
the MoE adapters, the toy LM) goes through these ops, so every gradient can be
checked against central finite differences with :func:`grad_check`.

Broadcasting is limited to "bias style" addition/multiplication where the
second operand's shape is a suffix of the first one's (e.g. ``(B, T, d) + (d,)``).
"""
from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul",
    "add",
    "multiply",
    "scalar-scale",
    "row-softmax",
    "layer-norm",
    "relu-or-gelu",
    "embedding-lookup",
    "concat-rows",
    "slice-rows",
    "mean",
    "cross-entropy-with-logits",
    "sigmoid",
    "log",
)


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routed through record()
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass(eq=False)
class Node:
    # output and tape are weak references: the output tensor points back at
    # its node, and a strong cycle would keep whole graphs alive until the
    # cyclic collector happens to run
    kind: str
    inputs: tuple[Tensor, ...]
    output: weakref.ref
    saved: dict
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: weakref.ref


@dataclass(eq=False)
class Tape:
    """Ordered record of operations; ``with Tape() as tape:`` makes it active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (inference)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


# ---------------------------------------------------------------------------
# forward / vjp rules.  Each returns (output array, saved dict, vjp closure).
# ---------------------------------------------------------------------------

def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return g.reshape(shape)


def _check_suffix(kind: str, a: Tensor, b: Tensor) -> None:
    n = len(b.shape)
    if a.shape == b.shape or (n <= len(a.shape) and a.shape[len(a.shape) - n:] == b.shape):
        return
    raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _matmul(a: Tensor, b: Tensor, transpose_b: bool = False):
    A, B = a.data, b.data
    if transpose_b:
        if B.ndim < 2:
            raise ShapeError(f"matmul: cannot transpose shape {B.shape}")
        B = np.swapaxes(B, -1, -2)
    if A.ndim == 0 or B.ndim == 0 or A.shape[-1] != B.shape[-2 if B.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: shape mismatch {a.shape} vs {b.shape}" + (" (transposed)" if transpose_b else "")
        )
    if B.ndim > 2 and A.ndim != B.ndim:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = np.matmul(A, B)

    def vjp(g):
        if A.ndim == 1 and B.ndim == 1:
            ga, gb = g * B, g * A
        elif A.ndim == 1:
            ga = B @ g
            gb = np.outer(A, g)
        elif B.ndim == 1:
            ga = g[..., None] * B
            gb = _sum_to_shape(np.einsum("...i,...ij->...j", g, A), B.shape)
        else:
            ga = np.matmul(g, np.swapaxes(B, -1, -2))
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
            gb = _sum_to_shape(gb, B.shape)
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return out, vjp


def _add(a: Tensor, b: Tensor):
    _check_suffix("add", a, b)
    out = a.data + b.data
    return out, lambda g: (g, _sum_to_shape(g, b.shape))


def _multiply(a: Tensor, b: Tensor):
    _check_suffix("multiply", a, b)
    A, B = a.data, b.data
    out = A * B
    return out, lambda g: (g * B, _sum_to_shape(g * A, B.shape))


def _scale(a: Tensor, factor: float):
    out = a.data * factor
    return out, lambda g: (g * factor,)


def _softmax(a: Tensor):
    x = a.data
    if x.ndim == 0:
        raise ShapeError("row-softmax: needs at least one axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return s, vjp


def _layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    x = a.data
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer-norm: shape mismatch {a.shape} vs {gamma.shape}/{beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to_shape(g * xhat, (d,)), _sum_to_shape(g, (d,))

    return out, vjp


_GELU_C = np.sqrt(2.0 / np.pi)


def _activation(a: Tensor, kind: str = "gelu"):
    x = a.data
    if kind == "relu":
        mask = (x > 0).astype(np.float64)
        return x * mask, lambda g: (g * mask,)
    if kind != "gelu":
        raise ValueError(f"relu-or-gelu: unknown activation {kind!r}")
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return out, vjp


def _embedding(table: Tensor, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding-lookup: ids out of range for table {table.shape}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, vjp


def _concat_rows(*parts: Tensor):
    if not parts:
        raise ShapeError("concat-rows: nothing to concatenate")
    arrays = [p.data[None, :] if p.data.ndim == 1 else p.data for p in parts]
    tail = arrays[0].shape[:-2], arrays[0].shape[-1]
    for arr, p in zip(arrays, parts):
        if (arr.shape[:-2], arr.shape[-1]) != tail:
            raise ShapeError(f"concat-rows: shape mismatch {parts[0].shape} vs {p.shape}")
    out = np.concatenate(arrays, axis=-2)
    sizes = [arr.shape[-2] for arr in arrays]

    def vjp(g):
        grads, start = [], 0
        for n, p in zip(sizes, parts):
            piece = g[..., start:start + n, :]
            grads.append(piece.reshape(p.shape))
            start += n
        return grads

    return out, vjp


def _slice_rows(a: Tensor, start: int, stop: int):
    x = a.data
    if x.ndim < 2 or not (0 <= start <= stop <= x.shape[-2]):
        raise ShapeError(f"slice-rows: bad slice [{start}:{stop}] of shape {a.shape}")
    out = x[..., start:stop, :]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[..., start:stop, :] = g
        return (gx,)

    return out, vjp


def _mean(a: Tensor):
    n = a.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    out = np.asarray(a.data.mean())
    return out, lambda g: (np.full(a.shape, float(g) / n),)


def _cross_entropy(logits: Tensor, targets, ignore_index: int = -1):
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if x.ndim < 1 or x.shape[:-1] != t.shape:
        raise ShapeError(f"cross-entropy-with-logits: shape mismatch {logits.shape} vs targets {t.shape}")
    valid = t != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("cross-entropy-with-logits: no valid targets")
    if t[valid].size and (t[valid].min() < 0 or t[valid].max() >= x.shape[-1]):
        raise ShapeError("cross-entropy-with-logits: target id out of range")
    z = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    safe_t = np.where(valid, t, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * valid).sum() / count)

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        gx = (p - onehot) * valid[..., None] * (float(g) / count)
        return (gx,)

    return out, vjp


def _sigmoid(a: Tensor):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return out, lambda g: (g * out * (1.0 - out),)


def _log(a: Tensor):
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x), lambda g: (g / x,)


_RULES = {
    "matmul": _matmul,
    "add": _add,
    "multiply": _multiply,
    "scalar-scale": _scale,
    "row-softmax": _softmax,
    "layer-norm": _layer_norm,
    "relu-or-gelu": _activation,
    "embedding-lookup": _embedding,
    "concat-rows": _concat_rows,
    "slice-rows": _slice_rows,
    "mean": _mean,
    "cross-entropy-with-logits": _cross_entropy,
    "sigmoid": _sigmoid,
    "log": _log,
}


def record(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run ``op_kind`` forward and append a node to the active tape (if any)."""
    rule = _RULES.get(op_kind)
    if rule is None:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    inputs = tuple(_as_tensor(x) for x in inputs)
    out_data, vjp = rule(*inputs, **attrs)
    out = Tensor(out_data, requires_grad=any(x.requires_grad for x in inputs))
    tape = active_tape()
    if tape is not None:
        node = Node(op_kind, inputs, weakref.ref(out), attrs, vjp, weakref.ref(tape))
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None or loss._node.tape() is not tape:
        raise ValueError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        out = node.output()
        g = None if out is None else grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            grads[key] = grads[key] + gx if key in grads else gx
            if x._node is None:
                leaves[key] = x
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# thin wrappers
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b: bool = False) -> Tensor:
    return record("matmul", a, b, transpose_b=transpose_b)


def add(a, b) -> Tensor:
    return record("add", a, b)


def multiply(a, b) -> Tensor:
    return record("multiply", a, b)


def scale(a, factor: float) -> Tensor:
    return record("scalar-scale", a, factor=float(factor))


def softmax(a) -> Tensor:
    return record("row-softmax", a)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    return record("layer-norm", a, gamma, beta, eps=eps)


def gelu(a) -> Tensor:
    return record("relu-or-gelu", a, kind="gelu")


def relu(a) -> Tensor:
    return record("relu-or-gelu", a, kind="relu")


def embedding(table, ids) -> Tensor:
    return record("embedding-lookup", table, ids=ids)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return record("concat-rows", *parts)


def slice_rows(a, start: int, stop: int) -> Tensor:
    return record("slice-rows", a, start=int(start), stop=int(stop))


def mean(a) -> Tensor:
    return record("mean", a)


def total(a) -> Tensor:
    """Sum of all elements (mean scaled by the element count)."""
    return scale(mean(a), a.size)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    return record("cross-entropy-with-logits", logits, targets=targets, ignore_index=ignore_index)


def sigmoid(a) -> Tensor:
    return record("sigmoid", a)


def log(a) -> Tensor:
    return record("log", a)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if out._node is None:
        analytic = np.zeros_like(x0)
    else:
        backward(out, tape)
        analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for j in range(x0.size):
        step = np.zeros(x0.size)
        step[j] = epsilon
        step = step.reshape(x0.shape)
        with no_tape():
            hi = f(Tensor(x0 + step)).item()
            lo = f(Tensor(x0 - step)).item()
        flat[j] = (hi - lo) / (2 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a list of parameter tensors (used for GNN and LM pretraining)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class DecoupledSGD:
    """Plain gradient descent with decoupled weight decay.

    ``p <- p - lr * grad - lr * weight_decay * p``; with ``weight_decay=0`` this
    is exactly ``p - lr * grad``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
