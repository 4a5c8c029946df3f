"""Small dense-tensor library with tape-based reverse-mode gradients.

Only the operations needed by the GMF / MLP / NMF family are provided.
Tensors are immutable float64 arrays. Operations executed inside an active
:class:`GradTape` are recorded and :func:`backward` replays them in reverse.

    >>> params = ParamSet({"w": Tensor([1.0, 2.0])})
    >>> with GradTape():
    ...     loss = reduce_sum(params["w"])
    >>> backward(loss, params)["w"].data
    array([1., 1.])
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "TapeError",
    "Tensor",
    "ParamSet",
    "GradTape",
    "matmul",
    "add",
    "elementwise_mul",
    "concat",
    "relu",
    "sigmoid",
    "gather_rows",
    "reshape",
    "reduce_sum",
    "bce_loss",
    "backward",
    "sgd_step",
    "Adam",
    "PROB_EPS",
]

PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A NaN or infinite value was produced."""


class TapeError(RuntimeError):
    """Gradient tape misuse (no tape, already consumed, non-scalar loss)."""


class Tensor:
    """Immutable dense float64 array."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None, _owned: bool = False):
        arr = data if _owned and isinstance(data, np.ndarray) else np.array(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class GradTape:
    """Records operations in execution order while active.

    Use as a context manager; nested tapes are allowed and the innermost is the
    one recording. A tape can be consumed by :func:`backward` exactly once.
    """

    _local = threading.local()

    def __init__(self) -> None:
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._local.stack.pop()

    @classmethod
    def current(cls) -> "GradTape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    tape = GradTape.current()
    out = Tensor(out_data, tape=tape, _owned=True)
    if tape is not None:
        if tape.consumed:
            raise TapeError("cannot record on a consumed tape")
        tape.ops.append((out, inputs, grad_fn))
    return out


# ---------------------------------------------------------------------------
# operations; each grad_fn maps (upstream grad, needs mask) -> input grads


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    # einsum keeps each output row independent of batch size (BLAS does not)
    out = np.einsum("ik,kj->ij", a.data, b.data)

    def grad_fn(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    row_bias = a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]
    if a.shape != b.shape and not row_bias:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def grad_fn(g, needs):
        gb = None
        if needs[1]:
            gb = g.sum(axis=0) if row_bias else g
        return (g if needs[0] else None), gb

    return _record(out, (a, b), grad_fn)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes differ {a.shape} vs {b.shape}")
    out = a.data * b.data

    def grad_fn(g, needs):
        return (g * b.data if needs[0] else None), (g * a.data if needs[1] else None)

    return _record(out, (a, b), grad_fn)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.data.ndim
    for d, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if d != ax and sa != sb:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ off axis {ax}")
    out = np.concatenate([a.data, b.data], axis=ax)
    split = a.shape[ax]

    def grad_fn(g, needs):
        ga, gb = np.split(g, [split], axis=ax)
        return (ga if needs[0] else None), (gb if needs[1] else None)

    return _record(out, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def grad_fn(g, needs):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g, needs):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), grad_fn)


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: rows ``table[index]``."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def grad_fn(g, needs):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    orig = x.shape

    def grad_fn(g, needs):
        return (g.reshape(orig),)

    return _record(out, (x,), grad_fn)


def reduce_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())
    shape = x.shape

    def grad_fn(g, needs):
        return (np.full(shape, float(g)),)

    return _record(out, (x,), grad_fn)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    pred = _as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce_loss: targets must be 0 or 1")
    n = max(pred.size, 1)
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    out = np.asarray(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    inside = (pred.data > PROB_EPS) & (pred.data < 1.0 - PROB_EPS)

    def grad_fn(g, needs):
        dp = (-y / p + (1.0 - y) / (1.0 - p)) / n
        return (float(g) * dp * inside,)

    return _record(out, (pred,), grad_fn)


# ---------------------------------------------------------------------------
# parameters


class ParamSet(Mapping[str, Tensor]):
    """Ordered, immutable name -> Tensor map with per-entry freeze flags.

    Updates return new ParamSets; tensors that did not change are shared.
    """

    def __init__(self, values: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = (),
                 frozen: Iterable[str] = ()):
        items = values.items() if isinstance(values, Mapping) else values
        self._values: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            if name in self._values:
                raise KeyError(f"duplicate parameter name {name!r}")
            self._values[name] = t if isinstance(t, Tensor) else Tensor(t)
        self._frozen = frozenset(frozen)
        unknown = self._frozen - self._values.keys()
        if unknown:
            raise KeyError(f"freeze flags for unknown parameters: {sorted(unknown)}")

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    @property
    def frozen_names(self) -> list[str]:
        return [n for n in self._values if n in self._frozen]

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self._values if n not in self._frozen]

    def replace(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        new = OrderedDict(self._values)
        for name, t in updates.items():
            if name not in new:
                raise KeyError(name)
            if name in self._frozen:
                raise ValueError(f"attempt to overwrite frozen parameter {name!r}")
            new[name] = t
        return ParamSet(new, self._frozen)

    def with_frozen(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet(self._values, names)

    def num_parameters(self) -> int:
        return sum(t.size for t in self._values.values())

    def __repr__(self) -> str:
        parts = [f"{n}{list(t.shape)}{'*' if n in self._frozen else ''}" for n, t in self._values.items()]
        return "ParamSet(" + ", ".join(parts) + ")"


def backward(loss: Tensor, params: ParamSet) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. the trainable params.

    Frozen parameters get no entry. A trainable parameter the loss does not
    depend on gets a zero tensor. The tape that produced ``loss`` is consumed.
    """
    tape = loss.tape
    if tape is None:
        raise TapeError("loss was not produced on an active GradTape")
    if tape.consumed:
        raise TapeError("tape already consumed")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    trainable = params.trainable_names
    needs_grad = {id(params[n]) for n in trainable}
    for out, inputs, _ in tape.ops:
        if any(id(x) in needs_grad for x in inputs):
            needs_grad.add(id(out))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, grad_fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = [id(x) in needs_grad for x in inputs]
        if not any(needs):
            continue
        for x, gx, need in zip(inputs, grad_fn(g, needs), needs):
            if not need or gx is None:
                continue
            key = id(x)
            prev = grads.get(key)
            grads[key] = gx if prev is None else prev + gx

    result = {}
    for name in trainable:
        t = params[name]
        g = grads.get(id(t))
        result[name] = Tensor(np.zeros_like(t.data) if g is None else g)
    return result


def _check_grads(params: ParamSet, grads: Mapping[str, Tensor]) -> None:
    bad = [n for n in grads if n not in params or params.is_frozen(n)]
    if bad:
        raise KeyError(f"gradients supplied for frozen or unknown params: {bad}")


def sgd_step(params: ParamSet, grads: Mapping[str, Tensor], lr: float, l2: float = 0.0) -> ParamSet:
    """theta <- theta - lr * (g + 2*l2*theta) for every param that has a gradient."""
    _check_grads(params, grads)
    updates = {}
    for name, g in grads.items():
        theta = params[name].data
        step = g.data + 2.0 * l2 * theta if l2 else g.data
        new = theta - lr * step
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite SGD update for {name!r}")
        updates[name] = Tensor(new, _owned=True)
    return params.replace(updates)


class Adam:
    """Adam with L2 folded into the gradient (weight-decay form 2*l2*theta)."""

    def __init__(self, lr: float, l2: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.l2 = lr, l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        _check_grads(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        updates = {}
        for name, g in grads.items():
            theta = params[name].data
            grad = g.data + 2.0 * self.l2 * theta if self.l2 else g.data
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * grad if m is None else b1 * m + (1 - b1) * grad
            v = (1 - b2) * grad * grad if v is None else b2 * v + (1 - b2) * grad * grad
            self.m[name], self.v[name] = m, v
            new = theta - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise NumericError(f"non-finite Adam update for {name!r}")
            updates[name] = Tensor(new, _owned=True)
        return params.replace(updates)


class SGD:
    """Stateless optimizer wrapper around :func:`sgd_step`."""

    def __init__(self, lr: float, l2: float = 0.0):
        self.lr, self.l2 = lr, l2

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        return sgd_step(params, grads, self.lr, self.l2)
