"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`.
``backward(loss)`` replays the tape in reverse recording order, visiting each
node once, and then clears it, so each forward pass builds a fresh tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    pass


class RankError(ValueError):
    pass


class GradStateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "_node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, rule: Callable):
        self.inputs = inputs
        self.output = output
        # rule(upstream_grad) -> tuple of input grads (None where not needed)
        self.rule = rule


class Tape:
    """Ordered record of primitive operations in the order they ran."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _local_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local_stack().pop()
        self.clear()


_local = threading.local()


def _local_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
        _local.grad_enabled = True
    return stack


def active_tape() -> Tape:
    return _local_stack()[-1]


def _grad_enabled() -> bool:
    _local_stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    _local_stack()
    previous = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = needs
    out.grad = None
    out._node = None
    if needs:
        node = _Node(tuple(inputs), out, rule)
        out._node = node
        active_tape().record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)))


def square(x: Tensor) -> Tensor:
    return _make(x.values**2, (x,), lambda g: (2.0 * x.values * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.values), (x,), lambda g: (g / x.values,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
    inside = (x.values >= lo) & (x.values <= hi)
    return _make(np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,))


# reductions and reshaping

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    return _make(x.values.T.copy(), (x,), lambda g: (g.T,))


def getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.values[index]), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# linear algebra and row-wise primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.values @ b.values, (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax of an n x c tensor (max-subtracted)."""
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _make(out, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax_values(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


L2_EPS = 1e-12


def l2_normalize_rows(x: Tensor, eps: float = L2_EPS) -> Tensor:
    norms = np.sqrt((x.values**2).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.values / denom
    active = norms > eps

    def rule(g):
        radial = (out * g).sum(axis=1, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / denom),)

    return _make(out, (x,), rule)


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j), i < j, in lexicographic order."""
    return np.triu_indices(n, k=1)


def pairwise_distances(x: Tensor) -> Tensor:
    """Condensed Euclidean distance vector over all row pairs i < j."""
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"pairwise distances need at least 2 rows, got {n}")
    rows, cols = pair_indices(n)
    diff = x.values[rows] - x.values[cols]
    dist = np.sqrt((diff**2).sum(axis=1))
    safe = np.where(dist > 0, dist, 1.0)

    def rule(g):
        unit = np.where((dist > 0)[:, None], diff / safe[:, None], 0.0) * g[:, None]
        full = np.zeros_like(x.values)
        np.add.at(full, rows, unit)
        np.add.at(full, cols, -unit)
        return (full,)

    return _make(dist, (x,), rule)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, ig in zip(node.inputs, node.rule(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                # leaf
                inp.grad = inp.grad + ig if inp.grad is not None else ig.copy()
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    tape.clear()


class SgdOptimizer:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: Iterable[Tensor]) -> None:
        params = list(params)
        for p in params:
            if p.grad is None:
                raise GradStateError(f"parameter {p!r} has no gradient")
        for p in params:
            g = p.grad
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.values -= self.learning_rate * g
            p.grad = np.zeros_like(p.values)


def sgd_step(params: Iterable[Tensor], opt: SgdOptimizer) -> None:
    opt.step(params)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |autodiff|).

    ``f`` maps a tensor to a scalar tensor and must be re-evaluable; ``x`` is
    perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    leaf = Tensor(x.values.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
        if not np.all(np.isfinite(out.values)):
            raise NumericError("function value is not finite")
        backward(out)
    analytic = leaf.grad.reshape(-1)
    flat = leaf.values.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(leaf).values)
            flat[i] = orig - h
            down = float(f(leaf).values)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"function value is not finite at coordinate {i}")
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(numeric - analytic[i]) / max(1.0, abs(analytic[i])))
    return worst
