"""Dense float64 tensors with a define-by-run reverse-mode tape.

Recording only happens while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Outside a tape every operation is a plain numpy computation, which is what
evaluation code wants.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "DimensionError",
    "ContractError",
    "NumericError",
    "tensor",
    "no_grad",
    "backward",
    "matmul",
    "matvec",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scalar_mul",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "softplus",
    "sigmoid",
    "tsum",
    "mean",
    "logsumexp",
    "log_softmax",
    "transpose",
    "concat",
    "tslice",
    "reshape",
    "maximum0",
    "lower_unit_triangular_matvec",
    "finite_diff_check",
    "sample_standard_normal",
]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    if not stack:
        return None
    return stack[-1]


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``data`` is treated as immutable once the tensor takes part in a recorded
    computation; only ``grad`` is written by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        if _as_tensor(other).ndim == 1:
            return matvec(self, other)
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are created, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, node: Tensor) -> None:
        node.tape_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None or loss.tape_id >= len(self.nodes) or self.nodes[loss.tape_id] is not loss:
            if loss.requires_grad and not loss._parents:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
                return
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
        for i in range(loss.tape_id, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape_id is not None and parent.tape_id < len(self.nodes) and self.nodes[parent.tape_id] is parent:
                    prev = grads.get(parent.tape_id)
                    grads[parent.tape_id] = pg if prev is None else prev + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        self.reset()

    def reset(self) -> None:
        for node in self.nodes:
            node.tape_id = None
            node._backward = None
            node._parents = ()
        self.nodes = []


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    tape = tape or _active_tape()
    if tape is None:
        raise ContractError("no active tape; wrap the forward pass in `with Tape()`")
    tape.backward(loss)


@contextmanager
def no_grad():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.tape_id = None
    out._parents = ()
    out._backward = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


# --- broadcasting helpers -------------------------------------------------

def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    """Allow equal shapes, scalars, row vectors (k,) against (n, k) and
    columns (n, 1) against (n, k). Anything else is a loud error."""
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0 or a.size == 1 or b.size == 1:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.ndim == 2 and small.ndim == 1 and small.shape[0] == big.shape[1]:
        return
    if big.ndim == 2 and small.ndim == 2 and small.shape[0] == big.shape[0] and small.shape[1] == 1:
        return
    if big.ndim == 2 and small.ndim == 2 and small.shape[0] == 1 and small.shape[1] == big.shape[1]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --- primitives -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T, A.T @ g)

    return _make(A @ B, (a, b), bw)


def matvec(a, x) -> Tensor:
    a, x = _as_tensor(a), _as_tensor(x)
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: cannot apply {a.shape} to {x.shape}")
    A, X = a.data, x.data

    def bw(g):
        return (np.outer(g, X), A.T @ g)

    return _make(A @ X, (a, x), bw)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    A, B = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))

    return _make(A * B, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    A, B = a.data, b.data
    out = A / B

    def bw(g):
        return (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scalar_mul(c: float, a) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(c * a.data, (a,), lambda g: (c * g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


maximum0 = relu


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _make(np.log(A), (a,), lambda g: (g / A,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _make(A * A, (a,), lambda g: (2.0 * g * A,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    out = np.logaddexp(0.0, A)
    sig = np.exp(A - out)
    return _make(out, (a,), lambda g: (g * sig,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.data, axis=axis), (a,), lambda g: (_expand(g, shape, axis).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    return _make(np.mean(a.data, axis=axis), (a,), lambda g: (_expand(g, shape, axis) / n,))


def logsumexp(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    m = np.max(A, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(A - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    weights = np.exp(A - out_k)
    out = out_k.reshape(()) if axis is None else np.squeeze(out_k, axis=axis)

    def bw(g):
        return (_expand(g, A.shape, axis) * weights,)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    lse = logsumexp(a, axis=axis)
    if a.ndim == 1:
        return sub(a, lse)
    return sub(a, reshape(lse, (a.shape[0], 1)) if axis in (1, -1) else lse)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from e
    return _make(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in ts]} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw)


def tslice(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as e:
        raise DimensionError(f"slice: index {idx!r} invalid for shape {shape}") from e

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def lower_unit_triangular_matvec(L_strict, h) -> Tensor:
    """Compute ``(I + strict_lower(L))^T h`` in O(D^2).

    Only the strictly-lower part of ``L_strict`` is read. ``h`` may be a single
    vector of length D or an (N, D) batch of row vectors.
    """
    L_strict, h = _as_tensor(L_strict), _as_tensor(h)
    D = L_strict.shape[0] if L_strict.ndim == 2 else -1
    if L_strict.ndim != 2 or L_strict.shape[1] != D or h.shape[-1] != D or h.ndim not in (1, 2):
        raise DimensionError(
            f"lower_unit_triangular_matvec: L {L_strict.shape} incompatible with h {h.shape}"
        )
    Ls = np.tril(L_strict.data, -1)
    H = h.data
    # row-vector form: (L^T h)^T = h^T L
    out = H + H @ Ls

    def bw(g):
        gh = g + g @ Ls.T
        if H.ndim == 1:
            gL = np.outer(H, g)
        else:
            gL = H.T @ g
        return (np.tril(gL, -1), gh)

    return _make(out, (L_strict, h), bw)


# --- verification ---------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], theta: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic in ``theta`` (freeze any noise by seeding a
    fresh :class:`Rng` inside ``f``). ``theta.data`` is perturbed in place and
    restored afterwards.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    saved_flag, saved_grad = theta.requires_grad, theta.grad
    theta.requires_grad = True
    theta.grad = None
    with Tape() as tape:
        loss = f(theta)
        if loss.requires_grad:
            tape.backward(loss)
    analytic = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    theta.requires_grad, theta.grad = saved_flag, saved_grad

    flat = theta.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(theta).item()
        flat[i] = orig - step
        fm = f(theta).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * step)
    an = analytic.reshape(-1)
    if not (np.all(np.isfinite(an)) and np.all(np.isfinite(numeric))):
        raise NumericError("non-finite gradient in finite_diff_check")
    denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(an - numeric) / denom)) if an.size else 0.0


# --- randomness -----------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based generator: word ``i`` is ``splitmix64(key + i * golden)``.

    The full state is ``(seed, counter)`` so streams can be checkpointed and
    resumed bit-exactly.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)
        with np.errstate(over="ignore"):
            self._key = _mix64(np.array([self.seed ^ 0x5DEECE66D], dtype=np.uint64))[0]

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream; does not advance this generator."""
        base = (self.seed * 0x2545F4914F6CDD1D + int(stream) + 1) & _MASK
        with np.errstate(over="ignore"):
            child = _mix64(np.array([base], dtype=np.uint64))[0]
        return Rng(int(child))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + (idx + np.uint64(1)) * _GOLDEN)

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1) with 53 random bits each."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Box-Muller on pairs of uniforms."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def sample_standard_normal(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape))
