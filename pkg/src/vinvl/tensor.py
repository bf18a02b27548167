"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records a node
(its parents and a backward closure).  :meth:`Tensor.backward` linearises the
recorded graph into a :class:`Tape` in topological order and replays it in
reverse.  Tensors that never reach the loss keep a zero gradient.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    # construction -----------------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # basic properties -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient; zeros for a leaf the loss never reached."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(_lift(other), self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return slice_(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> Tensor:
        return sum_(self)

    def mean(self) -> Tensor:
        return mean(self)

    # differentiation --------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every ``requires_grad`` tensor feeding this scalar."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it with a fresh forward pass")
        tape = Tape.from_loss(self)
        tape.run(self)
        self._consumed = True


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded operations of one forward pass, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
            # interior nodes are not retained; the graph is single-use
            node._parents = ()
            node._backward = None
            node.requires_grad = False


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,))


def _fast_tanh(u: np.ndarray) -> np.ndarray:
    # exp-based form; numpy's tanh is several times slower on this platform
    e = np.exp(-2.0 * np.clip(u, -20.0, 20.0))
    return (1.0 - e) / (1.0 + e)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, evaluated as ``x * sigmoid(2u)`` since ``1 + tanh(u) = 2 sigmoid(2u)``."""
    xd = x.data
    x2 = xd * xd
    u2 = (2.0 * _GELU_C) * xd * (1.0 + 0.044715 * x2)
    np.clip(u2, -40.0, 40.0, out=u2)
    s = 1.0 / (1.0 + np.exp(-u2))
    out = xd * s

    def backward(g):
        du2 = (2.0 * _GELU_C) * (1.0 + 3 * 0.044715 * x2)
        return (g * (s + out * (1.0 - s) * du2),)

    return Tensor._make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = _fast_tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----------------------------------------------------------------------------
# linear algebra and shape ops
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes batch (``a`` may be [..., m, k] with ``b`` [k, n])."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold the batch axes into rows: one BLAS call instead of a loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[1])

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return Tensor._make(out, (a, b), backward)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, dtype=np.float64), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def embedding_gather(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` picked by an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[idx], (table,), backward)


# ----------------------------------------------------------------------------
# reductions and normalisation
# ----------------------------------------------------------------------------

def sum_(x: Tensor) -> Tensor:
    return Tensor._make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor._make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gain, bias), backward)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs {targets.shape[0]} targets")
    m, n = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"target index out of range [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(lse - z[rows, targets]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (float(g) / m),)

    return Tensor._make(np.array(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean elementwise binary cross-entropy between ``sigmoid(logits)`` and soft targets."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    # log(1 + exp(-|z|)) keeps this finite for large |z|
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return ((_sigmoid(z) - y) * (float(g) / n),)

    return Tensor._make(np.array(loss.mean()), (logits,), backward)


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=np.float64)
            self.v[i] = np.array(state[f"v.{i}"], dtype=np.float64)


# ----------------------------------------------------------------------------
# finite-difference checking
# ----------------------------------------------------------------------------

def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                          rng: np.random.Generator, h: float = 1e-5, floor: float = 1e-10) -> dict[str, float]:
    """Compare tape gradients with central differences along a random direction per tensor.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Returns the relative error keyed by parameter name (or position), with
    ``floor`` as the smallest magnitude errors are measured against.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    errors = {}
    for i, (p, g) in enumerate(zip(params, analytic)):
        d = rng.standard_normal(p.shape)
        base = p.data.copy()
        p.data = base + h * d
        up = loss_fn().item()
        p.data = base - h * d
        down = loss_fn().item()
        p.data = base
        numeric = (up - down) / (2 * h)
        errors[p.name or str(i)] = relative_error(float((g * d).sum()), numeric, floor)
    return errors
