# numcore.py
"""
Dense float64 numerics with reverse-mode gradients.

Two layers live here:
- special functions (lgamma, digamma, trigamma, tetragamma) on plain numpy arrays;
- `Var`, a node in a computation graph recorded op by op. Calling `backward()` on a
  scalar root walks the graph once, accumulates into the `grad` slot of every leaf
  that requires gradients, then frees the interior nodes.

A graph belongs to the thread that built it. The special functions are pure.
"""
import logging
import math

import numpy as np

from errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

# --- SPECIAL FUNCTIONS ---
# Arguments below _SHIFT are moved up with the recurrences
#   psi(x) = psi(x+1) - 1/x,  psi1(x) = psi1(x+1) + 1/x^2,  psi2(x) = psi2(x+1) - 2/x^3
# and the asymptotic series is summed at x >= 6. Seven Bernoulli terms keep the
# truncation error below 1e-12 there.
_SHIFT = 6.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _prepare(x, name):
    arr = np.array(x, dtype=np.float64, ndmin=1)
    if not np.all(arr > 0):
        raise DomainError(f"{name} is only defined for x > 0")
    return arr


def _finish(result, like):
    if np.ndim(like) == 0:
        return float(result[0])
    return result.reshape(np.shape(like))


def lgamma(x):
    """log Gamma(x) for x > 0."""
    z = _prepare(x, "lgamma")
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc[small] -= np.log(z[small])
        z[small] += 1.0
        small = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (
        1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * (691.0 / 360360.0 - inv2 / 156.0))))))
    result = acc + (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series
    return _finish(result, x)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    z = _prepare(x, "digamma")
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (
        1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))))
    result = acc + np.log(z) - 0.5 * inv - series
    return _finish(result, x)


def trigamma(x):
    """psi'(x) for x > 0."""
    z = _prepare(x, "trigamma")
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    tail = 1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (
        5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0)))))
    result = acc + inv * (1.0 + inv * (0.5 + inv * tail))
    return _finish(result, x)


def tetragamma(x):
    """psi''(x) for x > 0. Only used as the derivative of trigamma."""
    z = _prepare(x, "tetragamma")
    acc = np.zeros_like(z)
    small = z < _SHIFT
    while np.any(small):
        acc[small] -= 2.0 / (z[small] ** 3)
        z[small] += 1.0
        small = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    tail = 0.5 - inv2 * (1.0 / 6.0 - inv2 * (1.0 / 6.0 - inv2 * (0.3 - inv2 * (
        5.0 / 6.0 - inv2 * (691.0 / 210.0 - inv2 * 17.5)))))
    result = acc - inv2 - inv2 * inv - inv2 * inv2 * tail
    return _finish(result, x)


SPECIAL_FUNCTIONS = {
    'lgamma': lgamma,
    'digamma': digamma,
    'trigamma': trigamma,
}


def special_fn(x, kind):
    """Dispatch to one of the special functions by name."""
    fn = SPECIAL_FUNCTIONS.get(kind)
    if fn is None:
        raise ValueError(f"Unknown special function '{kind}'. Use one of {sorted(SPECIAL_FUNCTIONS)}.")
    return fn(x)


# --- COMPUTATION GRAPH ---
class Var:
    """A float64 array plus the graph edges needed to send gradients back to its inputs."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Var defers to Var's reflected operators

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents = ()
        self._backward = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def detach(self):
        """Same values, no graph edges: gradients stop here."""
        return Var(self.value)

    def backward(self):
        if self.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.value.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = _unbroadcast(parent_grad, parent.value.shape)
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        # free the interior of the graph; leaves keep their gradients
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False

    # operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # method forms of the unary ops
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def lift(x):
    """Wrap constants so they can take part in an op."""
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward):
    if not any(p.requires_grad for p in parents):
        return Var(value)
    out = Var(value, requires_grad=True)
    out.grad = None
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(grad).reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.value.shape} with {b.value.shape}") from None


# --- ELEMENTWISE BINARY OPS ---
def add(a, b):
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b):
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "div")
    return _node(a.value / b.value, (a, b),
                 lambda g: (g / b.value, -g * a.value / (b.value * b.value)))


def neg(a):
    a = lift(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    a = lift(a)
    p = float(exponent)
    return _node(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1.0),))


def where(condition, a, b):
    """Elementwise select: a where condition holds, b elsewhere."""
    a, b = lift(a), lift(b)
    cond = np.asarray(condition, dtype=bool)
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def maximum(a, floor):
    """max(a, floor) against a constant floor; the gradient is zero where the floor wins."""
    a = lift(a)
    return where(a.value >= floor, a, Var(np.full_like(a.value, floor)))


# --- LINEAR ALGEBRA / SHAPE OPS ---
def matmul(a, b):
    a, b = lift(a), lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        a2 = a.value if a.ndim == 2 else a.value[None, :]
        b2 = b.value if b.ndim == 2 else b.value[:, None]
        g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _node(a.value @ b.value, (a, b), backward)


def transpose(a):
    a = lift(a)
    return _node(a.value.T, (a,), lambda g: (np.transpose(g),))


def reshape(a, shape):
    a = lift(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _node(value, (a,), lambda g: (np.reshape(g, a.shape),))


def getitem(a, index):
    a = lift(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.value[index], (a,), backward)


def stack(items, axis=0):
    items = [lift(v) for v in items]
    shapes = {v.shape for v in items}
    if len(shapes) != 1:
        raise ShapeError(f"stack: operands differ in shape {sorted(shapes)}")

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(items)))

    return _node(np.stack([v.value for v in items], axis=axis), items, backward)


# --- REDUCTIONS ---
def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = lift(a)
    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return _node(a.value.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def max_(a, axis=None, keepdims=False):
    """Maximum along an axis. Ties send the subgradient to the lowest index."""
    a = lift(a)
    if axis is None:
        flat = int(np.argmax(a.value))

        def backward(g):
            full = np.zeros(a.value.size)
            full[flat] = np.reshape(g, -1)[0]
            return (full.reshape(a.shape),)

        value = a.value.reshape(-1)[flat]
        return _node(np.reshape(value, (1,) * a.ndim) if keepdims else value, (a,), backward)

    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)

    def backward(g):
        full = np.zeros_like(a.value)
        g_kept = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, g_kept, axis=axis)
        return (full,)

    value = np.take_along_axis(a.value, idx, axis=axis)
    return _node(value if keepdims else np.squeeze(value, axis=axis), (a,), backward)


def softmax(a, axis=-1):
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# --- ELEMENTWISE UNARY OPS ---
def exp(a):
    a = lift(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,))


def log(a):
    a = lift(a)
    if not np.all(a.value > 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = lift(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    a = lift(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def lgamma_op(a):
    a = lift(a)
    return _node(np.asarray(lgamma(a.value)), (a,), lambda g: (g * digamma(a.value),))


def digamma_op(a):
    a = lift(a)
    return _node(np.asarray(digamma(a.value)), (a,), lambda g: (g * trigamma(a.value),))


def trigamma_op(a):
    a = lift(a)
    return _node(np.asarray(trigamma(a.value)), (a,), lambda g: (g * tetragamma(a.value),))


# --- GRADIENT CHECK ---
def grad_check(loss_fn, params, eps=1e-5):
    """
    Compare reverse-mode gradients against central differences.

    loss_fn takes no arguments and rebuilds the scalar loss from the current values
    of `params`. Returns max |analytic - numeric| / (|numeric| + 1e-12) over every
    element of every parameter.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.value.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.value.shape}")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = loss_fn().item()
            flat[i] = original - eps
            down = loss_fn().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * eps)
            error = abs(grad.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, error)
    logger.debug("grad_check over %d parameter arrays: max relative error %.3e", len(params), worst)
    return worst
