"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every value in the math core is a :class:`Tensor`.  Operations record their
parents and a backward rule; :func:`backward` walks the graph in reverse
topological order and accumulates cotangents by summation over paths.

Broadcasting is limited to the forms numpy produces when one operand is a
scalar or matches a trailing / keep-dims slice of the other.  The larger
operand must already have the result shape, which keeps every backward rule a
plain "sum over the broadcast axes".
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

CHECK_FINITE = True
L2_EPS = 1e-12
NORM_EPS = 1e-5


class Tensor:
    """An immutable n-dimensional float64 array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite value in tensor{' ' + name if name else ''}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise TypeError("only division by a Python scalar is supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data, name: str | None = None) -> Tensor:
    """A gradient-tracking leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    out = np.broadcast_shapes(a.shape, b.shape)
    if out != a.shape and out != b.shape:
        raise ValueError(f"unsupported broadcast between {a.shape} and {b.shape}")
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a Python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(count))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw)


def frobenius_sq(x) -> Tensor:
    """Sum of squared entries."""
    x = as_tensor(x)
    return _make(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,))


def inner(a, b) -> Tensor:
    """Inner product along the trailing axis."""
    a, b = as_tensor(a), as_tensor(b)
    return tsum(mul(a, b), axis=-1)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def l2_normalize(x, eps: float = L2_EPS) -> Tensor:
    """Divide each trailing-axis vector by ``max(||x||, eps)``."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    y = x.data / denom

    def bw(g):
        # inside the guard the denominator is constant
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / eps),)

    return _make(y, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Per-row standardization over features, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ValueError("layer_norm expects [n, d]")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * np.mean(gx * xhat, axis=1, keepdims=True))
        return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _make(out, (x, gamma, beta), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    train: bool = True,
    momentum: float = 0.1,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-feature standardization.

    In train mode the batch mean and biased variance are used and, when
    running buffers are passed, they are updated in place with ``momentum``
    (the running variance uses the unbiased estimate).  Eval mode reads the
    running buffers and is an affine map of ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ValueError("batch_norm expects [n, d]")
    n = x.shape[0]
    if train:
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=0)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.data + beta.data

        def bw(g):
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=0) - xhat * np.mean(gx * xhat, axis=0))
            return dx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

        return _make(out, (x, gamma, beta), bw)

    if running_mean is None or running_var is None:
        raise ValueError("eval-mode batch_norm requires running statistics")
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = xhat * gamma.data + beta.data

    def bw_eval(g):
        return g * gamma.data * inv, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _make(out, (x, gamma, beta), bw_eval)


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean multinomial negative log-likelihood of integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _make(loss, (logits,), bw)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns a map from every reachable gradient-tracking leaf to its gradient;
    the same arrays are also stored on ``leaf.grad``.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    return leaves


def numerical_grad(fn: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], h: float = 1e-5):
    """Central finite differences of a scalar function of several arrays."""
    out = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(inputs)
            flat[i] = orig - h
            fm = fn(inputs)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Iterable[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps Tensors to a scalar Tensor.  The relative error of each
    component is ``|a - n| / max(1, |a|, |n|)``; returning the worst one.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves_ = [leaf(a) for a in arrays]
    root = fn(*leaves_)
    backward(root)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves_]

    def scalar(xs):
        return float(fn(*[Tensor(x) for x in xs]).data)

    numeric = numerical_grad(scalar, arrays, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst
