"""Small reverse-mode automatic differentiation engine on top of numpy.

Every differentiable value is a :class:`Tensor`.  Operations record their
parents and a closure that maps the output gradient to parent gradients; the
graph is implicit in those links and is walked in reverse topological order by
:func:`backward`.

Feature maps are channels-last: ``(H, W, C)`` for one sample or
``(N, H, W, C)`` for a batch.  All values are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

LEAKY_SLOPE = 0.01


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 grad_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), grad_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable parameter.

    Only leaves with ``requires_grad`` receive a gradient buffer; constant
    inputs are left untouched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, float(b))
    if np.isscalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Flatten everything but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, grad_fn, "concat")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; gradients scatter-add back."""
    table = as_tensor(table)
    index = np.asarray(index)

    def grad_fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(table.data[index], (table,), grad_fn, "take")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def square_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,), "square_sum")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output and no repeated labels per operand."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in out + other for c in s):
            raise ValueError(f"unsupported einsum pattern {subscripts!r}")

    def grad_fn(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    data = np.einsum(subscripts, a.data, b.data, optimize=True)
    return _make(data, (a, b), grad_fn, "einsum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def softmax2d(w) -> Tensor:
    """Softmax over the trailing two axes jointly (a whole H x W map)."""
    w = as_tensor(w)
    shape = w.shape
    flat = reshape(w, shape[:-2] + (shape[-2] * shape[-1],))
    return reshape(softmax(flat, axis=-1), shape)


# ---------------------------------------------------------------------------
# convolution and pooling


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"feature map must be (H,W,C) or (N,H,W,C), got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded patches as a (N*H*W, k*k*C) matrix, ordered (i, j, c)."""
    n, h, w, c = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    s = xp.strides
    view = as_strided(xp, (n, h, w, k, k, c), (s[0], s[1], s[2], s[1], s[2], s[3]),
                      writeable=False)
    return np.ascontiguousarray(view).reshape(n * h * w, k * k * c)


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 zero-padded correlation; returns (output, patch matrix)."""
    k, c_out = w.shape[0], w.shape[3]
    n, h, wd, _ = x.shape
    cols = x.reshape(-1, x.shape[3]) if k == 1 else _im2col(x, k)
    out = cols @ w.reshape(-1, c_out)
    return out.reshape(n, h, wd, c_out), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded, stride-1 2-D convolution (cross-correlation form).

    ``x`` is ``(H, W, C_in)`` or ``(N, H, W, C_in)``; ``kernel`` is
    ``(k, k, C_in, C_out)`` with odd ``k``; ``bias`` has length ``C_out``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k or k % 2 == 0:
        raise ValueError(f"kernel must be (k,k,C_in,C_out) with odd k, got {kernel.shape}")
    xb, single = _batched(x.data)
    if xb.shape[-1] != kernel.shape[2]:
        raise ValueError(
            f"input has {xb.shape[-1]} channels but kernel expects {kernel.shape[2]}")
    out, cols = _conv_same(xb, kernel.data)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    if not any(p.requires_grad for p in parents):
        cols = None

    def grad_fn(g):
        gb = g[None] if single else g
        if x.requires_grad:
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gx, _ = _conv_same(gb, flipped)
            gx = gx[0] if single else gx
        else:
            gx = None
        gk = None
        if kernel.requires_grad:
            gk = (cols.T @ gb.reshape(-1, gb.shape[-1])).reshape(kernel.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make(out[0] if single else out, parents, grad_fn, "conv2d")


def avg_pool(x: Tensor, p: int, q: int) -> Tensor:
    """Non-overlapping p x q average pooling; channels untouched."""
    x = as_tensor(x)
    xb, single = _batched(x.data)
    n, h, w, c = xb.shape
    if p < 1 or q < 1 or h % p or w % q:
        raise ValueError(f"pool ({p},{q}) does not divide spatial size ({h},{w})")
    out = xb.reshape(n, h // p, p, w // q, q, c).mean(axis=(2, 4))

    def grad_fn(g):
        gb = g[None] if single else g
        gx = np.repeat(np.repeat(gb, p, axis=1), q, axis=2) / (p * q)
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), grad_fn, "avg_pool")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """Adam moments plus the step-halving learning-rate schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int = 200
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.halve_every)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, epoch: int = 0) -> None:
    """One bias-corrected Adam update, in place.

    Raises ``FloatingPointError`` without touching any parameter when a
    gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr = state.learning_rate(epoch)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
               n_samples: int = 32, rng: np.random.Generator | None = None,
               floor: float = 1e-10) -> float:
    """Max relative error between backward() and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar.  At most ``n_samples`` components of ``param`` are
    probed (all of them when the parameter is smaller).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    param.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = param.grad.copy() if param.grad is not None else np.zeros_like(param.data)
    param.grad = None
    flat = param.data.reshape(-1)
    size = flat.size
    picks = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
    worst = 0.0
    for i in picks:
        saved = flat[i]
        flat[i] = saved + eps
        up = float(loss_fn().data)
        flat[i] = saved - eps
        down = float(loss_fn().data)
        flat[i] = saved
        numeric = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                    a: float = 0.0) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / ((1 + a^2) fan_in)); ``a`` is the rectifier's negative slope."""
    bound = np.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape)
