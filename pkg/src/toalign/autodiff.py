"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. The parent
links form the tape; :func:`backward` and :func:`grad` walk it in reverse
topological order. Everything is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameters (dropout rate, momentum, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar used by the networks
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum with numpy broadcasting (used for bias terms)."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), back, "add")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, g * ad

    return _make(ad * bd, (a, b), back, "hadamard")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Logistic function clamped to ``[eps, 1 - eps]``."""
    z = x.data
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)
    out = np.clip(s, eps, 1.0 - eps)
    inside = (s > eps) & (s < 1.0 - eps)

    def back(g):
        return (g * s * (1.0 - s) * inside,)

    return _make(out, (x,), back, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose"
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(
        np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum_all"
    )


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def take(logits: Tensor, labels) -> Tensor:
    """Pick ``logits[i, labels[i]]`` per row (or ``logits[k]`` for a vector)."""
    if logits.data.ndim == 1:
        k = int(labels)
        _check_label(k, logits.shape[0])

        def back1(g):
            out = np.zeros(logits.shape)
            out[k] = g
            return (out,)

        return _make(np.array(logits.data[k]), (logits,), back1, "take")
    labels = np.asarray(labels, dtype=int)
    n, num_classes = logits.shape
    for k in labels:
        _check_label(int(k), num_classes)
    rows = np.arange(n)

    def back(g):
        out = np.zeros(logits.shape)
        out[rows, labels] = g
        return (out,)

    return _make(logits.data[rows, labels], (logits,), back, "take")


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), back, "matmul")


def im2col(x: Tensor, k: int = 3, padding: int = 1) -> Tensor:
    """Unroll 3x3 patches of ``x[N, C, H, W]`` into ``[C*k*k, N*H*W]`` columns.

    Row ordering is (channel, dy, dx) so a kernel tensor ``[C_out, C, k, k]``
    reshaped to ``[C_out, C*k*k]`` multiplies it directly. Stride is 1 and
    ``padding = (k - 1) // 2`` keeps the spatial size.
    """
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, h, w))
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w].transpose(1, 0, 2, 3)

    def back(g):
        g = g.reshape(c, k, k, n, h, w)
        gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for dy in range(k):
            for dx in range(k):
                gp[:, :, dy : dy + h, dx : dx + w] += g[:, dy, dx].transpose(1, 0, 2, 3)
        return (gp[:, :, padding : padding + h, padding : padding + w],)

    return _make(cols.reshape(c * k * k, n * h * w), (x,), back, "im2col")


def conv2d(x: Tensor, kernels: Tensor, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, same padding.

    Accepts a single image ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``.
    Built from :func:`im2col` and :func:`matmul`, so the backward pass reuses
    the matmul rule.
    """
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be [C_out, C_in, 3, 3], got {kernels.shape}")
    if padding != 1:
        raise ConfigError("conv2d: only padding=1 is supported")
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in = kernels.shape[:2]
    if c != c_in:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernels expect {c_in} ({x.shape} vs {kernels.shape})"
        )
    cols = im2col(x, 3, padding)
    out = matmul(reshape(kernels, (c_out, c_in * 9)), cols)
    out = transpose(reshape(out, (c_out, n, h, w)), (1, 0, 2, 3))
    if single:
        out = reshape(out, (c_out, h, w))
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial dims must be even, got {x.shape}")
    data = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * 0.25,)

    return _make(data, (x,), back, "avg_pool2")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(*lead, h, w),)

    return _make(data, (x,), back, "max_pool2")


def gap(fmap: Tensor) -> Tensor:
    """Global average pooling over the spatial axes: ``[.., M, H, W] -> [.., M]``."""
    if fmap.data.ndim < 3:
        raise DimensionError(f"gap: expected [..., M, H, W], got {fmap.shape}")
    h, w = fmap.shape[-2:]
    full = fmap.shape

    def back(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), full).copy(),)

    return _make(fmap.data.mean(axis=(-2, -1)), (fmap,), back, "gap")


# ---------------------------------------------------------------------------
# stochastic and adversarial


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * upstream`` backward."""
    if lam < 0:
        raise ConfigError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return _make(x.data, (x,), lambda g: (-lam * g,), "grl")


# ---------------------------------------------------------------------------
# losses


def _check_label(k: int, num_classes: int) -> None:
    if not 0 <= k < num_classes:
        raise IndexError(f"label {k} out of range for {num_classes} classes")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Cross entropy of softmax(logits) against integer labels.

    A ``[K]`` vector with a single label gives the per-sample loss; a ``[N, K]``
    batch gives the batch mean.
    """
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None, :]
        labels = np.array([int(labels)])
    else:
        labels = np.asarray(labels, dtype=int)
    n, num_classes = z.shape
    for k in labels:
        _check_label(int(k), num_classes)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        d *= float(g) / n
        return (d[0] if single else d,)

    return _make(np.array(loss), (logits,), back, "softmax_cross_entropy")


def binary_cross_entropy(p: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean of ``-t log p - (1 - t) log(1 - p)`` with ``p`` clamped to ``[eps, 1-eps]``."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    q = np.clip(p.data, eps, 1.0 - eps)
    n = max(p.size, 1)
    loss = float(np.mean(-t * np.log(q) - (1.0 - t) * np.log(1.0 - q)))

    def back(g):
        return (float(g) / n * (-t / q + (1.0 - t) / (1.0 - q)) * inside,)

    return _make(np.array(loss), (p,), back, "binary_cross_entropy")


# ---------------------------------------------------------------------------
# tape traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _propagate(root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = _propagate(loss, np.ones(loss.shape))
    for node in _topo_order(loss):
        if node._parents or not node.requires_grad:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(output: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    ``inputs`` may be intermediate tensors; unreachable inputs get zeros.
    """
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    grads = _propagate(output, np.ones(output.shape)) if output.requires_grad else {}
    return [grads.get(id(t), np.zeros(t.shape)).copy() for t in inputs]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class SGD:
    """SGD with heavy-ball momentum: ``v <- mu v + g``, ``theta <- theta - lr v``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float = 0.0,
    velocity: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """In-place momentum SGD update; returns the (updated) velocity buffers."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if velocity is None:
        velocity = [np.zeros(p.shape) for p in params]
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} with shape {p.shape} has no gradient")
        velocity[i] *= momentum
        velocity[i] += p.grad
        p.data -= lr * velocity[i]
    return velocity
