"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient (and grad mode is on), the output records its parents and a closure
mapping the output gradient to one gradient per parent. :func:`backward`
walks that graph once in reverse topological order.

Arrays are plain row-major numpy arrays. Training runs in float32; switch to
float64 with :func:`default_dtype` for gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "forward_op",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "sum",
    "mean",
    "relu",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "batch_norm",
    "softmax_cross_entropy",
    "log_softmax",
    "l2_normalize",
    "mse",
]

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable lineage recording (target network, evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float array with an optional gradient.

    ``grad`` is ``None`` until a backward pass reaches the tensor; after that
    it has the same shape as ``data`` and accumulates across passes until
    :meth:`zero_grad` is called.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        # ascontiguousarray would promote 0-d input to shape (1,)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        extra = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)


def _raise_not_scalar(shape):
    raise ValueError(f"item() requires a single-element tensor, got shape {shape}")


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module."""

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape}, dtype={self.data.dtype.name})"


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise RuntimeError(
                f"lineage through op '{node._op}' was already consumed by an earlier backward(); "
                "recompute the forward pass or pass retain_graph=True"
            )
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("this loss was already backpropagated; lineage consumed")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to backpropagate")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype)
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._consumed = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]}) for {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} ({a.size} elements) to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, grad_fn, "concat")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), grad_fn, "mean")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    # padded (N, C, H, W) -> (N, C * kh * kw, OH * OW)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. ``x``: (N, C, H, W); ``weight``: (O, C, kh, kw)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw} (input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh, ow = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)  # batched over N, lands in NCHW order
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def grad_fn(g):
        g3 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn, "conv2d")


def _pool_geometry(op: str, x: Tensor, kernel, stride):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected (N, C, H, W) input, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    h, w = x.shape[2:]
    if h < kh or w < kw:
        raise ShapeError(f"{op}: kernel {kh}x{kw} larger than input {h}x{w}")
    return kh, kw, sh, sw, (h - kh) // sh + 1, (w - kw) // sw + 1


def _window(x: np.ndarray, i: int, j: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    return x[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]


def max_pool2d(x, kernel=2, stride=None) -> Tensor:
    x = _as_tensor(x)
    kh, kw, sh, sw, oh, ow = _pool_geometry("max_pool2d", x, kernel, stride)
    out = _window(x.data, 0, 0, sh, sw, oh, ow).copy()
    for k in range(1, kh * kw):
        np.maximum(out, _window(x.data, *divmod(k, kw), sh, sw, oh, ow), out=out)

    def grad_fn(g):
        # route each gradient to the first offset attaining the max
        gx = np.zeros_like(x.data)
        free = np.ones(out.shape, dtype=bool)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            hit = _window(x.data, i, j, sh, sw, oh, ow) == out
            hit &= free
            free &= ~hit
            _window(gx, i, j, sh, sw, oh, ow)[...] += g * hit
        return (gx,)

    return _result(out, (x,), grad_fn, "max_pool2d")


def avg_pool2d(x, kernel=2, stride=None) -> Tensor:
    x = _as_tensor(x)
    kh, kw, sh, sw, oh, ow = _pool_geometry("avg_pool2d", x, kernel, stride)
    out = np.zeros((*x.shape[:2], oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _window(x.data, i, j, sh, sw, oh, ow)
    out /= kh * kw

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        share = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                _window(gx, i, j, sh, sw, oh, ow)[...] += share
        return (gx,)

    return _result(out, (x,), grad_fn, "avg_pool2d")


# ---------------------------------------------------------------------------
# normalisation and losses
# ---------------------------------------------------------------------------


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over (N,) for 2-D input or (N, H, W) for 4-D input.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased batch
    variance). In eval mode the op is a fixed affine map.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    n = x.shape[0]
    m = x.data.size // c
    x3 = x.data.reshape(n, c, -1)  # per-channel statistics over (N, P)

    def chan_sum(a3):
        return a3.sum(axis=(0, 2))

    def chan_dot(a3, b3):
        return np.einsum("ncp,ncp->c", a3, b3)

    if training:
        if m < 2:
            raise ShapeError(f"batch_norm: training mode needs more than one value per channel, got input {x.shape}")
        mu = chan_sum(x3) / m
        xc3 = x3 - mu[None, :, None]
        var = chan_dot(xc3, xc3) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        mu, var = running_mean.astype(x.data.dtype), running_var.astype(x.data.dtype)
        xc3 = None
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    if not (_GRAD_ENABLED and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        # nothing to differentiate: one fused affine pass
        scale = (gamma.data * inv_std).astype(x.data.dtype)
        shift = (beta.data - mu * scale).astype(x.data.dtype)
        out = x.data * scale.reshape(bshape) + shift.reshape(bshape)
        return _result(out, (x, gamma, beta), None, "batch_norm")
    if xc3 is None:
        xc3 = x3 - mu[None, :, None].astype(x.data.dtype)
    xhat3 = xc3 * inv_std[None, :, None]
    out = (xhat3 * gamma.data[None, :, None] + beta.data[None, :, None]).reshape(x.shape)

    def grad_fn(g):
        g3 = g.reshape(n, c, -1)
        gg = chan_dot(g3, xhat3) if gamma.requires_grad or (x.requires_grad and training) else None
        gb = chan_sum(g3) if beta.requires_grad or (x.requires_grad and training) else None
        gx = None
        if x.requires_grad:
            if training:
                # gxhat = g * gamma, so its channel sums follow from gb and gg
                k = (gamma.data * inv_std / m)[None, :, None]
                gx = k * (m * g3 - gb[None, :, None] - xhat3 * gg[None, :, None])
            else:
                gx = g3 * (gamma.data * inv_std)[None, :, None]
            gx = gx.reshape(x.shape)
        return (gx, gg if gamma.requires_grad else None, gb if beta.requires_grad else None)

    return _result(out, (x, gamma, beta), grad_fn, "batch_norm")


def log_softmax(logits) -> Tensor:
    z = _as_tensor(logits)
    if z.ndim != 2:
        raise ShapeError(f"log_softmax: expected (batch, classes), got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (z,), grad_fn, "log_softmax")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between ``logits`` (B, C) and integer ``labels`` (B,)."""
    z = _as_tensor(logits)
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes) logits, got {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {z.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {z.shape[1]})")
    b = z.shape[0]
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / b),)

    return _result(np.asarray(loss, dtype=z.data.dtype), (z,), grad_fn, "softmax_cross_entropy")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12, strict: bool = False) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Divides by ``max(norm, eps)``. With ``strict=True`` an exactly-zero slice
    raises instead.
    """
    x = _as_tensor(x)
    ax = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    if strict and np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector along normalised axis")
    denom = np.maximum(norm, eps)
    out = x.data / denom
    clipped = norm < eps

    def grad_fn(g):
        proj = (out * g).sum(axis=ax, keepdims=True)
        gx = np.where(clipped, g, g - out * proj) / denom
        return (gx,)

    return _result(out, (x,), grad_fn, "l2_normalize")


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def grad_fn(g):
        scale = 2.0 * g / diff.size
        return (diff * scale if a.requires_grad else None, -diff * scale if b.requires_grad else None)

    return _result(np.asarray(np.mean(diff * diff), dtype=diff.dtype), (a, b), grad_fn, "mse")


# ---------------------------------------------------------------------------
# name-based dispatch
# ---------------------------------------------------------------------------

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "batch_norm": batch_norm,
    "softmax_cross_entropy": softmax_cross_entropy,
    "l2_normalize": l2_normalize,
    "mse": mse,
    "reshape": reshape,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "mean": mean,
    "sum": sum,
    "transpose": transpose,
}


def forward_op(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply the op called ``op`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {', '.join(sorted(_OPS))}") from None
    return fn(*inputs, **(attrs or {}))
