"""Neural layers and the convolutional encoder used as the embedding model."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "BatchNorm",
    "MlpConfig",
    "MLP",
    "EncoderConfig",
    "ConvBlock",
    "ResidualBlock",
    "ConvEncoder",
    "encode",
    "mlp_forward",
]


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container that tracks parameters, buffers and children by name.

    Attribute assignment registers :class:`Parameter` values, numpy buffers
    declared through :meth:`register_buffer`, and child modules, in
    definition order. Names are dotted paths such as
    ``"stage0.conv.weight"``.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of parameters then buffers, in registration order."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
        for name, b in bufs.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {b.shape}")
            b[...] = arr

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def clone(self) -> "Module":
        dup = copy.deepcopy(self)
        dup.zero_grad()
        return dup

    def name_parameters(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Linear(Module):
    """``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_kaiming_uniform(rng, (out_features, in_features), in_features))
        if bias:
            self.bias = Parameter(np.zeros(out_features))
        else:
            self.bias = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear: expected (batch, {self.in_features}) input, got {x.shape}")
        out = T.matmul(x, T.transpose(self.weight))
        return out if self.bias is None else out + self.bias


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch norm for (N, C) or (N, C, H, W) inputs; momentum 0.9, eps 1e-5."""

    momentum = 0.9
    eps = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=self.weight.dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=self.weight.dtype))

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )


# ---------------------------------------------------------------------------
# MLP heads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    """Layer sizes for a head network.

    Every layer except the last is followed by batch norm and ReLU when
    ``hidden_norm`` is set; indices listed in ``linear_only`` skip both
    (the rotation head has two stacked linear layers at the end).
    """

    layer_dims: tuple[tuple[int, int], ...]
    hidden_norm: bool = True
    hidden_activation: str = "relu"
    linear_only: tuple[int, ...] = ()

    def __post_init__(self):
        dims = tuple(tuple(int(v) for v in d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if not dims:
            raise ValueError("MlpConfig needs at least one layer")
        for (_, out), (nxt_in, _) in zip(dims, dims[1:]):
            if out != nxt_in:
                raise ValueError(f"MlpConfig layer dims do not chain: {dims}")
        if any(v <= 0 for d in dims for v in d):
            raise ValueError(f"MlpConfig dims must be positive: {dims}")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if any(i < 0 or i >= len(dims) - 1 for i in self.linear_only):
            raise ValueError("linear_only must index hidden layers")

    @classmethod
    def chain(cls, sizes: list[int], **kw) -> "MlpConfig":
        return cls(tuple(zip(sizes[:-1], sizes[1:])), **kw)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1][1]


class MLP(Module):
    def __init__(self, config: MlpConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.n_layers = len(config.layer_dims)
        for i, (din, dout) in enumerate(config.layer_dims):
            self.add_module(f"fc{i}", Linear(din, dout, rng))
            last = i == self.n_layers - 1
            if not last and config.hidden_norm and i not in config.linear_only:
                self.add_module(f"bn{i}", BatchNorm(dout))

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ShapeError(f"mlp: expected (batch, {self.config.in_dim}) input, got {x.shape}")
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i}")(x)
            if i == self.n_layers - 1 or i in self.config.linear_only:
                continue
            if self.config.hidden_norm:
                x = getattr(self, f"bn{i}")(x, training)
            x = T.relu(x)
        return x


def mlp_forward(head: MLP, x: Tensor, mode: str = "train") -> Tensor:
    return head(x, training=_training(mode))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    input_size: int = 32
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    block_kind: str = "plain_conv"
    embedding_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if not self.stage_widths or any(w <= 0 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be a nonempty list of positive ints, got {self.stage_widths}")
        if self.embedding_dim <= 0 or self.input_channels <= 0:
            raise ValueError("embedding_dim and input_channels must be positive")
        if self.block_kind not in ("plain_conv", "residual"):
            raise ValueError(f"block_kind must be 'plain_conv' or 'residual', got {self.block_kind!r}")
        if self.input_size < 2 ** len(self.stage_widths):
            raise ValueError(f"input_size {self.input_size} too small for {len(self.stage_widths)} pooling stages")


class ConvBlock(Module):
    """conv3x3 -> BN -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.bn = BatchNorm(out_ch)

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        return T.relu(self.bn(self.conv(x), training))


class ResidualBlock(Module):
    """Two conv-BN layers plus a shortcut (1x1 conv-BN when widths differ)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.bn2 = BatchNorm(out_ch)
        if in_ch != out_ch:
            self.short_conv = Conv2d(in_ch, out_ch, 1, rng)
            self.short_bn = BatchNorm(out_ch)
        else:
            self.short_conv = None

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        s = x if self.short_conv is None else self.short_bn(self.short_conv(x), training)
        return T.relu(h + s)


class ConvEncoder(Module):
    """Stages of (block, 2x2 max-pool), then global average pooling.

    A 1x1 conv-BN-ReLU maps the last stage width to ``embedding_dim`` when
    they differ.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        block = ConvBlock if config.block_kind == "plain_conv" else ResidualBlock
        prev = config.input_channels
        self.n_stages = len(config.stage_widths)
        for i, width in enumerate(config.stage_widths):
            self.add_module(f"stage{i}", block(prev, width, rng))
            prev = width
        if prev != config.embedding_dim:
            self.neck_conv = Conv2d(prev, config.embedding_dim, 1, rng)
            self.neck_bn = BatchNorm(config.embedding_dim)
        else:
            self.neck_conv = None

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, x, training: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        c, s = self.config.input_channels, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError(f"encoder: expected (batch, {c}, {s}, {s}) input, got {x.shape}")
        for i in range(self.n_stages):
            x = getattr(self, f"stage{i}")(x, training)
            x = T.max_pool2d(x, 2)
        if self.neck_conv is not None:
            x = T.relu(self.neck_bn(self.neck_conv(x), training))
        return T.mean(x, axis=(2, 3))


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def encode(encoder: ConvEncoder, batch, mode: str = "train") -> Tensor:
    """Embed a (batch, C, H, W) array; eval mode uses running BN statistics."""
    return encoder(batch, training=_training(mode))
