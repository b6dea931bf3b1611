"""Dual-orientation convolutional embedding network.

The network is kept functional: :class:`NetworkParams` is a plain bag of
named tensors and :func:`forward` is a pure function of ``(params, images)``.
Convolution, pooling and autograd come from torch; the architecture, the
initialization rule and the loss being differentiated live here and in
:mod:`knucklenet.losses`.

Layout (default config, 240x80 input)::

    block1  H 5x9 | V 9x5  @32 each -> concat 64  -> maxpool 2x2
    block2  H 3x7 | V 7x3  @64 each -> concat 128 -> maxpool 1x2 (width only)
    block3  H 3x5 | V 5x3  @96 each -> concat 192 -> maxpool 2x2
    tail    3x3 @128, 3x3 @128                    -> maxpool 2x2
    dense   flatten -> 128, then L2 normalization
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericalError
from .losses import batch_triplet_loss

Shape = tuple[int, int]


@dataclass(frozen=True)
class DualBlockConfig:
    h_kernel: Shape
    v_kernel: Shape
    channels_per_branch: int
    pool: Shape

    def to_list(self) -> list:
        return [list(self.h_kernel), list(self.v_kernel), self.channels_per_branch, list(self.pool)]

    @classmethod
    def from_list(cls, value: Sequence) -> "DualBlockConfig":
        h, v, ch, pool = value
        return cls(tuple(h), tuple(v), int(ch), tuple(pool))


DEFAULT_BLOCKS = (
    DualBlockConfig((5, 9), (9, 5), 32, (2, 2)),
    DualBlockConfig((3, 7), (7, 3), 64, (1, 2)),
    DualBlockConfig((3, 5), (5, 3), 96, (2, 2)),
)


@dataclass(frozen=True)
class NetworkConfig:
    input_height: int = 240
    input_width: int = 80
    blocks: tuple[DualBlockConfig, ...] = DEFAULT_BLOCKS
    tail_conv_channels: tuple[int, ...] = (128, 128)
    embedding_dim: int = 128
    tail_pool: Shape = (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, DualBlockConfig) else DualBlockConfig.from_list(b) for b in self.blocks))
        object.__setattr__(self, "tail_conv_channels", tuple(int(c) for c in self.tail_conv_channels))
        object.__setattr__(self, "tail_pool", tuple(self.tail_pool))

    def to_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "blocks": [b.to_list() for b in self.blocks],
            "tail_conv_channels": list(self.tail_conv_channels),
            "embedding_dim": self.embedding_dim,
            "tail_pool": list(self.tail_pool),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first offending field."""
        if self.input_height <= self.input_width:
            raise ConfigError("input_height must exceed input_width (tall finger crops)")
        if len(self.blocks) != 3:
            raise ConfigError(f"blocks: expected exactly 3 dual-orientation blocks, got {len(self.blocks)}")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        h, w = self.input_height, self.input_width
        for i, b in enumerate(self.blocks):
            name = f"blocks[{i}]"
            if not b.h_kernel[1] > b.h_kernel[0]:
                raise ConfigError(f"{name}.h_kernel must be wider than tall, got {b.h_kernel}")
            if not b.v_kernel[0] > b.v_kernel[1]:
                raise ConfigError(f"{name}.v_kernel must be taller than wide, got {b.v_kernel}")
            if b.channels_per_branch < 1:
                raise ConfigError(f"{name}.channels_per_branch must be >= 1")
            if i == 1 and not (b.pool[0] == 1 and b.pool[1] >= 2):
                raise ConfigError(f"{name}.pool must pool width only, i.e. (1, k>=2); got {b.pool}")
            for kname in ("h_kernel", "v_kernel"):
                k = getattr(b, kname)
                if k[0] > h or k[1] > w:
                    raise ConfigError(f"{name}.{kname} {k} larger than its {h}x{w} input feature map")
            h, w = h // b.pool[0], w // b.pool[1]
            if h < 1 or w < 1:
                raise ConfigError(f"{name}.pool {b.pool} collapses the feature map")
        for j, _ in enumerate(self.tail_conv_channels):
            if h < 3 or w < 3:
                raise ConfigError(f"tail_conv_channels[{j}]: 3x3 kernel larger than {h}x{w} feature map")
        h, w = h // self.tail_pool[0], w // self.tail_pool[1]
        if h < 1 or w < 1:
            raise ConfigError(f"tail_pool {self.tail_pool} collapses the feature map")

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the map fed to the dense layer."""
        h, w = self.input_height, self.input_width
        for b in self.blocks:
            h, w = h // b.pool[0], w // b.pool[1]
        c = self.tail_conv_channels[-1] if self.tail_conv_channels else 2 * self.blocks[-1].channels_per_branch
        return c, h // self.tail_pool[0], w // self.tail_pool[1]


@dataclass
class NetworkParams:
    config: NetworkConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def to(self, dtype: torch.dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.to(dtype) for k, v in self.tensors.items()})

    def clone(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def replace(self, tensors: Mapping[str, torch.Tensor]) -> "NetworkParams":
        return NetworkParams(self.config, dict(tensors))


def _layer_specs(config: NetworkConfig):
    """Yield (name, out_channels, in_channels, kernel) for every trainable conv/dense layer."""
    c = 1
    for i, b in enumerate(config.blocks, start=1):
        yield f"block{i}.h", b.channels_per_branch, c, b.h_kernel
        yield f"block{i}.v", b.channels_per_branch, c, b.v_kernel
        c = 2 * b.channels_per_branch
    for j, out in enumerate(config.tail_conv_channels, start=1):
        yield f"tail{j}", out, c, (3, 3)
        c = out


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, out, cin, k in _layer_specs(config):
        shapes[f"{name}.weight"] = (out, cin, *k)
        shapes[f"{name}.bias"] = (out,)
    c, h, w = config.feature_shape()
    shapes["dense.weight"] = (config.embedding_dim, c * h * w)
    shapes["dense.bias"] = (config.embedding_dim,)
    return shapes


def _fan_in_uniform(gen: torch.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound


def build_network(config: NetworkConfig | None = None, seed: int = 0,
                  dtype: torch.dtype = torch.float32) -> NetworkParams:
    """Build freshly initialized parameters for ``config``.

    Weights are drawn fan-in-scaled uniform, then each kernel has its
    per-input-channel spatial mean removed (and each dense row its
    per-channel mean over positions). ReLU maps carry a large positive
    mean; without this the random-init embeddings of unrelated images all
    collapse onto one direction. Biases start at zero.
    """
    config = config or NetworkConfig()
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    tensors: dict[str, torch.Tensor] = {}
    for name, out, cin, k in _layer_specs(config):
        w = _fan_in_uniform(gen, (out, cin, *k), cin * k[0] * k[1])
        if k[0] * k[1] > 1:
            w = w - w.mean(dim=(-2, -1), keepdim=True)
        tensors[f"{name}.weight"] = w.to(dtype)
        tensors[f"{name}.bias"] = torch.zeros(out, dtype=dtype)
    c, h, w_ = config.feature_shape()
    n_feat = c * h * w_
    dense = _fan_in_uniform(gen, (config.embedding_dim, c, h * w_), n_feat)
    if h * w_ > 1:
        dense = dense - dense.mean(dim=-1, keepdim=True)
    tensors["dense.weight"] = dense.reshape(config.embedding_dim, n_feat).to(dtype)
    tensors["dense.bias"] = torch.zeros(config.embedding_dim, dtype=dtype)
    return NetworkParams(config, tensors)


def count_parameters(params: NetworkParams | Mapping[str, torch.Tensor]) -> int:
    tensors = params.tensors if isinstance(params, NetworkParams) else params
    return int(sum(t.numel() for t in tensors.values()))


def _check_finite(x: torch.Tensor, layer: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values produced by layer {layer}")


def _conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, layer: str) -> torch.Tensor:
    if x.dim() != 4:
        raise DimensionError(f"{layer}: expected a (N, C, H, W) feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"{layer}: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[-2:]
    if x.shape[-2] < kh or x.shape[-1] < kw:
        raise DimensionError(
            f"{layer}: {kh}x{kw} kernel does not fit {x.shape[-2]}x{x.shape[-1]} input")
    return F.conv2d(x, weight, bias, padding="same")


def dual_block_forward(x: torch.Tensor, block: DualBlockConfig, params: NetworkParams | Mapping,
                       prefix: str = "block1", check_finite: bool = False) -> torch.Tensor:
    """Horizontal and vertical branches, ReLU, channel concat, then max-pool."""
    t = params.tensors if isinstance(params, NetworkParams) else params
    h = F.relu(_conv(x, t[f"{prefix}.h.weight"], t[f"{prefix}.h.bias"], f"{prefix}.h"))
    v = F.relu(_conv(x, t[f"{prefix}.v.weight"], t[f"{prefix}.v.bias"], f"{prefix}.v"))
    out = F.max_pool2d(torch.cat([h, v], dim=1), block.pool)
    if check_finite:
        _check_finite(out, prefix)
    return out


def _as_batch(params: NetworkParams, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    cfg = params.config
    if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (cfg.input_height, cfg.input_width):
        raise DimensionError(
            f"expected images of size {cfg.input_height}x{cfg.input_width}, got shape {tuple(x.shape)}")
    return x.to(params.dtype)


def conv_features(params: NetworkParams, images, check_finite: bool = False) -> torch.Tensor:
    """Feature map after the tail pool, just before flattening into the dense layer."""
    x = _as_batch(params, images)
    t = params.tensors
    for i, b in enumerate(params.config.blocks, start=1):
        x = dual_block_forward(x, b, t, f"block{i}", check_finite)
    for j, _ in enumerate(params.config.tail_conv_channels, start=1):
        x = F.relu(_conv(x, t[f"tail{j}.weight"], t[f"tail{j}.bias"], f"tail{j}"))
        if check_finite:
            _check_finite(x, f"tail{j}")
    return F.max_pool2d(x, params.config.tail_pool)


def normalize_embedding(v):
    """Scale ``v`` (one vector or a batch of rows) to unit L2 norm.

    Raises :class:`DegenerateInputError` for a zero vector.
    """
    if isinstance(v, torch.Tensor):
        norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        if (norm == 0).any():
            raise DegenerateInputError("cannot normalize a zero vector")
        return v / norm
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def forward(params: NetworkParams, images, check_finite: bool = False) -> torch.Tensor:
    """Embed a batch of images; returns an (N, embedding_dim) tensor of unit rows."""
    feats = conv_features(params, images, check_finite).flatten(1)
    out = F.linear(feats, params.tensors["dense.weight"], params.tensors["dense.bias"])
    if check_finite:
        _check_finite(out, "dense")
    return normalize_embedding(out)


def embed(params: NetworkParams, images, chunk: int = 256) -> np.ndarray:
    """Inference helper: no autograd, chunked, returns numpy."""
    images = np.asarray(images)
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            outs.append(forward(params, images[start:start + chunk]).numpy())
    if not outs:
        return np.zeros((0, params.config.embedding_dim), dtype=np.float32)
    return np.concatenate(outs)


def loss_and_gradients(params: NetworkParams, batch, margin: float):
    """Mean triplet loss over ``batch`` and its gradient w.r.t. every tensor.

    ``batch`` is an (N, 3, H, W) stack of (anchor, positive, negative) images.
    """
    x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch)
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"triplet batch must be (N, 3, H, W), got shape {tuple(x.shape)}")
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    n = x.shape[0]
    names = list(params.tensors)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    live = NetworkParams(params.config, leaves)
    # anchors, positives, negatives laid out contiguously so one forward pass covers all
    flat = x.transpose(0, 1).reshape(3 * n, *x.shape[2:])
    emb = forward(live, flat, check_finite=True)
    loss = batch_triplet_loss(emb[:n], emb[n:2 * n], emb[2 * n:], margin)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite triplet loss")
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(leaves[k]) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}")
        out[k] = g.detach()
    return float(loss.detach()), out


def gradients(params: NetworkParams, batch, margin: float) -> dict[str, torch.Tensor]:
    return loss_and_gradients(params, batch, margin)[1]
