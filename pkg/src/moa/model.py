"""Configurations, presets and the full hierarchical classifier."""

from __future__ import annotations

import dataclasses
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, GeometryError
from .global_attn import MoaBlock, MoaGeometry
from .nn import LayerNorm, Linear, Module, drop_path_rates
from .tensor import Tensor
from .window import LocalBlock


@dataclass
class MoaConfig:
    """Geometry of the global blocks.  ``None`` means "derive from the window size"."""

    kv_patch: Optional[int] = None  # default: window + 2
    kv_stride: Optional[int] = None  # default: window
    kv_padding: int = 1
    reduction: int = 32
    enabled: bool = True


@dataclass
class ModelConfig:
    input_size: int
    window_size: int
    patch_size: int
    depths: List[int]
    num_heads: List[int]
    hidden_dims: List[int]
    num_classes: int
    in_channels: int = 3
    moa: MoaConfig = field(default_factory=MoaConfig)
    drop_path_max: float = 0.0
    mlp_ratio: int = 4

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def kv_patch(self) -> int:
        return self.moa.kv_patch if self.moa.kv_patch is not None else self.window_size + 2

    @property
    def kv_stride(self) -> int:
        return self.moa.kv_stride if self.moa.kv_stride is not None else self.window_size

    def stage_resolution(self, stage: int) -> int:
        """Side length of the token map in ``stage`` (0-based)."""
        return (self.input_size // self.patch_size) // (2 ** stage)

    def moa_geometry(self, stage: int) -> MoaGeometry:
        r = self.stage_resolution(stage)
        return MoaGeometry(H=r, W=r, C=self.hidden_dims[stage], reduction=self.moa.reduction,
                           query_patch=self.window_size, kv_patch=self.kv_patch,
                           kv_stride=self.kv_stride, kv_padding=self.moa.kv_padding)

    def validate(self) -> "ModelConfig":
        n = len(self.depths)
        if n == 0 or len(self.num_heads) != n or len(self.hidden_dims) != n:
            raise ConfigError(
                f"depths, num_heads and hidden_dims need equal non-zero length, got "
                f"{len(self.depths)}, {len(self.num_heads)}, {len(self.hidden_dims)}"
            )
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.patch_size < 1 or self.input_size % self.patch_size:
            raise GeometryError(
                f"patch size {self.patch_size} does not divide input size {self.input_size}"
            )
        for i in range(n):
            r = (self.input_size // self.patch_size) / (2 ** i)
            if r != int(r) or int(r) % self.window_size:
                raise GeometryError(
                    f"stage {i + 1} resolution {r:g} is not divisible by window size {self.window_size}"
                )
            if self.hidden_dims[i] % self.num_heads[i]:
                raise GeometryError(
                    f"stage {i + 1}: hidden dim {self.hidden_dims[i]} not divisible by {self.num_heads[i]} heads"
                )
            if self.moa.enabled and i < n - 1:
                self.moa_geometry(i).validate()
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError(f"drop_path_max must lie in [0, 1), got {self.drop_path_max}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        moa = MoaConfig(**d.pop("moa", {}))
        return cls(moa=moa, **d)

    def replace(self, **changes) -> "ModelConfig":
        moa_changes = changes.pop("moa", None)
        cfg = dataclasses.replace(self, **changes)
        cfg.moa = dataclasses.replace(self.moa, **(moa_changes or {}))
        cfg.depths, cfg.num_heads, cfg.hidden_dims = list(cfg.depths), list(cfg.num_heads), list(cfg.hidden_dims)
        return cfg


def _cifar(heads, dims) -> ModelConfig:
    return ModelConfig(input_size=32, window_size=4, patch_size=1, depths=[2, 2, 6, 2],
                       num_heads=heads, hidden_dims=dims, num_classes=100, drop_path_max=0.2)


def _imagenet(depths, heads, dims, drop) -> ModelConfig:
    return ModelConfig(input_size=224, window_size=14, patch_size=4, depths=depths,
                       num_heads=heads, hidden_dims=dims, num_classes=1000, drop_path_max=drop)


_PRESETS = {
    "moa-t-cifar": lambda: _cifar([3, 6, 12, 24], [96, 192, 384, 768]),
    "moa-b-cifar": lambda: _cifar([4, 8, 16, 32], [128, 256, 512, 1024]),
    "moa-t-in": lambda: _imagenet([2, 2, 8], [3, 6, 12], [96, 192, 384], 0.2),
    "moa-s-in": lambda: _imagenet([2, 2, 20], [3, 6, 12], [96, 192, 384], 0.3),
    "moa-b-in": lambda: _imagenet([2, 2, 20], [4, 8, 16], [128, 256, 512], 0.5),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ModelConfig:
    """Published model configurations by name."""
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None


def desk_config(num_classes: int = 4, image_size: int = 16, reduction: int = 4) -> ModelConfig:
    """Two-stage model small enough to train on one CPU core in minutes."""
    return ModelConfig(input_size=image_size, window_size=4, patch_size=1, depths=[1, 1],
                       num_heads=[2, 4], hidden_dims=[16, 32], num_classes=num_classes,
                       moa=MoaConfig(reduction=reduction))


def _child_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per component, so toggling MOA leaves every other init unchanged
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class PatchEmbed(Module):
    """Flatten ``P x P x C_in`` patches and project them linearly."""

    def __init__(self, patch_size: int, in_channels: int, dim: int, rng=None, dtype=np.float64):
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * in_channels, dim, rng, dtype=dtype)

    def forward(self, images: Tensor) -> Tensor:
        return patch_partition_embed(images, self)


def patch_partition_embed(images: Tensor, embed: PatchEmbed) -> Tensor:
    B, H, W, C = images.shape
    P = embed.patch_size
    if H % P or W % P:
        raise GeometryError(f"patch size {P} does not divide image {H}x{W}")
    if P > 1:
        x = images.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(B, H // P, W // P, P * P * C)
    else:
        x = images
    return embed.proj(x)


class PatchMerge(Module):
    """Concatenate 2x2 neighbourhoods (raster order), normalise, project 4C -> C_out."""

    def __init__(self, dim: int, out_dim: int, rng=None, dtype=np.float64, norm: bool = True):
        self.norm = LayerNorm(4 * dim, dtype=dtype) if norm else None
        self.reduction = Linear(4 * dim, out_dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return patch_merge(x, self)


def patch_merge(x: Tensor, merge: PatchMerge) -> Tensor:
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise GeometryError(f"patch merging needs even height and width, got {H}x{W}")
    x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, H // 2, W // 2, 4 * C)
    if merge.norm is not None:
        x = merge.norm(x)
    return merge.reduction(x)


class Stage(Module):
    def __init__(self, blocks: List[LocalBlock], moa: Optional[MoaBlock], merge: Optional[PatchMerge]):
        self.blocks = blocks
        self.moa = moa
        self.merge = merge

    def forward(self, x: Tensor, rng=None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, rng)
        if self.moa is not None:
            x = self.moa(x)
        if self.merge is not None:
            x = self.merge(x)
        return x


class MoaTransformer(Module):
    """Window-attention classifier with global MOA blocks before each patch merge."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        self.patch_embed = PatchEmbed(c.patch_size, c.in_channels, c.hidden_dims[0],
                                      _child_rng(seed, "patch_embed"), dtype)
        rates = drop_path_rates(sum(c.depths), c.drop_path_max)
        stages = []
        k = 0
        last = c.num_stages - 1
        for i in range(c.num_stages):
            dim = c.hidden_dims[i]
            blocks = []
            for j in range(c.depths[i]):
                blocks.append(LocalBlock(dim, c.num_heads[i], c.window_size, rates[k], c.mlp_ratio,
                                         _child_rng(seed, f"stages.{i}.blocks.{j}"), dtype))
                k += 1
            moa = merge = None
            if i < last:
                if c.moa.enabled:
                    moa = MoaBlock(c.moa_geometry(i), c.num_heads[i], c.mlp_ratio,
                                   _child_rng(seed, f"stages.{i}.moa"), dtype)
                merge = PatchMerge(dim, c.hidden_dims[i + 1], _child_rng(seed, f"stages.{i}.merge"), dtype)
            stages.append(Stage(blocks, moa, merge))
        self.stages = stages
        self.norm = LayerNorm(c.hidden_dims[-1], dtype=dtype)
        self.head = Linear(c.hidden_dims[-1], c.num_classes, _child_rng(seed, "head"), dtype=dtype)

    def features(self, images: Tensor, rng=None) -> Tensor:
        x = self.patch_embed(images)
        for stage in self.stages:
            x = stage(x, rng)
        return x

    def forward(self, images, rng: Optional[np.random.Generator] = None) -> Tensor:
        images = T.as_tensor(images)
        if images.dtype != self.dtype:
            images = Tensor(images.data.astype(self.dtype))
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.input_size, c.input_size, c.in_channels):
            raise DimensionError(
                f"model expects B x {c.input_size} x {c.input_size} x {c.in_channels} images, got {images.shape}"
            )
        x = self.norm(self.features(images, rng))
        x = x.mean(axis=(1, 2))
        return self.head(x)


def model_forward(images, model: MoaTransformer, mode: str = "eval", rng=None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(images, rng)


class ParamStore:
    """Ordered name -> trainable tensor map."""

    def __init__(self, named: Iterator[Tuple[str, Tensor]]):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in named:
            if name in self._params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self._params[name] = p

    @classmethod
    def from_module(cls, module: Module) -> "ParamStore":
        return cls(module.named_parameters())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}
