"""Parameterised layers: linear, layer norm, GELU MLP, 1x1 convolution, drop path."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def Parameter(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal container; parameters are discovered from instance attributes.

    Attribute order is insertion order, so ``named_parameters`` is
    deterministic for a given constructor.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` of shape ``(out_dim, in_dim)``."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, dtype=np.float64, std: float = 0.02):
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"Linear dims must be positive, got {in_dim}->{out_dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(trunc_normal(rng, (out_dim, in_dim), std, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(x, self)


def linear_forward(x: Tensor, layer: Linear) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"linear expects trailing dim {layer.in_dim}, got input {x.shape}")
    vector = x.ndim == 1
    if vector:
        x = x.reshape(1, layer.in_dim)
    y = T.matmul(x, layer.weight.T)
    if layer.bias is not None:
        y = y + layer.bias
    return y.reshape(layer.out_dim) if vector else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.dim = dim
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layernorm_forward(x, self)


def layernorm_forward(x: Tensor, ln: LayerNorm) -> Tensor:
    if x.shape[-1] != ln.dim:
        raise DimensionError(f"layer norm over {ln.dim} features got input {x.shape}")
    return T.layer_norm(x, ln.weight, ln.bias, ln.eps)


gelu = T.gelu


class Mlp(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng=None, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Conv1x1(Linear):
    """Pointwise convolution on channels-last feature maps.

    Parameter layout matches :class:`Linear`: ``weight`` is ``(Cout, Cin)``.
    """

    def forward(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.weight, self.bias)


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv1x1 expects a B x H x W x C map, got {x.shape}")
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1x1 expects {cin} input channels, got map {x.shape}")
    y = T.matmul(x, weight.T)
    if bias is not None:
        y = y + bias
    return y


def drop_path(x: Tensor, residual: Tensor, keep_prob: float, training: bool,
              rng: Optional[np.random.Generator]) -> Tensor:
    """Residual add where, in training, each sample's branch survives with ``keep_prob``.

    Surviving branches are rescaled by ``1 / keep_prob`` so the expectation is
    ``x + residual``.  The mask is drawn over the leading (batch) axis.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if x.shape != residual.shape:
        raise DimensionError(f"drop_path shapes differ: {x.shape} vs {residual.shape}")
    if not training or keep_prob == 1.0:
        return x + residual
    if rng is None:
        raise ContractError("drop_path in training mode needs an rng")
    mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(mask_shape) < keep_prob).astype(x.dtype) / keep_prob
    return x + residual * Tensor(mask)


def drop_path_rates(total_blocks: int, max_rate: float) -> List[float]:
    """Linear ramp from 0 at the first block to ``max_rate`` at the last."""
    if total_blocks <= 1:
        return [0.0] * total_blocks
    return [float(max_rate) * i / (total_blocks - 1) for i in range(total_blocks)]
