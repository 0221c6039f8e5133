"""Multi-resolution overlapped attention between stages.

Queries come from non-overlapping ``q x q`` patches of a channel-reduced map;
keys and values come from larger ``k x k`` patches taken at stride ``s`` over a
zero-padded copy, so neighbouring key patches overlap.  Every query patch
yields one global token; after attention and an MLP those tokens are mapped by
a 1x1 convolution and added back to every site of their window.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, GeometryError
from .nn import Conv1x1, LayerNorm, Linear, Mlp, Module, Parameter
from .tensor import Tensor
from .window import RelPosBias, scaled_dot_attention


def _suggest_padding(n: int, k: int, s: int) -> Optional[int]:
    for p in range(0, s + 1):
        if n - k + 2 * p >= 0 and (n - k + 2 * p) % s == 0:
            return p
    return None


def key_grid_dims(H: int, W: int, k: int, p: int, s: int) -> Tuple[int, int]:
    """Number of key/value patches per axis: ``(n - k + 2p) / s + 1``."""
    if k < 1 or s < 1 or p < 0:
        raise GeometryError(f"invalid key patch geometry k={k}, s={s}, p={p}")
    dims = []
    for axis, n in (("height", H), ("width", W)):
        span = n - k + 2 * p
        if span < 0 or span % s:
            hint = _suggest_padding(n, k, s)
            msg = f"key patches k={k}, stride={s}, padding={p} do not tile {axis} {n}"
            if hint is not None:
                msg += f" (padding={hint} would)"
            raise GeometryError(msg)
        dims.append(span // s + 1)
    return dims[0], dims[1]


def overlap_fraction(k: int, s: int) -> float:
    """Linear overlap ``(k - s) / k`` between horizontally adjacent key patches."""
    if s < 1 or k < s:
        raise ContractError(f"overlap needs k >= s >= 1, got k={k}, s={s}")
    return (k - s) / k


@dataclass(frozen=True)
class MoaGeometry:
    """Spatial layout of one MOA block."""

    H: int
    W: int
    C: int
    reduction: int
    query_patch: int
    kv_patch: int
    kv_stride: int
    kv_padding: int

    def validate(self) -> "MoaGeometry":
        q = self.query_patch
        if self.H % q or self.W % q:
            raise GeometryError(
                f"query patch {q} does not divide the {self.H}x{self.W} map (H mod q and W mod q must be 0)"
            )
        if self.kv_patch < self.kv_stride:
            raise GeometryError(
                f"kv patch {self.kv_patch} smaller than stride {self.kv_stride}; patches would leave gaps"
            )
        if self.reduction < 1 or self.C % self.reduction:
            raise GeometryError(f"reduction {self.reduction} does not divide {self.C} channels")
        key_grid_dims(self.H, self.W, self.kv_patch, self.kv_padding, self.kv_stride)
        return self

    @property
    def reduced_channels(self) -> int:
        return self.C // self.reduction

    @property
    def query_grid(self) -> Tuple[int, int]:
        return self.H // self.query_patch, self.W // self.query_patch

    @property
    def key_grid(self) -> Tuple[int, int]:
        return key_grid_dims(self.H, self.W, self.kv_patch, self.kv_padding, self.kv_stride)

    @property
    def overlap(self) -> float:
        return overlap_fraction(self.kv_patch, self.kv_stride)


def extract_query_tokens(x: Tensor, q: int) -> Tensor:
    """``B x H x W x c`` -> ``B x (H/q * W/q) x (q*q*c)``; patches in raster order."""
    B, H, W, C = x.shape
    if H % q or W % q:
        raise GeometryError(f"query patch {q} does not divide the {H}x{W} map")
    x = x.reshape(B, H // q, q, W // q, q, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // q) * (W // q), q * q * C)


@lru_cache(maxsize=64)
def _kv_index(Hp: int, Wp: int, k: int, s: int, Nh: int, Nw: int) -> np.ndarray:
    # flat site index in the padded map for every (patch, offset) pair
    top = np.arange(Nh) * s
    left = np.arange(Nw) * s
    du, dv = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = top[:, None, None, None] + du[None, None]
    cols = left[None, :, None, None] + dv[None, None]
    idx = (rows * Wp + cols).reshape(Nh * Nw, k * k)
    idx.setflags(write=False)
    return idx


def extract_kv_tokens(x: Tensor, k: int, s: int, p: int) -> Tensor:
    """Sliding ``k x k`` patches at stride ``s`` over the zero-padded map.

    Returns ``B x (Nh * Nw) x (k*k*c)`` with the same within-patch flattening
    (row, column, channel) as :func:`extract_query_tokens`.
    """
    B, H, W, C = x.shape
    Nh, Nw = key_grid_dims(H, W, k, p, s)
    xp = T.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    Hp, Wp = H + 2 * p, W + 2 * p
    idx = _kv_index(Hp, Wp, k, s, Nh, Nw)
    flat = xp.reshape(B, Hp * Wp, C)
    tokens = T.take(flat, idx, axis=1)  # B, N, k*k, C
    return tokens.reshape(B, Nh * Nw, k * k * C)


def moa_rel_pos_bias(Mh: int, Mw: int, Nh: int, Nw: int,
                     geometry: Optional[MoaGeometry] = None) -> np.ndarray:
    """Bias-table row for every (query patch, key patch) pair.

    Key-patch centres are expressed in query-grid units and snapped to the
    nearest query cell (clamped to the grid), so the table has
    ``(2 Mh - 1) * (2 Mw - 1)`` rows.  With ``geometry`` the true pixel centres
    are used; without it the key lattice is assumed to span the map evenly.
    """
    def key_cells(M: int, N: int) -> np.ndarray:
        j = np.arange(N, dtype=np.float64)
        if geometry is not None:
            q, k, s, p = (geometry.query_patch, geometry.kv_patch,
                          geometry.kv_stride, geometry.kv_padding)
            centre = j * s - p + (k - 1) / 2.0
            pos = (centre - (q - 1) / 2.0) / q
        else:
            pos = (j + 0.5) * M / N - 0.5
        return np.clip(np.floor(pos + 0.5), 0, M - 1).astype(np.intp)

    kr, kc = key_cells(Mh, Nh), key_cells(Mw, Nw)
    qr, qc = np.meshgrid(np.arange(Mh), np.arange(Mw), indexing="ij")
    kr, kc = np.meshgrid(kr, kc, indexing="ij")
    dr = qr.ravel()[:, None] - kr.ravel()[None, :] + Mh - 1
    dc = qc.ravel()[:, None] - kc.ravel()[None, :] + Mw - 1
    return (dr * (2 * Mw - 1) + dc).astype(np.intp)


class MoaBlock(Module):
    """Global attention over window-sized query patches and overlapped key patches."""

    def __init__(self, geometry: MoaGeometry, num_heads: int, mlp_ratio: int = 4,
                 rng=None, dtype=np.float64):
        geometry.validate()
        C = geometry.C
        if C % num_heads:
            raise DimensionError(f"dim {C} is not divisible by {num_heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geometry = geometry
        self.num_heads = num_heads
        cr = geometry.reduced_channels
        q, k = geometry.query_patch, geometry.kv_patch
        Mh, Mw = geometry.query_grid
        Nh, Nw = geometry.key_grid
        self.reduce = Conv1x1(C, cr, rng, dtype=dtype)
        self.q_proj = Linear(q * q * cr, C, rng, dtype=dtype)
        self.k_proj = Linear(k * k * cr, C, rng, dtype=dtype)
        self.v_proj = Linear(k * k * cr, C, rng, dtype=dtype)
        self.norm1 = LayerNorm(C, dtype=dtype)
        self.rel_pos_bias = RelPosBias((2 * Mh - 1) * (2 * Mw - 1), num_heads,
                                       moa_rel_pos_bias(Mh, Mw, Nh, Nw, geometry), rng, dtype)
        self.norm2 = LayerNorm(C, dtype=dtype)
        self.mlp = Mlp(C, mlp_ratio * C, rng, dtype)
        self.out_conv = Conv1x1(C, C, rng, dtype=dtype)
        # global branch starts as the identity map
        self.out_conv.weight = Parameter(np.zeros((C, C), dtype=dtype))

    def _heads(self, t: Tensor) -> Tensor:
        B, n, C = t.shape
        return t.reshape(B, n, self.num_heads, C // self.num_heads).transpose(0, 2, 1, 3)

    def global_tokens(self, x: Tensor) -> Tensor:
        """Per-window global features, ``B x H/q x W/q x C`` (before ``out_conv``)."""
        g = self.geometry
        B, H, W, C = x.shape
        if (H, W, C) != (g.H, g.W, g.C):
            raise GeometryError(f"MOA block built for {g.H}x{g.W}x{g.C}, got map {x.shape}")
        r = self.reduce(x)
        tq = self.q_proj(extract_query_tokens(r, g.query_patch))
        kv = extract_kv_tokens(r, g.kv_patch, g.kv_stride, g.kv_padding)
        keys, values = self.k_proj(kv), self.v_proj(kv)
        a = scaled_dot_attention(self._heads(self.norm1(tq)), self._heads(keys), self._heads(values),
                          self.rel_pos_bias())
        a = a.transpose(0, 2, 1, 3).reshape(tq.shape)
        t = tq + a
        t = t + self.mlp(self.norm2(t))
        Mh, Mw = g.query_grid
        return t.reshape(B, Mh, Mw, C)

    def forward(self, x: Tensor) -> Tensor:
        g = self.geometry
        B, H, W, C = x.shape
        Mh, Mw = g.query_grid
        q = g.query_patch
        glob = self.out_conv(self.global_tokens(x))
        out = x.reshape(B, Mh, q, Mw, q, C) + glob.reshape(B, Mh, 1, Mw, 1, C)
        return out.reshape(B, H, W, C)


def moa_forward(x: Tensor, block: MoaBlock, geometry: Optional[MoaGeometry] = None) -> Tensor:
    if geometry is not None and geometry != block.geometry:
        raise GeometryError("geometry does not match the block it was built with")
    return block(x)
