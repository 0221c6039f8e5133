"""Local window attention: partitioning, relative position bias, and the transformer block."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, GeometryError
from .nn import LayerNorm, Linear, Mlp, Module, Parameter, drop_path, trunc_normal
from .tensor import Tensor


def window_partition(x: Tensor, w: int) -> Tensor:
    """Split a ``B x H x W x C`` map into ``(B * H/w * W/w) x w^2 x C`` windows.

    Windows are emitted image by image, in raster order; sites inside a window
    are in raster order too.
    """
    B, H, W, C = x.shape
    if H % w or W % w:
        raise GeometryError(f"window size {w} does not divide feature map {H}x{W}")
    x = x.reshape(B, H // w, w, W // w, w, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (H // w) * (W // w), w * w, C)


def window_reverse(windows: Tensor, w: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    if H % w or W % w:
        raise GeometryError(f"window size {w} does not divide feature map {H}x{W}")
    B = windows.shape[0] // ((H // w) * (W // w))
    x = windows.reshape(B, H // w, W // w, w, w, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def relative_position_index(Mh: int, Mw: int) -> np.ndarray:
    """Table row for every (query, key) token pair inside an ``Mh x Mw`` grid.

    Entry ``(i, j)`` is ``(dr + Mh - 1) * (2 Mw - 1) + (dc + Mw - 1)`` with
    ``(dr, dc)`` the row/column offset of token ``i`` relative to token ``j``.
    """
    if Mh < 1 or Mw < 1:
        raise GeometryError(f"grid must be at least 1x1, got {Mh}x{Mw}")
    rows, cols = np.meshgrid(np.arange(Mh), np.arange(Mw), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    dr = rows[:, None] - rows[None, :] + Mh - 1
    dc = cols[:, None] - cols[None, :] + Mw - 1
    return (dr * (2 * Mw - 1) + dc).astype(np.intp)


class RelPosBias(Module):
    """Learnable per-head bias looked up by relative offset.

    ``index`` has shape ``(n_query, n_key)`` and selects rows of ``table``
    (``table_rows x num_heads``).  The same table serves every window.
    """

    def __init__(self, table_rows: int, num_heads: int, index: np.ndarray,
                 rng=None, dtype=np.float64):
        index = np.asarray(index, dtype=np.intp)
        if index.size and (index.min() < 0 or index.max() >= table_rows):
            raise GeometryError(f"bias index outside table of {table_rows} rows")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_heads = num_heads
        self.table = Parameter(trunc_normal(rng, (table_rows, num_heads), 0.02, dtype))
        self._index = index

    @property
    def index(self) -> np.ndarray:
        return self._index

    def forward(self) -> Tensor:
        nq, nk = self._index.shape
        b = T.take(self.table, self._index.ravel(), axis=0)  # (nq*nk, heads)
        return b.reshape(nq, nk, self.num_heads).transpose(2, 0, 1)


def window_rel_pos_bias(window: int, num_heads: int, rng=None, dtype=np.float64) -> RelPosBias:
    rows = (2 * window - 1) ** 2
    return RelPosBias(rows, num_heads, relative_position_index(window, window), rng, dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor] = None,
                  return_weights: bool = False):
    """``softmax(q k^T / sqrt(d) + bias) v`` over the key axis.

    ``q`` is ``(..., heads, Nq, d)``, ``k``/``v`` are ``(..., heads, Nk, d)``
    and ``bias`` broadcasts against ``(..., heads, Nq, Nk)``.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    logits = T.scale(T.matmul(q, k.swapaxes(-1, -2)), d ** -0.5)
    if bias is not None:
        want = logits.shape[-2:]
        if tuple(bias.shape[-2:]) != want:
            raise DimensionError(f"attention bias {bias.shape} does not match logits {logits.shape}")
        logits = logits + bias
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class WindowMsa(Module):
    """Multi-head self-attention inside each window, with a fused qkv projection."""

    def __init__(self, dim: int, num_heads: int, window: int, rng=None, dtype=np.float64):
        if dim % num_heads:
            raise DimensionError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.window = window
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.rel_pos_bias = window_rel_pos_bias(window, num_heads, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        nw, n, c = x.shape
        qkv = self.qkv(x).reshape(nw, n, 3, self.num_heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # 3, nw, heads, n, d
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = scaled_dot_attention(q, k, v, self.rel_pos_bias())
        out = out.transpose(0, 2, 1, 3).reshape(nw, n, c)
        return self.proj(out)


class LocalBlock(Module):
    """Pre-norm transformer block with non-shifted window attention.

    Operates on ``B x H x W x C`` maps; attention is computed per window, the
    MLP per site.
    """

    def __init__(self, dim: int, num_heads: int, window: int, drop_path: float = 0.0,
                 mlp_ratio: int = 4, rng=None, dtype=np.float64):
        self.window = window
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowMsa(dim, num_heads, window, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng, dtype)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        B, H, W, C = x.shape
        keep = 1.0 - self.drop_path
        h = window_partition(self.norm1(x), self.window)
        h = window_reverse(self.attn(h), self.window, H, W)
        x = drop_path(x, h, keep, self.training, rng)
        x = drop_path(x, self.mlp(self.norm2(x)), keep, self.training, rng)
        return x


def local_block_forward(x: Tensor, block: LocalBlock, rng=None) -> Tensor:
    return block(x, rng)
