"""Walk through the global-attention patch geometry of the tiny ImageNet model.

Run: python3 demos/geometry_walkthrough.py
"""

import numpy as np

from moa import MoaBlock, extract_kv_tokens, extract_query_tokens, preset
from moa.tensor import Tensor

cfg = preset("moa-t-in")
for stage in range(cfg.num_stages - 1):
    g = cfg.moa_geometry(stage).validate()
    print(f"stage {stage}: {g.H}x{g.W}x{g.C} map, reduced to {g.reduced_channels} channels")
    print(f"  query patches {g.query_patch}x{g.query_patch} -> grid {g.query_grid}")
    print(f"  key patches {g.kv_patch}x{g.kv_patch}, stride {g.kv_stride}, padding {g.kv_padding} "
          f"-> grid {g.key_grid}, overlap {g.overlap:.3f}")

# token shapes for one image through the first block
g = cfg.moa_geometry(0)
blk = MoaBlock(g, cfg.num_heads[0], rng=np.random.default_rng(0))
x = Tensor(np.random.default_rng(1).standard_normal((1, g.H, g.W, g.C)).astype(np.float32))
r = blk.reduce(x)
print("reduced map", r.shape)
print("query tokens", extract_query_tokens(r, g.query_patch).shape)
print("key tokens  ", extract_kv_tokens(r, g.kv_patch, g.kv_stride, g.kv_padding).shape)

# at init the output conv is zero, so the block is the identity
print("identity at init:", bool(np.array_equal(blk(x).data, x.data)))
