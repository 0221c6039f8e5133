"""Local window vision transformer with multi-resolution overlapped global attention."""

from .errors import (ConfigError, ContractError, DimensionError, FormatError, GeometryError, TruncatedFileError,
                     NumericalAbort)
from .global_attn import (MoaBlock, MoaGeometry, extract_kv_tokens, extract_query_tokens,
                          key_grid_dims, moa_forward, moa_rel_pos_bias, overlap_fraction)
from .model import (PRESET_NAMES, ModelConfig, MoaConfig, MoaTransformer, ParamStore, desk_config,
                    model_forward, preset)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
