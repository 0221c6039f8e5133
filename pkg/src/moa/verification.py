"""Independent reference implementations and the finite-difference gradient suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .global_attn import MoaBlock, MoaGeometry
from .model import ModelConfig, MoaConfig, MoaTransformer, ParamStore, PatchMerge
from . import nn
from .nn import Conv1x1, LayerNorm, Linear
from .tensor import Tensor
from .window import LocalBlock, WindowMsa

GRADCHECK_TOL = 1e-4
# Check losses are scaled so round-off in the difference quotient stays far
# below the 1e-8 relative-error floor; structurally zero gradients (e.g. key
# biases, which softmax cancels) would otherwise read as ~1e-3 errors.
LOSS_SCALE = 1e-4


# -- oracles -----------------------------------------------------------------

def naive_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, B: Optional[np.ndarray] = None) -> np.ndarray:
    """Scalar-loop ``softmax(Q K^T / sqrt(d) + B) V`` for ``(heads, n, d)`` inputs."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    heads, nq, d = Q.shape
    nk = K.shape[1]
    out = np.zeros((heads, nq, V.shape[2]))
    scale = 1.0 / math.sqrt(d)
    for h in range(heads):
        for i in range(nq):
            logits = []
            for j in range(nk):
                s = 0.0
                for c in range(d):
                    s += Q[h, i, c] * K[h, j, c]
                s *= scale
                if B is not None:
                    s += B[h, i, j]
                logits.append(s)
            top = max(logits)
            w = [math.exp(l - top) for l in logits]
            z = math.fsum(w)
            for c in range(V.shape[2]):
                out[h, i, c] = math.fsum(w[j] / z * V[h, j, c] for j in range(nk))
    return out


def naive_sliding_patches(fmap: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """Explicit-loop ``k x k`` patch extraction at stride ``s`` over a zero-padded ``H x W x C`` map.

    Returns ``(n_patches, k*k*C)``; an extra leading batch axis is passed through.
    """
    fmap = np.asarray(fmap)
    if fmap.ndim == 4:
        return np.stack([naive_sliding_patches(m, k, s, p) for m in fmap])
    H, W, C = fmap.shape
    padded = np.zeros((H + 2 * p, W + 2 * p, C), dtype=fmap.dtype)
    for i in range(H):
        for j in range(W):
            padded[i + p, j + p] = fmap[i, j]
    tokens = []
    top = 0
    while top + k <= H + 2 * p:
        left = 0
        while left + k <= W + 2 * p:
            tok = []
            for u in range(k):
                for v in range(k):
                    tok.extend(padded[top + u, left + v])
            tokens.append(tok)
            left += s
        top += s
    return np.asarray(tokens, dtype=fmap.dtype).reshape(len(tokens), k * k * C)


def count_placements(n: int, k: int, s: int, p: int) -> int:
    """Brute-force count of valid patch starts along one padded axis."""
    return sum(1 for start in range(0, n + 2 * p, s) if start + k <= n + 2 * p)


# -- finite differences --------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    entries: List[ParamCheck] = field(default_factory=list)
    threshold: float = GRADCHECK_TOL

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[ParamCheck]:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    def failing(self) -> List[str]:
        return [e.name for e in self.entries if e.max_rel_error >= self.threshold]


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_grad(loss_fn: Callable[[], Tensor], params: Union[Mapping[str, Tensor], ParamStore],
                     epsilon: float = 1e-5, max_per_param: int = 200, seed: int = 0,
                     threshold: float = GRADCHECK_TOL) -> GradCheckReport:
    """Compare autodiff gradients against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.  Parameters with more than ``max_per_param`` scalars are
    subsampled with a fixed seed.
    """
    items = list(params.items())
    for _, p in items:
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    # a parameter the loss does not reach has an exactly zero gradient
    analytic = {name: np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64)
                for name, p in items}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(threshold=threshold)
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= max_per_param else np.sort(rng.choice(n, max_per_param, replace=False))
        worst = (-1.0, 0, 0.0, 0.0)
        with T.no_grad():
            for i in picks:
                orig = flat[i]
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * epsilon)
                ana = analytic[name].reshape(-1)[i]
                err = relative_error(ana, num)
                if err > worst[0]:
                    worst = (err, int(i), ana, num)
        err, i, ana, num = worst
        report.entries.append(ParamCheck(name, max(err, 0.0), tuple(int(v) for v in np.unravel_index(i, p.shape)),
                                         float(ana), float(num), len(picks)))
    for _, p in items:
        p.grad = None
    return report


# -- gradcheck suite ---------------------------------------------------------

def _projected_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _case(module_params: List[Tuple[str, Tensor]], x: Optional[Tensor],
          forward: Callable[[Optional[Tensor]], Tensor], rng: np.random.Generator, **kw) -> GradCheckReport:
    params = dict(module_params)
    if x is not None:
        params["input"] = x
    with T.no_grad():
        shape = forward(x).shape
    weights = LOSS_SCALE * rng.standard_normal(shape)
    return finite_diff_grad(lambda: _projected_loss(forward(x), weights), params, **kw)


def _randomize(module: nn.Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    # move off the identity-ish init so every path carries gradient
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _input(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _check_ops(rng, **kw) -> GradCheckReport:
    a = _input(rng, 2, 3, 4)
    b = _input(rng, 4, 5)
    c = _input(rng, 5)
    idx = np.array([0, 2, 2, 1])

    def fwd(_):
        h = T.matmul(a, b) + c
        h = T.softmax(h) * T.log_softmax(h * 0.7)
        h = T.concat([h, T.pad(h, ((0, 0), (0, 0), (1, 0)))[..., :3]], axis=-1)
        h = T.take(h, idx, axis=1).transpose(2, 0, 1)
        return h.mean(axis=1, keepdims=True) + T.sqrt(T.exp(T.scale(a, 0.3)).sum(axis=1))

    return _case([("a", a), ("b", b), ("c", c)], None, fwd, rng, **kw)


def _check_linear(rng, **kw):
    lin = Linear(5, 4, rng)
    _randomize(lin, rng)
    return _case(list(lin.named_parameters()), _input(rng, 3, 5), lin, rng, **kw)


def _check_layernorm(rng, **kw):
    ln = LayerNorm(6)
    _randomize(ln, rng)
    return _case(list(ln.named_parameters()), _input(rng, 2, 3, 6), ln, rng, **kw)


def _check_gelu(rng, **kw):
    return _case([], _input(rng, 4, 5), T.gelu, rng, **kw)


def _check_conv1x1(rng, **kw):
    conv = Conv1x1(4, 3, rng)
    _randomize(conv, rng)
    return _case(list(conv.named_parameters()), _input(rng, 1, 3, 3, 4), conv, rng, **kw)


def _check_window_msa(rng, **kw):
    msa = WindowMsa(8, 2, 2, rng)
    _randomize(msa, rng, 0.3)
    return _case(list(msa.named_parameters()), _input(rng, 2, 4, 8), msa, rng, **kw)


def _check_local_block(rng, **kw):
    blk = LocalBlock(8, 2, 2, rng=rng)
    _randomize(blk, rng, 0.3)
    blk.eval()
    return _case(list(blk.named_parameters()), _input(rng, 1, 2, 4, 8), blk, rng, **kw)


def micro_moa_geometry() -> MoaGeometry:
    return MoaGeometry(H=8, W=8, C=8, reduction=2, query_patch=4, kv_patch=6, kv_stride=4, kv_padding=1)


def _check_moa(rng, **kw):
    blk = MoaBlock(micro_moa_geometry(), num_heads=2, rng=rng)
    _randomize(blk, rng, 0.3)
    return _case(list(blk.named_parameters()), _input(rng, 1, 8, 8, 8), blk, rng, **kw)


def _check_patch_merge(rng, **kw):
    pm = PatchMerge(4, 8, rng)
    _randomize(pm, rng)
    return _case(list(pm.named_parameters()), _input(rng, 1, 4, 4, 4), pm, rng, **kw)


def _check_head(rng, **kw):
    norm, head = LayerNorm(8), Linear(8, 3, rng)
    _randomize(norm, rng)
    _randomize(head, rng)
    params = [("norm." + n, p) for n, p in norm.named_parameters()] + \
             [("head." + n, p) for n, p in head.named_parameters()]
    return _case(params, _input(rng, 2, 2, 2, 8), lambda x: head(norm(x).mean(axis=(1, 2))), rng, **kw)


def micro_model_config() -> ModelConfig:
    return ModelConfig(input_size=8, window_size=2, patch_size=1, depths=[1, 1], num_heads=[2, 2],
                       hidden_dims=[8, 16], num_classes=3,
                       moa=MoaConfig(kv_patch=4, kv_stride=2, kv_padding=1, reduction=2))


def _check_model(rng, **kw):
    from .training import cross_entropy_soft

    model = MoaTransformer(micro_model_config(), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _randomize(model, rng, 0.2)
    model.eval()
    images = rng.standard_normal((2, 8, 8, 3))
    target = np.eye(3)[[0, 2]]
    params = dict(model.named_parameters())
    return finite_diff_grad(lambda: T.scale(cross_entropy_soft(model(images), target), LOSS_SCALE),
                            params, **kw)


GRADCHECK_CASES: Dict[str, Callable] = {
    "ops": _check_ops,
    "linear": _check_linear,
    "layernorm": _check_layernorm,
    "gelu": _check_gelu,
    "conv1x1": _check_conv1x1,
    "window-msa": _check_window_msa,
    "local-block": _check_local_block,
    "moa": _check_moa,
    "patch-merge": _check_patch_merge,
    "head": _check_head,
    "model": _check_model,
}


def gradcheck_suite(scope: str = "all", seed: int = 0, **kw) -> Dict[str, GradCheckReport]:
    """Run the finite-difference suite for one layer type or ``"all"``."""
    if scope != "all" and scope not in GRADCHECK_CASES:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose all or one of {', '.join(GRADCHECK_CASES)}")
    names = list(GRADCHECK_CASES) if scope == "all" else [scope]
    return {n: GRADCHECK_CASES[n](np.random.default_rng([seed, i]), **kw) for i, n in enumerate(names)}


# -- local/global equivalence ------------------------------------------------

def local_global_equivalence(config: ModelConfig, seed: int = 0, model: Optional[MoaTransformer] = None,
                             batch: int = 2, dtype=np.float64) -> bool:
    """True iff the model's logits equal, bit for bit, those of the same model without MOA.

    The MOA-free twin shares every non-MOA parameter with ``model`` (built
    fresh from ``config`` and ``seed`` when not given).
    """
    if model is None:
        model = MoaTransformer(config, seed=seed, dtype=dtype)
    local_cfg = model.config.replace(moa={"enabled": False})
    twin = MoaTransformer(local_cfg, seed=seed, dtype=model.dtype)
    own = dict(model.named_parameters())
    twin.load_state_dict({name: own[name].data.copy() for name, _ in twin.named_parameters()})
    c = model.config
    images = np.random.default_rng(seed).standard_normal((batch, c.input_size, c.input_size, c.in_channels))
    model.eval()
    twin.eval()
    with T.no_grad():
        a = model(images).data
        b = twin(images).data
    return bool(np.array_equal(a, b))
