"""Analytic parameter and FLOP accounting.

Counting conventions (batch size 1):

* one multiply-accumulate (MAC) = 2 FLOPs; linear layers and 1x1 convs on
  ``T`` tokens cost ``2 * T * in * out`` FLOPs (bias adds are not counted
  separately);
* attention costs ``2 * Nq * Nk * C`` MACs per window for ``QK^T`` and ``AV``;
* elementwise work is charged per element: layer norm 5, GELU 8, softmax 5,
  logit scaling and bias add 1 each, residual add 1, mean pooling 1.

Rows are named after the module path that owns the parameters, so a row's
``params`` equals the registered scalars under that prefix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List

from .model import ModelConfig

LN_FLOPS = 5
GELU_FLOPS = 8
SOFTMAX_FLOPS = 5


@dataclass
class CostRow:
    name: str
    params: int
    flops: int
    macs: int = 0


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def add(self, name: str, params: int = 0, flops: int = 0, macs: int = 0) -> None:
        self.rows.append(CostRow(name, int(params), int(flops), int(macs)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "flops", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.flops, r.macs])
        w.writerow(["total", self.total_params, self.total_flops, self.total_macs])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != ["name", "params", "flops", "macs"]:
            raise ValueError(f"unexpected cost CSV header {header}")
        report = cls()
        total = None
        for name, params, flops, macs in reader:
            if name == "total":
                total = (int(params), int(flops), int(macs))
            else:
                report.add(name, int(params), int(flops), int(macs))
        if total is not None and total != (report.total_params, report.total_flops, report.total_macs):
            raise ValueError("cost CSV totals do not match its rows")
        return report

    def format_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MFLOPs':>12}  {'MMACs':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12,}  {r.flops / 1e6:>12.3f}  {r.macs / 1e6:>10.3f}")
        lines.append(
            f"{'total':<{width}}  {self.total_params:>12,}  {self.total_flops / 1e6:>12.3f}  "
            f"{self.total_macs / 1e6:>10.3f}"
        )
        lines.append(f"params: {self.total_params / 1e6:.2f}M  GFLOPs: {self.total_flops / 1e9:.3f}  "
                     f"GMACs: {self.total_macs / 1e9:.3f}")
        return "\n".join(lines)


def linear_cost(tokens: int, in_dim: int, out_dim: int, bias: bool = True):
    """``(params, flops, macs)`` of a linear layer applied to ``tokens`` rows."""
    macs = tokens * in_dim * out_dim
    return in_dim * out_dim + (out_dim if bias else 0), 2 * macs, macs


def attention_matmul_flops(n_query: int, n_key: int, dim: int) -> int:
    """FLOPs of ``QK^T`` plus ``AV`` for one window, summed over heads."""
    return 2 * 2 * n_query * n_key * dim


def _linear(report: CostReport, name: str, tokens: int, i: int, o: int, extra_flops: int = 0):
    p, f, m = linear_cost(tokens, i, o)
    report.add(name, p, f + extra_flops, m)


def _layernorm(report: CostReport, name: str, tokens: int, dim: int):
    report.add(name, 2 * dim, LN_FLOPS * tokens * dim)


def _mlp(report: CostReport, prefix: str, tokens: int, dim: int, hidden: int):
    _linear(report, f"{prefix}.fc1", tokens, dim, hidden, GELU_FLOPS * tokens * hidden)
    _linear(report, f"{prefix}.fc2", tokens, hidden, dim)


def _attention_core(report: CostReport, name: str, groups: int, heads: int, nq: int, nk: int, dim: int):
    macs = groups * 2 * nq * nk * dim
    logits = groups * heads * nq * nk
    report.add(name, 0, 2 * macs + (1 + SOFTMAX_FLOPS) * logits, macs)


def _block(report: CostReport, prefix: str, cfg: ModelConfig, res: int, dim: int, heads: int):
    T = res * res
    w = cfg.window_size
    n = w * w
    n_windows = T // n
    hidden = cfg.mlp_ratio * dim
    _layernorm(report, f"{prefix}.norm1", T, dim)
    _linear(report, f"{prefix}.attn.qkv", T, dim, 3 * dim)
    report.add(f"{prefix}.attn.rel_pos_bias", (2 * w - 1) ** 2 * heads, n_windows * heads * n * n)
    _attention_core(report, f"{prefix}.attn.core", n_windows, heads, n, n, dim)
    _linear(report, f"{prefix}.attn.proj", T, dim, dim)
    _layernorm(report, f"{prefix}.norm2", T, dim)
    _mlp(report, f"{prefix}.mlp", T, dim, hidden)
    report.add(f"{prefix}.residual", 0, 2 * T * dim)


def _moa(report: CostReport, prefix: str, cfg: ModelConfig, stage: int):
    g = cfg.moa_geometry(stage).validate()
    heads = cfg.num_heads[stage]
    C, cr = g.C, g.reduced_channels
    q, k = g.query_patch, g.kv_patch
    Mh, Mw = g.query_grid
    Nh, Nw = g.key_grid
    M, N = Mh * Mw, Nh * Nw
    _linear(report, f"{prefix}.reduce", g.H * g.W, C, cr)
    _linear(report, f"{prefix}.q_proj", M, q * q * cr, C)
    _linear(report, f"{prefix}.k_proj", N, k * k * cr, C)
    _linear(report, f"{prefix}.v_proj", N, k * k * cr, C)
    _layernorm(report, f"{prefix}.norm1", M, C)
    report.add(f"{prefix}.rel_pos_bias", (2 * Mh - 1) * (2 * Mw - 1) * heads, heads * M * N)
    _attention_core(report, f"{prefix}.core", 1, heads, M, N, C)
    _layernorm(report, f"{prefix}.norm2", M, C)
    _mlp(report, f"{prefix}.mlp", M, C, cfg.mlp_ratio * C)
    _linear(report, f"{prefix}.out_conv", M, C, C)
    report.add(f"{prefix}.residual", 0, 2 * M * C + g.H * g.W * C)


def cost_report(config: ModelConfig) -> CostReport:
    """Per-layer parameter and FLOP tallies for a single image."""
    cfg = config.validate()
    report = CostReport()
    res0 = cfg.stage_resolution(0)
    P = cfg.patch_size
    _linear(report, "patch_embed.proj", res0 * res0, P * P * cfg.in_channels, cfg.hidden_dims[0])
    for i in range(cfg.num_stages):
        res, dim, heads = cfg.stage_resolution(i), cfg.hidden_dims[i], cfg.num_heads[i]
        for j in range(cfg.depths[i]):
            _block(report, f"stages.{i}.blocks.{j}", cfg, res, dim, heads)
        if i < cfg.num_stages - 1:
            if cfg.moa.enabled:
                _moa(report, f"stages.{i}.moa", cfg, i)
            T = (res // 2) ** 2
            _layernorm(report, f"stages.{i}.merge.norm", T, 4 * dim)
            _linear(report, f"stages.{i}.merge.reduction", T, 4 * dim, cfg.hidden_dims[i + 1])
    res, dim = cfg.stage_resolution(cfg.num_stages - 1), cfg.hidden_dims[-1]
    _layernorm(report, "norm", res * res, dim)
    report.add("pool", 0, res * res * dim)
    _linear(report, "head", 1, dim, cfg.num_classes)
    return report


def count_params(config: ModelConfig) -> CostReport:
    return cost_report(config)


def count_flops(config: ModelConfig) -> CostReport:
    return cost_report(config)
