"""Analytic parameter and FLOP accounting over a built :class:`ModelGraph`.

Counting rules, per node, for an output of ``P`` pixels:

* convolution: ``k*k*cin*cout*P`` multiply-accumulates (one unit each under
  ``MAC_AS_ONE``, two under ``MAC_AS_TWO``); bias adds ``cout*P`` in their own row
* layer norm: 4 passes per element (mean, variance, normalise, affine)
* Swish / ReLU, residual add, max pool, mixer average pool: 1 per output element
* adaptive average pool: 1 per *input* element (one accumulate pass)
* up-sampling and concatenation move data only and cost nothing

Only convolution rows change with the convention.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .model import ModelConfig, ModelGraph, build_mfennet

TABLE1 = {
    "mfennet": {"params": 11.14e6, "flops": 17.13e9},
    "unet": {"params": 31.04e6, "flops": 54.66e9},
}


class Convention(enum.Enum):
    MAC_AS_ONE = 1
    MAC_AS_TWO = 2


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list
    input_shape: tuple
    convention: Convention = Convention.MAC_AS_ONE
    model_kind: str = ""

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def conv_flops(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "conv")

    def csv(self) -> str:
        lines = ["name,params,flops"] + [f"{r.name},{r.params},{r.flops}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [4])
        out = [f"{'name':<{width}}  {'kind':<5}  {'params':>12}  {'flops':>16}"]
        for r in self.rows:
            out.append(f"{r.name:<{width}}  {r.kind:<5}  {r.params:>12,}  {r.flops:>16,}")
        out.append(f"{'TOTAL':<{width}}  {'':<5}  {self.total_params:>12,}  {self.total_flops:>16,}")
        return "\n".join(out) + "\n"

    def summary(self) -> str:
        n, c, h, w = self.input_shape
        return (
            f"Params (M): {self.total_params / 1e6:.2f}  FLOPs (G): {self.total_flops / 1e9:.2f}  "
            f"[conv-only {self.conv_flops / 1e9:.2f} G; {self.convention.name}; input {n}x{c}x{h}x{w}]"
        )


def _conv_rows(name, cin, cout, k, pixels, mac, act=None):
    rows = [
        CostRow(name, "conv", k * k * cin * cout + cout, k * k * cin * cout * pixels * mac),
        CostRow(f"{name}:bias", "bias", 0, cout * pixels),
    ]
    if act:
        rows.append(CostRow(f"{name}:{act}", "act", 0, cout * pixels))
    return rows


def _node_rows(node, h: int, w: int, mac: int) -> list:
    a = node.attrs
    level = a.get("level", 0)
    ho, wo = h >> level, w >> level
    pixels = ho * wo
    if node.op == "conv":
        return _conv_rows(node.name, a["cin"], a["cout"], a["k"], pixels, mac, a.get("act"))
    if node.op == "maxpool":
        return [CostRow(node.name, "pool", 0, a["c"] * pixels)]
    if node.op == "metaformer":
        c, hid = a["c"], a["c"] * a["ratio"]
        mixer = c * pixels * (2 if a["subtract_input"] else 1)
        return [
            CostRow(f"{node.name}.norm1", "norm", 2 * c, 4 * c * pixels),
            CostRow(f"{node.name}.mixer", "pool", 0, mixer),
            CostRow(f"{node.name}.add1", "add", 0, c * pixels),
            CostRow(f"{node.name}.norm2", "norm", 2 * c, 4 * c * pixels),
            *_conv_rows(f"{node.name}.fc1", c, hid, 1, pixels, mac, "swish"),
            *_conv_rows(f"{node.name}.fc2", hid, c, 1, pixels, mac),
            CostRow(f"{node.name}.add2", "add", 0, c * pixels),
        ]
    if node.op == "spp":
        c, bins = a["c"], a["bins"]
        proj = c // len(bins)
        rows = []
        for i, b in enumerate(bins):
            rows.append(CostRow(f"{node.name}.branch{i}.pool{b}", "pool", 0, c * pixels))
            rows += _conv_rows(f"{node.name}.branch{i}.proj", c, proj, 1, pixels, mac, "swish")
        rows += _conv_rows(f"{node.name}.fuse", c + proj * len(bins), c, 3, pixels, mac, "swish")
        return rows
    if node.op in ("upsample2x", "concat"):
        return []
    raise ValueError(f"no cost rule for op {node.op!r}")


def report(model: ModelGraph, input_shape: Sequence[int], convention: Convention = Convention.MAC_AS_ONE) -> CostReport:
    """Per-node parameter and FLOP rows in graph order."""
    n, c, h, w = (int(v) for v in input_shape)
    model.check_input((n, c, h, w))
    mac = convention.value
    rows = []
    for node in model.nodes:
        rows += [replace(r, flops=r.flops * n) for r in _node_rows(node, h, w, mac)]
    return CostReport(rows, (n, c, h, w), convention, model.kind)


def count_params(model: ModelGraph) -> int:
    s = model.config.input_size if model.kind == "mfennet" else 256
    return report(model, (1, model.config.in_channels, s, s)).total_params


def count_flops(model: ModelGraph, input_shape: Sequence[int], convention: Convention = Convention.MAC_AS_ONE) -> int:
    return report(model, input_shape, convention).total_flops


def calibration(rep: CostReport, kind: Optional[str] = None) -> dict:
    """Relative deltas of a 256x256 report against the published complexity figures."""
    ref = TABLE1[kind or rep.model_kind]
    return {
        "params": rep.total_params,
        "flops": rep.total_flops,
        "params_ref": ref["params"],
        "flops_ref": ref["flops"],
        "params_delta": rep.total_params / ref["params"] - 1.0,
        "flops_delta": rep.total_flops / ref["flops"] - 1.0,
    }


def format_calibration(cal: dict, convention: Convention) -> str:
    return (
        f"Params {cal['params'] / 1e6:.2f}M vs {cal['params_ref'] / 1e6:.2f}M ({cal['params_delta']:+.1%}); "
        f"FLOPs {cal['flops'] / 1e9:.2f}G vs {cal['flops_ref'] / 1e9:.2f}G ({cal['flops_delta']:+.1%}) "
        f"under {convention.name}"
    )


@dataclass
class TuneResult:
    blocks_per_stage: tuple
    params: int
    flops: int
    params_delta: float
    flops_delta: float
    ranking: list = field(default_factory=list)


def tune_depths(
    base: Optional[ModelConfig] = None,
    max_blocks: int = 4,
    input_size: int = 256,
    targets: Optional[dict] = None,
) -> TuneResult:
    """Exhaustive search over blocks_per_stage in [0, max_blocks]^5.

    Ranked by the worse of the two relative deltas (params, FLOPs), ties
    broken by their sum, then lexicographically.
    """
    base = base or ModelConfig()
    targets = targets or TABLE1["mfennet"]
    scored = []
    for depths in itertools.product(range(max_blocks + 1), repeat=5):
        cfg = replace(base, blocks_per_stage=depths, input_size=input_size)
        rep = report(build_mfennet(cfg, allocate=False), (1, cfg.in_channels, input_size, input_size))
        dp = rep.total_params / targets["params"] - 1.0
        df = rep.total_flops / targets["flops"] - 1.0
        scored.append(((max(abs(dp), abs(df)), abs(dp) + abs(df), depths), rep.total_params, rep.total_flops, dp, df))
    scored.sort(key=lambda s: s[0])
    best = scored[0]
    ranking = [(s[0][2], s[1], s[2], s[3], s[4]) for s in scored[:10]]
    return TuneResult(best[0][2], best[1], best[2], best[3], best[4], ranking)
