"""MFEnNet and the vanilla U-Net baseline as node-list graphs.

A :class:`ModelGraph` is an ordered list of :class:`Node` records. The same
list drives the forward interpreter and the analytic cost counter in
:mod:`mfennet.complexity`, so both always describe one architecture.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .engine import ops
from .engine.tensor import ParamStore, Tensor, get_dtype, no_grad

# Depths picked by complexity.tune_depths() against the published
# 11.14M params / 17.13 GFLOPs at 256x256 (see README).
TUNED_BLOCKS_PER_STAGE = (1, 4, 2, 2, 0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_widths: tuple = (32, 64, 128, 256, 512)
    blocks_per_stage: tuple = TUNED_BLOCKS_PER_STAGE
    mixer_kernel: int = 3
    ffn_ratio: int = 4
    spp_bins: tuple = (1, 2, 3, 6)
    in_channels: int = 3
    out_channels: int = 1
    norm_eps: float = 1e-5
    mixer_subtract_input: bool = False
    input_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(v) for v in self.blocks_per_stage))
        object.__setattr__(self, "spp_bins", tuple(int(v) for v in self.spp_bins))

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 16

    def validate(self) -> "ModelConfig":
        if len(self.stage_widths) != 5 or len(self.blocks_per_stage) != 5:
            raise ConfigError("stage_widths and blocks_per_stage must both have 5 entries")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 0:
            raise ConfigError("stage widths must be >= 1 and block counts >= 0")
        if self.mixer_kernel < 1 or self.mixer_kernel % 2 == 0:
            raise ConfigError(f"mixer_kernel must be odd, got {self.mixer_kernel}")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio must be >= 1, got {self.ffn_ratio}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if not self.spp_bins:
            raise ConfigError("spp_bins must not be empty")
        for b in self.spp_bins:
            if b < 1 or b > self.bottleneck_size:
                raise ConfigError(
                    f"SPP bin {b} does not fit the {self.bottleneck_size}x{self.bottleneck_size} "
                    f"bottleneck of a {self.input_size}x{self.input_size} input"
                )
        if self.stage_widths[-1] % len(self.spp_bins):
            raise ConfigError("bottleneck width must be divisible by the number of SPP bins")
        return self

    def for_input(self, size: int) -> "ModelConfig":
        """Same architecture sized for ``size`` inputs; SPP bins are clamped to the bottleneck."""
        bott = size // 16
        bins = tuple(min(b, bott) for b in self.spp_bins)
        return replace(self, input_size=size, spp_bins=bins)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    params: tuple = ()
    stage: Optional[int] = None
    part: str = ""


@dataclass(frozen=True)
class SkipPair:
    encoder: str
    decoder: str
    channels: int
    level: int


@dataclass(frozen=True)
class BlockInfo:
    name: str
    part: str
    stage: int
    width: int


class ModelGraph:
    """Built network: parameter store, node list, topology metadata."""

    def __init__(self, kind: str, config: ModelConfig, divisor: int = 16):
        self.kind = kind
        self.config = config
        self.divisor = divisor
        self.store = ParamStore()
        self.nodes: list = []
        self.skip_pairs: list = []
        self.blocks: list = []
        self.param_shapes: dict = {}
        self.output = ""
        self._allocate = True
        self._rng = None

    # -- building -----------------------------------------------------------

    def _param(self, name: str, shape: tuple, init: str) -> str:
        self.param_shapes[name] = tuple(shape)
        if self._allocate:
            if init == "uniform":
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                value = self._rng.uniform(-bound, bound, size=shape)
            elif init == "ones":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            self.store.add(name, value.astype(get_dtype()))
        return name

    def _add(self, node: Node) -> str:
        self.nodes.append(node)
        return node.name

    def conv(self, name, src, cin, cout, k, level, act=None, padding=None, stage=None, part=""):
        if padding is None:
            padding = k // 2
        w = self._param(f"{name}.weight", (cout, cin, k, k), "uniform")
        b = self._param(f"{name}.bias", (cout,), "zeros")
        attrs = dict(cin=cin, cout=cout, k=k, padding=padding, level=level, act=act)
        return self._add(Node(name, "conv", (src,), attrs, (w, b), stage, part))

    # -- running ------------------------------------------------------------

    def run(self, x, keep: Sequence[str] = ()) -> dict:
        """Evaluate every node; returns the outputs named in ``keep`` plus the logits."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))
        self.check_input(x.shape)
        last_use = {}
        for i, node in enumerate(self.nodes):
            for src in node.inputs:
                last_use[src] = i
        keep = set(keep) | {self.output}
        env = {"input": x}
        for i, node in enumerate(self.nodes):
            args = [env[s] for s in node.inputs]
            env[node.name] = _EXEC[node.op](self, node, args)
            for src in node.inputs:
                if last_use[src] == i and src not in keep:
                    del env[src]
        return {k: v for k, v in env.items() if k in keep}

    def forward(self, x) -> Tensor:
        return self.run(x)[self.output]

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(x).numpy()

    def check_input(self, shape: tuple) -> None:
        if len(shape) != 4:
            raise ops.ShapeError(f"expected an (n, c, h, w) batch, got shape {shape}")
        n, c, h, w = shape
        if c != self.config.in_channels:
            raise ops.ShapeError(f"model expects {self.config.in_channels} input channels, got shape {shape}")
        if h % self.divisor or w % self.divisor or h < self.divisor or w < self.divisor:
            raise ops.ShapeError(
                f"input spatial dims {h}x{w} must be positive multiples of {self.divisor}"
            )

    # -- introspection ------------------------------------------------------

    def manifest(self) -> str:
        return self.store.manifest()

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def param_count(self) -> int:
        return sum(p.size for p in self.store)


# ---------------------------------------------------------------------------
# building blocks usable on their own


def metaformer_block(
    z: Tensor,
    store: ParamStore,
    prefix: str,
    mixer_kernel: int = 3,
    eps: float = 1e-5,
    subtract_input: bool = False,
) -> Tensor:
    """Z1 = Z + Pool(Norm(Z)); Z2 = Z1 + FFN(Norm(Z1))."""
    width = store[f"{prefix}.norm1.gamma"].shape[0]
    if z.shape[1] != width:
        raise ops.ShapeError(f"metaformer_block {prefix}: input shape {z.shape} has {z.shape[1]} channels, block width is {width}")
    n1 = ops.channel_layernorm(z, store[f"{prefix}.norm1.gamma"], store[f"{prefix}.norm1.beta"], eps)
    mixed = ops.avgpool2d_samesize(n1, mixer_kernel)
    if subtract_input:
        mixed = ops.sub(mixed, n1)
    z1 = ops.add(z, mixed)
    n2 = ops.channel_layernorm(z1, store[f"{prefix}.norm2.gamma"], store[f"{prefix}.norm2.beta"], eps)
    hidden = ops.swish(ops.conv2d(n2, store[f"{prefix}.fc1.weight"], store[f"{prefix}.fc1.bias"]))
    return ops.add(z1, ops.conv2d(hidden, store[f"{prefix}.fc2.weight"], store[f"{prefix}.fc2.bias"]))


def spp_branches(x: Tensor, bins: Sequence[int]) -> list:
    """Adaptive average pool to each bin size, resized back to x's spatial size."""
    _, _, h, w = x.shape
    return [ops.upsample_nearest_to(ops.adaptive_avgpool2d(x, b), h, w) for b in bins]


def spp(x: Tensor, bins: Sequence[int], store: ParamStore, prefix: str = "spp") -> Tensor:
    """Pyramid pooling: pooled branches projected to C/len(bins), concatenated with x, fused to C."""
    feats = x
    for i, branch in enumerate(spp_branches(x, bins)):
        proj = ops.conv2d(branch, store[f"{prefix}.branch{i}.proj.weight"], store[f"{prefix}.branch{i}.proj.bias"])
        feats = ops.concat_channels(feats, ops.swish(proj))
    fused = ops.conv2d(feats, store[f"{prefix}.fuse.weight"], store[f"{prefix}.fuse.bias"], padding=1)
    return ops.swish(fused)


def encoder_stage(graph: ModelGraph, x: Tensor, stage_index: int) -> Tensor:
    """Embedding conv plus the MetaFormer stack of one encoder level (no pooling)."""
    out = x
    for node in graph.nodes:
        if node.part == "encoder" and node.stage == stage_index and node.op != "maxpool":
            out = _EXEC[node.op](graph, node, [out])
    return out


def decoder_stage(graph: ModelGraph, x: Tensor, skip: Tensor, stage_index: int) -> Tensor:
    """Up-sample x, concatenate with the encoder skip, then the stage's convolutions."""
    env = {}
    for node in graph.nodes:
        if node.part != "decoder" or node.stage != stage_index:
            continue
        if node.op == "concat":
            up = env[node.inputs[1]]
            if up.shape[2:] != skip.shape[2:]:
                raise ops.ShapeError(f"decoder stage {stage_index}: upsampled {up.shape} vs skip {skip.shape}")
            args = [skip, up]
        elif not env:
            args = [x]
        else:
            args = [env[node.inputs[0]]]
        env[node.name] = _EXEC[node.op](graph, node, args)
        last = node.name
    return env[last]


# ---------------------------------------------------------------------------
# node executors


def _exec_conv(graph, node, args):
    w, b = (graph.store[p] for p in node.params)
    out = ops.conv2d(args[0], w, b, stride=1, padding=node.attrs["padding"])
    act = node.attrs.get("act")
    if act == "swish":
        out = ops.swish(out)
    elif act == "relu":
        out = ops.relu(out)
    return out


def _exec_metaformer(graph, node, args):
    a = node.attrs
    return metaformer_block(args[0], graph.store, node.name, a["k"], a["eps"], a["subtract_input"])


def _exec_spp(graph, node, args):
    return spp(args[0], node.attrs["bins"], graph.store, node.name)


_EXEC = {
    "conv": _exec_conv,
    "metaformer": _exec_metaformer,
    "spp": _exec_spp,
    "maxpool": lambda g, n, a: ops.maxpool2d(a[0], 2, 2),
    "upsample2x": lambda g, n, a: ops.upsample_nearest2x(a[0]),
    "concat": lambda g, n, a: ops.concat_channels(a[0], a[1]),
}


# ---------------------------------------------------------------------------
# builders


def build_mfennet(config: Optional[ModelConfig] = None, seed: int = 0, allocate: bool = True) -> ModelGraph:
    """Five-level encoder-decoder: MetaFormer encoder, SPP bottleneck, conv decoder.

    ``allocate=False`` records the topology and parameter shapes only, which
    is all the cost counter needs.
    """
    cfg = (config or ModelConfig()).validate()
    g = ModelGraph("mfennet", cfg)
    g._allocate = allocate
    g._rng = np.random.default_rng(seed)
    widths = cfg.stage_widths
    r = cfg.ffn_ratio

    src, cin = "input", cfg.in_channels
    skips = []
    for i, width in enumerate(widths):
        if i > 0:
            src = g._add(Node(f"enc{i}.pool", "maxpool", (src,), dict(c=cin, level=i), (), i, "encoder"))
        src = g.conv(f"enc{i}.embed", src, cin, width, 3, level=i, act="swish", stage=i, part="encoder")
        for j in range(cfg.blocks_per_stage[i]):
            name = f"enc{i}.block{j}"
            params = (
                g._param(f"{name}.norm1.gamma", (width,), "ones"),
                g._param(f"{name}.norm1.beta", (width,), "zeros"),
                g._param(f"{name}.norm2.gamma", (width,), "ones"),
                g._param(f"{name}.norm2.beta", (width,), "zeros"),
                g._param(f"{name}.fc1.weight", (r * width, width, 1, 1), "uniform"),
                g._param(f"{name}.fc1.bias", (r * width,), "zeros"),
                g._param(f"{name}.fc2.weight", (width, r * width, 1, 1), "uniform"),
                g._param(f"{name}.fc2.bias", (width,), "zeros"),
            )
            attrs = dict(c=width, ratio=r, k=cfg.mixer_kernel, eps=cfg.norm_eps,
                         subtract_input=cfg.mixer_subtract_input, level=i)
            src = g._add(Node(name, "metaformer", (src,), attrs, params, i, "encoder"))
            g.blocks.append(BlockInfo(name, "encoder", i, width))
        skips.append((src, width))
        cin = width

    bott = widths[-1]
    nb = len(cfg.spp_bins)
    params = []
    for k in range(nb):
        params.append(g._param(f"spp.branch{k}.proj.weight", (bott // nb, bott, 1, 1), "uniform"))
        params.append(g._param(f"spp.branch{k}.proj.bias", (bott // nb,), "zeros"))
    params.append(g._param("spp.fuse.weight", (bott, 2 * bott, 3, 3), "uniform"))
    params.append(g._param("spp.fuse.bias", (bott,), "zeros"))
    src = g._add(Node("spp", "spp", (src,), dict(c=bott, bins=cfg.spp_bins, level=4), tuple(params), 4, "bottleneck"))

    cin = bott
    for i in range(3, -1, -1):
        width = widths[i]
        skip, skip_c = skips[i]
        up = g._add(Node(f"dec{i}.up", "upsample2x", (src,), dict(c=cin, level=i), (), i, "decoder"))
        cat = g._add(Node(f"dec{i}.cat", "concat", (skip, up), dict(c=skip_c + cin, level=i), (), i, "decoder"))
        g.skip_pairs.append(SkipPair(skip, cat, skip_c, i))
        src = g.conv(f"dec{i}.conv1", cat, skip_c + cin, width, 3, level=i, act="swish", stage=i, part="decoder")
        src = g.conv(f"dec{i}.conv2", src, width, width, 3, level=i, act="swish", stage=i, part="decoder")
        cin = width
    g.output = g.conv("head", src, widths[0], cfg.out_channels, 1, level=0, part="head")
    g._rng = None
    return g


UNET_WIDTHS = (64, 128, 256, 512, 1024)


def build_unet_baseline(
    config: Optional[ModelConfig] = None,
    widths: Sequence[int] = UNET_WIDTHS,
    seed: int = 0,
    allocate: bool = True,
) -> ModelGraph:
    """Reference U-Net: two 3x3 conv+ReLU per level, 2x2 max pooling, and
    up-convolution (nearest 2x up-sampling then a 2x2 conv halving channels)."""
    base = config or ModelConfig()
    cfg = replace(base, stage_widths=tuple(widths), blocks_per_stage=(0,) * 5)
    g = ModelGraph("unet", cfg)
    g._allocate = allocate
    g._rng = np.random.default_rng(seed)

    src, cin = "input", cfg.in_channels
    skips = []
    for i, width in enumerate(widths):
        if i > 0:
            src = g._add(Node(f"enc{i}.pool", "maxpool", (src,), dict(c=cin, level=i), (), i, "encoder"))
        src = g.conv(f"enc{i}.conv1", src, cin, width, 3, level=i, act="relu", stage=i, part="encoder")
        src = g.conv(f"enc{i}.conv2", src, width, width, 3, level=i, act="relu", stage=i, part="encoder")
        skips.append((src, width))
        cin = width

    for i in range(3, -1, -1):
        width = widths[i]
        skip, skip_c = skips[i]
        up = g._add(Node(f"dec{i}.up", "upsample2x", (src,), dict(c=cin, level=i), (), i, "decoder"))
        up = g.conv(f"dec{i}.upconv", up, cin, width, 2, level=i, padding=(0, 1, 0, 1), stage=i, part="decoder")
        cat = g._add(Node(f"dec{i}.cat", "concat", (skip, up), dict(c=skip_c + width, level=i), (), i, "decoder"))
        g.skip_pairs.append(SkipPair(skip, cat, skip_c, i))
        src = g.conv(f"dec{i}.conv1", cat, skip_c + width, width, 3, level=i, act="relu", stage=i, part="decoder")
        src = g.conv(f"dec{i}.conv2", src, width, width, 3, level=i, act="relu", stage=i, part="decoder")
        cin = width
    g.output = g.conv("head", src, widths[0], cfg.out_channels, 1, level=0, part="head")
    g._rng = None
    return g


def build(kind: str, config: Optional[ModelConfig] = None, seed: int = 0, allocate: bool = True) -> ModelGraph:
    if kind == "mfennet":
        return build_mfennet(config, seed, allocate)
    if kind == "unet":
        widths = config.stage_widths if config is not None else UNET_WIDTHS
        return build_unet_baseline(config, widths, seed=seed, allocate=allocate)
    raise ConfigError(f"unknown model kind {kind!r} (expected 'mfennet' or 'unet')")
