"""Hierarchical feature enhancer.

Pipeline for an image ``I`` (3 x H x W, optionally batched):

1. build_scales: ``I_q`` at H/s1 and ``I_o`` at H/s2 (default s1=4, s2=8).
2. fen_forward on each of ``I``, ``I_q``, ``I_o`` -> ``F``, ``F_q``, ``F_o``
   with C feature channels at unchanged resolution.
3. aggregate_high: fuse ``F`` and ``F_q`` on the H/s2 grid, by default with
   blockwise scale-aware attention (SAFA).
4. fuse: merge the aggregate with ``F_o``, bilinearly upsample to H x W and
   optionally project to RGB.

Parameters live in a flat ``dict[str, Tensor]`` keyed ``"<layer>.weight"`` /
``"<layer>.bias"``; :func:`layer_specs` is the single source of truth for
which layers exist under a given config.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError, Tensor

Params = dict[str, Tensor]

DOWNSAMPLE_METHODS = ("conv", "maxpool", "adaptive_avg_pool", "interpolation")
AGGREGATIONS = ("safa", "skip", "average")
VALUE_SOURCES = ("k", "q", "mean")
PROJECTIONS = ("none", "to_rgb")
FEN_LAYERS = ("stem", "l1", "l2", "l3", "l4", "l5", "l6")


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class EnhancerConfig:
    scale_pair: tuple[int, int] = (4, 8)
    num_blocks: int = 8
    feat_channels: int = 32
    downsample_method: str = "conv"
    aggregation_high: str = "safa"
    aggregation_low: str = "skip"
    value_source: str = "k"
    attention_scaling: bool = False
    output_projection: str = "to_rgb"
    share_fen_across_scales: bool = True

    def __post_init__(self):
        s1, s2 = (int(v) for v in self.scale_pair)
        object.__setattr__(self, "scale_pair", (s1, s2))
        if not (_is_pow2(s1) and _is_pow2(s2) and s1 < s2):
            raise ValueError(f"scale_pair must be powers of two with s1 < s2, got {self.scale_pair}")
        if s1 == 1:
            raise ValueError("s1 must be at least 2")
        if self.feat_channels < 1 or self.num_blocks < 1:
            raise ValueError("feat_channels and num_blocks must be positive")
        if self.feat_channels % self.num_blocks:
            raise ValueError(
                f"feat_channels={self.feat_channels} is not divisible by num_blocks={self.num_blocks}")
        for name, allowed in (("downsample_method", DOWNSAMPLE_METHODS),
                              ("aggregation_high", AGGREGATIONS),
                              ("aggregation_low", ("skip", "safa", "average")),
                              ("value_source", VALUE_SOURCES),
                              ("output_projection", PROJECTIONS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def block_width(self) -> int:
        return self.feat_channels // self.num_blocks

    @property
    def coarse_stride(self) -> int:
        return self.scale_pair[1] // self.scale_pair[0]

    def out_channels(self) -> int:
        return 3 if self.output_projection == "to_rgb" else self.feat_channels

    def replace(self, **changes) -> "EnhancerConfig":
        d = asdict(self)
        d.update(changes)
        return EnhancerConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_pair"] = list(self.scale_pair)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EnhancerConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_pair" in d:
            d["scale_pair"] = tuple(d["scale_pair"])
        return cls(**d)


def fen_specs(channels: int) -> dict[str, ConvSpec]:
    c = channels
    return {
        "stem": ConvSpec(c, 3, 3),
        "l1": ConvSpec(c, c, 3), "l2": ConvSpec(c, c, 3), "l3": ConvSpec(c, c, 3),
        "l4": ConvSpec(c, 2 * c, 3), "l5": ConvSpec(c, 2 * c, 3), "l6": ConvSpec(c, 2 * c, 3),
    }


def fen_prefixes(cfg: EnhancerConfig) -> tuple[str, str, str]:
    """Parameter prefixes of the FEN applied to (I, I_q, I_o)."""
    if cfg.share_fen_across_scales:
        return ("fen", "fen", "fen")
    return ("fen_full", "fen_q", "fen_o")


def layer_specs(cfg: EnhancerConfig, include_projection: bool = True) -> dict[str, ConvSpec]:
    s1, cs = cfg.scale_pair[0], cfg.coarse_stride
    c = cfg.feat_channels
    specs: dict[str, ConvSpec] = {}
    if cfg.downsample_method == "conv":
        specs["down.q"] = ConvSpec(3, 3, 7, s1)
        specs["down.o"] = ConvSpec(3, 3, 3, cs)
    for prefix in dict.fromkeys(fen_prefixes(cfg)):
        for name, spec in fen_specs(c).items():
            specs[f"{prefix}.{name}"] = spec
    # q_path: F -> coarse grid in two steps; k_path: F_q -> coarse grid
    specs["safa.q1"] = ConvSpec(c, c, 7, s1)
    specs["safa.q2"] = ConvSpec(c, c, 3, cs)
    specs["safa.k"] = ConvSpec(c, c, 3, cs)
    if include_projection and cfg.output_projection == "to_rgb":
        specs["proj"] = ConvSpec(3, c, 1)
    return specs


def init_params(cfg: EnhancerConfig, rng: np.random.Generator) -> Params:
    """He-normal weights, zero biases, in :func:`layer_specs` order."""
    params: Params = {}
    for name, spec in layer_specs(cfg).items():
        fan_in = spec.in_channels * spec.kernel_size ** 2
        w = rng.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True,
                                        name=f"{name}.bias")
    return params


def param_count(cfg: EnhancerConfig, include_projection: bool = False) -> int:
    """Closed-form count of learnable scalars.

    The 1x1 RGB projection is excluded by default so the figure describes the
    enhancer core (downsampling, FEN and attention projections).
    """
    return sum(s.num_params for s in layer_specs(cfg, include_projection).values())


def _conv(x: Tensor, params: Params, name: str, spec: ConvSpec) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], spec)


def _spatial(x: Tensor) -> tuple[int, int]:
    return x.shape[-2], x.shape[-1]


def check_input(image: Tensor, cfg: EnhancerConfig) -> None:
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"expected a 3xHxW (or Bx3xHxW) image, got {image.shape}")
    h, w = _spatial(image)
    s2 = cfg.scale_pair[1]
    if h % s2 or w % s2:
        raise ShapeError(f"image size {h}x{w} is not divisible by the coarsest scale factor {s2}")


def build_scales(image: Tensor, cfg: EnhancerConfig, params: Params) -> tuple[Tensor, Tensor, Tensor]:
    check_input(image, cfg)
    s1, s2 = cfg.scale_pair
    h, w = _spatial(image)
    method = cfg.downsample_method
    if method == "conv":
        specs = layer_specs(cfg)
        i_q = _conv(image, params, "down.q", specs["down.q"])
        i_o = _conv(i_q, params, "down.o", specs["down.o"])
    elif method == "maxpool":
        i_q = T.max_pool2d(image, s1)
        i_o = T.max_pool2d(i_q, cfg.coarse_stride)
    elif method == "adaptive_avg_pool":
        i_q = T.adaptive_avg_pool2d(image, h // s1, w // s1)
        i_o = T.adaptive_avg_pool2d(i_q, h // s2, w // s2)
    else:
        i_q = T.bilinear_resize(image, h // s1, w // s1)
        i_o = T.bilinear_resize(i_q, h // s2, w // s2)
    return image, i_q, i_o


def fen_forward(x: Tensor, params: Params, prefix: str = "fen", channels: int | None = None) -> Tensor:
    """Seven 3x3 convolutions with ReLU and U-shaped skip concatenation."""
    if channels is None:
        channels = params[f"{prefix}.stem.weight"].shape[0]
    specs = fen_specs(channels)
    if x.shape[-3] != 3:
        raise ShapeError(f"FEN expects 3 input channels, got {x.shape[-3]}")

    def layer(name, inp):
        return T.relu(_conv(inp, params, f"{prefix}.{name}", specs[name]))

    x0 = layer("stem", x)
    x1 = layer("l1", x0)
    x2 = layer("l2", x1)
    x3 = layer("l3", x2)
    x4 = layer("l4", T.concat_channels(x3, x2))
    x5 = layer("l5", T.concat_channels(x4, x1))
    return layer("l6", T.concat_channels(x5, x0))


def q_path(f: Tensor, params: Params, cfg: EnhancerConfig) -> Tensor:
    specs = layer_specs(cfg)
    return _conv(_conv(f, params, "safa.q1", specs["safa.q1"]), params, "safa.q2", specs["safa.q2"])


def k_path(f_q: Tensor, params: Params, cfg: EnhancerConfig) -> Tensor:
    return _conv(f_q, params, "safa.k", layer_specs(cfg)["safa.k"])


def safa_project(f: Tensor, f_q: Tensor, params: Params, cfg: EnhancerConfig) -> tuple[Tensor, Tensor]:
    q, k = q_path(f, params, cfg), k_path(f_q, params, cfg)
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} grids disagree; check scale_pair")
    return q, k


def block_attention(q: Tensor, k: Tensor, value_source: str = "k", scaling: bool = False,
                    weights_out: list | None = None) -> Tensor:
    """Dot-product attention over L tokens of width d: softmax(Q K^T) V.

    ``q`` and ``k`` are (..., L, d).  The value matrix is ``k``, ``q`` or their
    mean.  When ``weights_out`` is a list the (…, L, L) attention matrix is
    appended to it.
    """
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("block_attention: zero block width")
    if q.shape != k.shape:
        raise ShapeError(f"block_attention: query {q.shape} and key {k.shape} differ")
    scores = T.matmul(q, T.transpose_last(k))
    if scaling:
        scores = T.scale(scores, 1.0 / math.sqrt(d))
    attn = T.softmax_last_dim(scores)
    if weights_out is not None:
        weights_out.append(attn.data)
    if value_source == "k":
        v = k
    elif value_source == "q":
        v = q
    elif value_source == "mean":
        v = T.scale(T.add(q, k), 0.5)
    else:
        raise ValueError(f"unknown value_source {value_source!r}")
    return T.matmul(attn, v)


def _tokens(x: Tensor) -> Tensor:
    # (..., d, h, w) -> (..., L, d)
    *lead, d, h, w = x.shape
    return T.transpose_last(T.reshape(x, (*lead, d, h * w)))


def _grid(tokens: Tensor, h: int, w: int) -> Tensor:
    *lead, _, d = tokens.shape
    return T.reshape(T.transpose_last(tokens), (*lead, d, h, w))


def attend_blocks(q: Tensor, k: Tensor, num_blocks: int, value_source: str = "k",
                  scaling: bool = False, weights_out: list | None = None) -> Tensor:
    """Split channels into ``num_blocks`` groups, attend within each, re-concatenate."""
    if q.shape != k.shape:
        raise ShapeError(f"attend_blocks: {q.shape} vs {k.shape}")
    c = q.shape[-3]
    if c % num_blocks:
        raise ShapeError(f"{c} channels cannot be split into {num_blocks} blocks")
    d = c // num_blocks
    h, w = _spatial(q)
    out = None
    for n in range(num_blocks):
        qn = _tokens(T.slice_channels(q, n * d, (n + 1) * d))
        kn = _tokens(T.slice_channels(k, n * d, (n + 1) * d))
        block = _grid(block_attention(qn, kn, value_source, scaling, weights_out), h, w)
        out = block if out is None else T.concat_channels(out, block)
    return out


def safa_forward(f: Tensor, f_q: Tensor, params: Params, cfg: EnhancerConfig,
                 weights_out: list | None = None) -> Tensor:
    q, k = safa_project(f, f_q, params, cfg)
    return attend_blocks(q, k, cfg.num_blocks, cfg.value_source, cfg.attention_scaling, weights_out)


def aggregate_high(f: Tensor, f_q: Tensor, params: Params, cfg: EnhancerConfig,
                   weights_out: list | None = None) -> Tensor:
    if cfg.aggregation_high == "safa":
        return safa_forward(f, f_q, params, cfg, weights_out)
    a, b = safa_project(f, f_q, params, cfg)
    total = T.add(a, b)
    return total if cfg.aggregation_high == "skip" else T.scale(total, 0.5)


def fuse(agg: Tensor, f_o: Tensor, params: Params, cfg: EnhancerConfig, out_hw: tuple[int, int],
         weights_out: list | None = None) -> Tensor:
    if agg.shape != f_o.shape:
        raise ShapeError(f"fuse: aggregate {agg.shape} and octa features {f_o.shape} differ")
    h, w = out_hw
    if cfg.aggregation_low == "safa":
        mixed = attend_blocks(agg, f_o, cfg.num_blocks, cfg.value_source,
                              cfg.attention_scaling, weights_out)
        e = T.bilinear_upsample(mixed, h, w)
    else:
        e = T.add(T.bilinear_upsample(agg, h, w), T.bilinear_upsample(f_o, h, w))
        if cfg.aggregation_low == "average":
            e = T.scale(e, 0.5)
    if cfg.output_projection == "to_rgb":
        e = _conv(e, params, "proj", layer_specs(cfg)["proj"])
    return e


def enhance(image: Tensor, params: Params, cfg: EnhancerConfig, stages: dict | None = None,
            weights_out: list | None = None) -> Tensor:
    """Full enhancer forward pass.  ``stages``, when given, is filled with intermediates."""
    i, i_q, i_o = build_scales(image, cfg, params)
    p_full, p_q, p_o = fen_prefixes(cfg)
    c = cfg.feat_channels
    f = fen_forward(i, params, p_full, c)
    f_q = fen_forward(i_q, params, p_q, c)
    f_o = fen_forward(i_o, params, p_o, c)
    agg = aggregate_high(f, f_q, params, cfg, weights_out)
    e = fuse(agg, f_o, params, cfg, _spatial(image), weights_out)
    if stages is not None:
        stages.update(I=i, I_q=i_q, I_o=i_o, F=f, F_q=f_q, F_o=f_o, F_h=agg, E=e)
    return e
