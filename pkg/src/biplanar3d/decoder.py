"""Dual-stream 3D U-shaped decoder with a cross-view attention bottleneck.

Both streams (coronal and sagittal) run the same weights. Stage ``i`` works at
resolution ``ceil(n / 2**i)`` per axis, i = 0..5, which equals ``n / 2**i``
whenever the volume dims are divisible by 32. Stage 0 reads the projection
images broadcast along their missing axis; each later stage halves the
resolution with a strided residual block and, where a bridged 2D feature
exists (stages 2..5), concatenates it and mixes with a 1x1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diff import ops
from .diff.array import DiffArray, scope
from .params import ParamSpec, linear_specs, norm_specs

N_STAGES = 6
FIRST_BRIDGED_STAGE = 2
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class DecoderConfig:
    base_channels: int
    xattn_heads: int
    num_classes: int
    in_channels: int = 1
    conv_skip: bool = True
    transformer_skip: bool = True
    cross_attention: bool = True
    bridge_widths: tuple[int, ...] = ()  # channels of the bridged feature at stages 2..5

    def __post_init__(self):
        object.__setattr__(self, "bridge_widths", tuple(self.bridge_widths))
        if self.transformer_skip and len(self.bridge_widths) != N_STAGES - FIRST_BRIDGED_STAGE:
            raise ValueError("bridge_widths needs one entry per bridged stage")
        if self.channels(N_STAGES - 1) % self.xattn_heads:
            raise ValueError(f"bottleneck width {self.channels(N_STAGES - 1)} not divisible by "
                             f"{self.xattn_heads} heads")

    def channels(self, i: int) -> int:
        return self.base_channels * 2 ** i

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1


def stage_dims(dims: tuple[int, int, int], i: int) -> tuple[int, int, int]:
    """Resolution of decoder stage ``i`` for a volume of ``dims``."""
    return tuple(math.ceil(n / 2 ** i) for n in dims)


# -- parameters ----------------------------------------------------------------

def _conv_spec(specs, name, k, ci, co):
    specs[name] = ParamSpec((k, k, k, ci, co), "conv")


def resblock_specs(specs: dict, prefix: str, ci: int, co: int, stride: int) -> None:
    _conv_spec(specs, f"{prefix}.conv1", 3, ci, co)
    norm_specs(specs, f"{prefix}.norm1", co)
    _conv_spec(specs, f"{prefix}.conv2", 3, co, co)
    norm_specs(specs, f"{prefix}.norm2", co)
    if ci != co or stride != 1:
        _conv_spec(specs, f"{prefix}.shortcut", 1, ci, co)
        norm_specs(specs, f"{prefix}.norm3", co)


def decoder_specs(dc: DecoderConfig, prefix: str = "decoder3d") -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    for i in range(N_STAGES):
        ci = dc.in_channels if i == 0 else dc.channels(i - 1)
        resblock_specs(specs, f"{prefix}.stage{i}.down", ci, dc.channels(i), 1 if i == 0 else 2)
        if dc.transformer_skip and i >= FIRST_BRIDGED_STAGE:
            c = dc.channels(i)
            cb = dc.bridge_widths[i - FIRST_BRIDGED_STAGE]
            _conv_spec(specs, f"{prefix}.stage{i}.fuse.w", 1, c + cb, c)
            specs[f"{prefix}.stage{i}.fuse.b"] = ParamSpec((c,), "zeros")
    if dc.cross_attention:
        c = dc.channels(N_STAGES - 1)
        for name in ("q", "k", "v", "o"):
            linear_specs(specs, f"{prefix}.xattn.{name}", c, c)
    for i in range(N_STAGES - 2, -1, -1):
        c = dc.channels(i)
        specs[f"{prefix}.stage{i}.up.w"] = ParamSpec((2, 2, 2, dc.channels(i + 1), c), "conv")
        specs[f"{prefix}.stage{i}.up.b"] = ParamSpec((c,), "zeros")
        resblock_specs(specs, f"{prefix}.stage{i}.merge", 2 * c, c, 1)
    _conv_spec(specs, f"{prefix}.head.w", 1, dc.channels(0), dc.out_channels)
    specs[f"{prefix}.head.b"] = ParamSpec((dc.out_channels,), "zeros")
    return specs


# -- blocks --------------------------------------------------------------------

def _norm(x: DiffArray, params: dict, name: str) -> DiffArray:
    """Instance norm; a single-voxel map has no statistics, so only the affine applies."""
    g, b = params[f"{name}.g"], params[f"{name}.b"]
    if int(np.prod(x.shape[:-1])) == 1:
        return ops.add(ops.mul(x, g), b)
    return ops.instance_norm(x, g, b)


def residual_block3d(x: DiffArray, params: dict, prefix: str, stride: int = 1) -> DiffArray:
    """conv3-norm-lrelu-conv3-norm plus a shortcut, then lrelu.

    The shortcut is a 1x1x1 conv + norm when a projection exists in ``params``
    (channel or stride change), otherwise the identity.
    """
    y = ops.conv3d(x, params[f"{prefix}.conv1"], stride=stride, padding=1)
    y = ops.leaky_relu(_norm(y, params, f"{prefix}.norm1"), LEAKY_SLOPE)
    y = ops.conv3d(y, params[f"{prefix}.conv2"], padding=1)
    y = _norm(y, params, f"{prefix}.norm2")
    if f"{prefix}.shortcut" in params:
        s = ops.conv3d(x, params[f"{prefix}.shortcut"], stride=stride)
        s = _norm(s, params, f"{prefix}.norm3")
    else:
        if stride != 1:
            raise ValueError(f"{prefix}: strided block needs a projection shortcut")
        s = x
    return ops.leaky_relu(ops.add(y, s), LEAKY_SLOPE)


def fuse(x: DiffArray, bridged: DiffArray, params: dict, prefix: str) -> DiffArray:
    if x.shape[:3] != bridged.shape[:3]:
        raise ValueError(f"{prefix}: bridged feature {bridged.shape[:3]} != stage {x.shape[:3]}")
    return ops.conv3d(ops.concat([x, bridged], axis=-1), params[f"{prefix}.w"], params[f"{prefix}.b"])


def contract(stem: DiffArray, bridged: dict[int, DiffArray], params: dict, dc: DecoderConfig,
             prefix: str = "decoder3d") -> list[DiffArray]:
    """Contracting path of one stream; returns the six stage features."""
    feats = []
    x = stem
    for i in range(N_STAGES):
        with scope(f"{prefix}.stage{i}"):
            x = residual_block3d(x, params, f"{prefix}.stage{i}.down", 1 if i == 0 else 2)
            if dc.transformer_skip and i in bridged:
                x = fuse(x, bridged[i], params, f"{prefix}.stage{i}.fuse")
        feats.append(x)
    return feats


def _attend(q_src: DiffArray, kv_src: DiffArray, params: dict, prefix: str,
            heads: int) -> DiffArray:
    n, c = q_src.shape
    hd = c // heads

    def proj(x, name):
        y = ops.linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])
        return ops.transpose(ops.reshape(y, (x.shape[0], heads, hd)), (1, 0, 2))

    q, k, v = proj(q_src, "q"), proj(kv_src, "k"), proj(kv_src, "v")
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), hd ** -0.5)
    out = ops.matmul(ops.softmax(logits, axis=-1), v)
    out = ops.reshape(ops.transpose(out, (1, 0, 2)), (n, c))
    return ops.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def cross_attend(cor: DiffArray, sag: DiffArray, params: dict, heads: int,
                 prefix: str = "decoder3d.xattn") -> tuple[DiffArray, DiffArray]:
    """Each stream's voxels query the other stream; results are added residually."""
    if cor.shape != sag.shape:
        raise ValueError(f"cross-attention streams differ in shape: {cor.shape} vs {sag.shape}")
    shape = cor.shape
    c = shape[-1]
    if c % heads:
        raise ValueError(f"channel count {c} not divisible by {heads} heads")
    with scope(prefix):
        a = ops.reshape(cor, (-1, c))
        b = ops.reshape(sag, (-1, c))
        new_a = ops.add(a, _attend(a, b, params, prefix, heads))
        new_b = ops.add(b, _attend(b, a, params, prefix, heads))
    return ops.reshape(new_a, shape), ops.reshape(new_b, shape)


def expand_path(feats: list[DiffArray], params: dict, dc: DecoderConfig,
                prefix: str = "decoder3d") -> DiffArray:
    """Upsample from the bottleneck, merging each stage's skip feature on the way."""
    x = feats[-1]
    for i in range(N_STAGES - 2, -1, -1):
        with scope(f"{prefix}.stage{i}"):
            up = ops.conv3d_transpose(x, params[f"{prefix}.stage{i}.up.w"],
                                      params[f"{prefix}.stage{i}.up.b"], stride=2)
            skip = feats[i]
            up = up[tuple(slice(0, n) for n in skip.shape[:3])]
            if not dc.conv_skip:
                skip = ops.constant(np.zeros(skip.shape, dtype=skip.dtype))
            x = residual_block3d(ops.concat([up, skip], axis=-1), params,
                                 f"{prefix}.stage{i}.merge")
    return x


def classify(x: DiffArray, params: dict, prefix: str = "decoder3d.head") -> DiffArray:
    """1x1x1 conv to num_classes + 1 channels and a per-voxel softmax."""
    with scope(prefix):
        logits = ops.conv3d(x, params[f"{prefix}.w"], params[f"{prefix}.b"])
        return ops.softmax(logits, axis=-1)
