"""Dimension expansion: lift 2D pyramid features into aligned 3D voxel features.

A coronal feature (h, d, c) lacks the W axis and a sagittal feature (w, d, c)
lacks H. The feature is replicated along the missing axis and mixed by a
1x1x1 convolution. Because the convolution acts per voxel, it is applied to
the 2D feature before broadcasting, which gives the same result at a fraction
of the cost.
"""
from __future__ import annotations

from .diff import ops
from .diff.array import DiffArray, scope
from .params import ParamSpec

MISSING_AXIS = {"cor": 1, "sag": 0}


def bridge_specs(channels: list[int], prefix: str = "bridge") -> dict[str, ParamSpec]:
    """1x1x1 conv weights (c -> c, with bias) for each pyramid level and view."""
    specs: dict[str, ParamSpec] = {}
    for k, c in enumerate(channels):
        for view in ("cor", "sag"):
            specs[f"{prefix}.level{k}.{view}.w"] = ParamSpec((1, 1, 1, c, c), "conv")
            specs[f"{prefix}.level{k}.{view}.b"] = ParamSpec((c,), "zeros")
    return specs


def _expand(feat: DiffArray, w: DiffArray, b: DiffArray, axis: int, size: int) -> DiffArray:
    if feat.ndim != 3:
        raise ValueError(f"expected a (rows, cols, channels) feature, got shape {feat.shape}")
    c = feat.shape[-1]
    if w.shape != (1, 1, 1, c, c):
        raise ValueError(f"bridge kernel {w.shape} does not match {c} channels")
    mixed = ops.linear(feat, ops.reshape(w, (c, c)), b)
    return ops.broadcast_along_axis(mixed, axis, size)


def expand_coronal(feat: DiffArray, target_w: int, w: DiffArray, b: DiffArray) -> DiffArray:
    """(h, d, c) -> (h, target_w, d, c)."""
    if target_w < 1:
        raise ValueError("target_w must be positive")
    return _expand(feat, w, b, MISSING_AXIS["cor"], target_w)


def expand_sagittal(feat: DiffArray, target_h: int, w: DiffArray, b: DiffArray) -> DiffArray:
    """(w, d, c) -> (target_h, w, d, c)."""
    if target_h < 1:
        raise ValueError("target_h must be positive")
    return _expand(feat, w, b, MISSING_AXIS["sag"], target_h)


def bridge_level(feat: DiffArray, view: str, level: int, target: tuple[int, int, int],
                 params: dict, prefix: str = "bridge") -> DiffArray:
    """Expand one pyramid level of one view to the 3D stage resolution ``target``.

    Raises ValueError when the 2D feature does not match the target on the
    axes it shares with the volume.
    """
    h, w, d = target
    key = f"{prefix}.level{level}.{view}"
    if view == "cor":
        if feat.shape[:2] != (h, d):
            raise ValueError(f"coronal level {level} feature {feat.shape[:2]} != stage dims {(h, d)}")
        fn, size = expand_coronal, w
    elif view == "sag":
        if feat.shape[:2] != (w, d):
            raise ValueError(f"sagittal level {level} feature {feat.shape[:2]} != stage dims {(w, d)}")
        fn, size = expand_sagittal, h
    else:
        raise ValueError(f"unknown view {view!r}")
    with scope(key):
        return fn(feat, size, params[f"{key}.w"], params[f"{key}.b"])
