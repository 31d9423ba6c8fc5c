"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module must agree with them
to floating-point rounding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xpad: np.ndarray, k: tuple[int, int, int], stride: int) -> np.ndarray:
    """Gather (kh, kw, kd, C) patches of a padded channels-last volume.

    Returns an array of shape (oh, ow, od, kh*kw*kd*C).
    """
    kh, kw, kd = k
    win = sliding_window_view(xpad, (kh, kw, kd), axis=(0, 1, 2))
    win = win[::stride, ::stride, ::stride]
    oh, ow, od, c = win.shape[:4]
    # (oh, ow, od, C, kh, kw, kd) -> (oh, ow, od, kh, kw, kd, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3))
    return cols.reshape(oh, ow, od, kh * kw * kd * c)


def col2im3d(cols: np.ndarray, padded_shape: tuple[int, int, int, int],
             k: tuple[int, int, int], stride: int) -> np.ndarray:
    """Scatter-add patches back onto a padded volume (adjoint of im2col3d)."""
    kh, kw, kd = k
    hp, wp, dp, c = padded_shape
    oh, ow, od = cols.shape[:3]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    patches = cols.reshape(oh, ow, od, kh, kw, kd, c)
    s = stride
    for a in range(kh):
        for b in range(kw):
            for e in range(kd):
                out[a:a + s * (oh - 1) + 1:s,
                    b:b + s * (ow - 1) + 1:s,
                    e:e + s * (od - 1) + 1:s] += patches[:, :, :, a, b, e]
    return out


def _trilinear(mu: np.ndarray, x: np.ndarray) -> np.ndarray:
    # x: (..., 3) continuous voxel-index coordinates, voxel centers at integers
    shape = np.array(mu.shape)
    base = np.floor(x)
    frac = x - base
    base = base.astype(np.int64)
    total = np.zeros(x.shape[:-1], dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=-1)
        inside = np.all((idx >= 0) & (idx < shape), axis=-1)
        idc = np.where(inside[..., None], idx, 0)
        val = mu[idc[..., 0], idc[..., 1], idc[..., 2]]
        total += np.where(inside, w * val, 0.0)
    return total


def integrate_rays(mu: np.ndarray, spacing: np.ndarray, origins: np.ndarray,
                   direction: np.ndarray, step: float, n_steps: int) -> np.ndarray:
    """Midpoint-rule line integrals of a trilinearly interpolated field.

    ``origins`` has shape (R, C, 3) in millimetres; sample ``k`` of each ray
    sits at ``origin + direction * (k + 0.5) * step``. Outside the volume the
    field is zero.
    """
    rows, cols = origins.shape[:2]
    out = np.zeros((rows, cols), dtype=np.float64)
    t = (np.arange(n_steps) + 0.5) * step
    inv = 1.0 / np.asarray(spacing, dtype=np.float64)
    for r in range(rows):
        pts = origins[r][:, None, :] + t[None, :, None] * direction[None, None, :]
        x = pts * inv - 0.5
        out[r] = _trilinear(mu, x).sum(axis=1) * step
    return out
