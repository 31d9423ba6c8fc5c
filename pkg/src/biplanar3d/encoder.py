"""Hierarchical shifted-window attention encoder for projection images.

The N views of one projection group enter as N input channels of a single
patch embedding. Four stages of windowed attention blocks follow, with a
2x2 patch merge between stages; the output of each stage forms one level of
the feature pyramid (scales 1/P .. 1/8P, channels C .. 8C).

Token grids that are not multiples of the window are zero-padded and the
padded cells are masked out as attention keys. Along an axis no longer than
the window, the window shrinks to the grid and that axis is not shifted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .diff import ops
from .diff.array import DiffArray, scope
from .params import ParamSpec, linear_specs, norm_specs

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 18, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 7
    mlp_ratio: float = 4.0
    patch: int = 4
    num_classes: int = 1
    volume_dims: tuple[int, int, int] = (128, 128, 160)
    n_views: int = 1
    tie_encoders: bool = True
    window_mode: str = "pad"  # or "resize"
    decoder_base: int | None = None  # stage-0 width of the 3D path; None -> embed_dim // 2
    conv_skip: bool = True
    transformer_skip: bool = True
    cross_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "volume_dims", tuple(self.volume_dims))
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads must both have four entries")
        for k, h in enumerate(self.heads):
            if (self.embed_dim * 2 ** k) % h:
                raise ValueError(f"stage {k} width {self.embed_dim * 2 ** k} not divisible by {h} heads")
        if self.window < 1 or self.patch < 1 or self.n_views < 1 or self.num_classes < 1:
            raise ValueError("window, patch, n_views and num_classes must be positive")
        if self.window_mode not in ("pad", "resize"):
            raise ValueError(f"unknown window_mode {self.window_mode!r}")
        if self.decoder_base is not None and self.decoder_base < 1:
            raise ValueError("decoder_base must be positive")

    @property
    def decoder_channels(self) -> int:
        return self.decoder_base if self.decoder_base is not None else max(1, self.embed_dim // 2)

    def stage_dims(self, rows: int, cols: int) -> list[tuple[int, int, int]]:
        """(rows, cols, channels) of each pyramid level for an input image size."""
        r, c = math.ceil(rows / self.patch), math.ceil(cols / self.patch)
        out = []
        for k in range(4):
            out.append((r, c, self.embed_dim * 2 ** k))
            r, c = math.ceil(r / 2), math.ceil(c / 2)
        return out


PRESETS = {
    "tiny": ModelConfig(32, (2, 2, 6, 2), (1, 2, 4, 8), volume_dims=(96, 96, 128)),
    "small": ModelConfig(64, (2, 2, 6, 2), (2, 4, 8, 16), volume_dims=(128, 128, 160)),
    "base": ModelConfig(96, (2, 2, 18, 2), (3, 6, 12, 24), volume_dims=(128, 128, 160)),
    "large": ModelConfig(128, (2, 2, 18, 2), (4, 8, 16, 32), volume_dims=(128, 128, 160)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


# -- parameters ----------------------------------------------------------------

def encoder_specs(cfg: ModelConfig, prefix: str = "encoder") -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    C, M = cfg.embed_dim, cfg.window
    linear_specs(specs, f"{prefix}.patch_embed.proj", cfg.patch * cfg.patch * cfg.n_views, C)
    norm_specs(specs, f"{prefix}.patch_embed.norm", C)
    for k, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        dim = C * 2 ** k
        hidden = int(dim * cfg.mlp_ratio)
        for l in range(depth):
            b = f"{prefix}.stage{k}.block{l}"
            norm_specs(specs, f"{b}.norm1", dim)
            linear_specs(specs, f"{b}.attn.qkv", dim, 3 * dim)
            specs[f"{b}.attn.rel_bias"] = ParamSpec(((2 * M - 1) ** 2, heads), "trunc")
            linear_specs(specs, f"{b}.attn.proj", dim, dim)
            norm_specs(specs, f"{b}.norm2", dim)
            linear_specs(specs, f"{b}.mlp.fc1", dim, hidden)
            linear_specs(specs, f"{b}.mlp.fc2", hidden, dim)
        if k < 3:
            norm_specs(specs, f"{prefix}.stage{k}.merge.norm", 4 * dim)
            linear_specs(specs, f"{prefix}.stage{k}.merge.reduce", 4 * dim, 2 * dim, bias=False)
    return specs


# -- patch embedding -----------------------------------------------------------

def patch_embed(img: np.ndarray, params: dict, prefix: str, patch: int) -> DiffArray:
    """Split an (rows, cols, N) image into PxP patches and project each to C channels."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    rows, cols, n = img.shape
    pr, pc = -rows % patch, -cols % patch
    img = np.pad(img, ((0, pr), (0, pc), (0, 0)))
    gr, gc = img.shape[0] // patch, img.shape[1] // patch
    patches = img.reshape(gr, patch, gc, patch, n).transpose(0, 2, 1, 3, 4)
    patches = patches.reshape(gr, gc, patch * patch * n)
    tokens = ops.linear(patches, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    return ops.layer_norm(tokens, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])


# -- windows -------------------------------------------------------------------

@dataclass(frozen=True)
class WindowLayout:
    rows: int
    cols: int
    win: tuple[int, int]
    shift: tuple[int, int]
    padded: tuple[int, int]

    @property
    def n_windows(self) -> int:
        return (self.padded[0] // self.win[0]) * (self.padded[1] // self.win[1])

    @property
    def pad(self) -> tuple[int, int]:
        return self.padded[0] - self.rows, self.padded[1] - self.cols


def window_layout(rows: int, cols: int, M: int) -> WindowLayout:
    win, shift, padded = [], [], []
    for n in (rows, cols):
        w = min(M, n)
        win.append(w)
        shift.append(w // 2 if n > M else 0)
        padded.append(math.ceil(n / w) * w)
    return WindowLayout(rows, cols, tuple(win), tuple(shift), tuple(padded))


def window_partition(x: DiffArray, win: tuple[int, int]) -> DiffArray:
    """(Hp, Wp, C) grid -> (n_windows, win_r * win_c, C), windows in row-major order."""
    hp, wp, c = x.shape
    a, b = win
    if hp % a or wp % b:
        raise ValueError(f"grid {hp}x{wp} is not a multiple of window {a}x{b}")
    x = ops.reshape(x, (hp // a, a, wp // b, b, c))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (-1, a * b, c))


def window_reverse(windows: DiffArray, win: tuple[int, int], padded: tuple[int, int]) -> DiffArray:
    a, b = win
    hp, wp = padded
    c = windows.shape[-1]
    x = ops.reshape(windows, (hp // a, wp // b, a, b, c))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (hp, wp, c))


def cyclic_shift(x: DiffArray, shift: tuple[int, int]) -> DiffArray:
    """Roll the grid up/left by ``shift``; the negative shift undoes it."""
    if shift == (0, 0):
        return x
    return ops.roll(x, (-shift[0], -shift[1]), (0, 1))


@lru_cache(maxsize=64)
def relative_position_index(win: tuple[int, int], M: int) -> np.ndarray:
    """(T, T) index into the (2M-1)^2 bias table for query/key offsets."""
    coords = np.stack(np.meshgrid(np.arange(win[0]), np.arange(win[1]), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + M - 1) * (2 * M - 1) + (rel[1] + M - 1)


def _regions(n_pad: int, win: int, shift: int) -> np.ndarray:
    lab = np.zeros(n_pad, dtype=np.int64)
    if shift:
        lab[n_pad - win:n_pad - shift] = 1
        lab[n_pad - shift:] = 2
    return lab


@lru_cache(maxsize=64)
def attention_mask(layout: WindowLayout, shifted: bool) -> np.ndarray | None:
    """Additive (n_windows, T, T) mask: 0 where attention is allowed, -1e9 elsewhere.

    Keys are blocked when they are padding cells or, in shifted windows, when
    they come from a different side of a wrap-around seam than the query.
    """
    (hp, wp), (a, b) = layout.padded, layout.win
    shift = layout.shift if shifted else (0, 0)
    if layout.pad == (0, 0) and shift == (0, 0):
        return None
    rows = _regions(hp, a, shift[0])
    cols = _regions(wp, b, shift[1])
    region = rows[:, None] * 3 + cols[None, :]
    is_pad = np.zeros((hp, wp), dtype=bool)
    is_pad[layout.rows:, :] = True
    is_pad[:, layout.cols:] = True
    is_pad = np.roll(is_pad, (-shift[0], -shift[1]), (0, 1))

    def part(arr):
        return arr.reshape(hp // a, a, wp // b, b).transpose(0, 2, 1, 3).reshape(-1, a * b)

    reg_w, pad_w = part(region), part(is_pad)
    blocked = (reg_w[:, :, None] != reg_w[:, None, :]) | pad_w[:, None, :]
    return np.where(blocked, MASK_VALUE, 0.0)


def window_attention(windows: DiffArray, params: dict, prefix: str, heads: int,
                     rel_index: np.ndarray, mask: np.ndarray | None) -> DiffArray:
    """Multi-head attention inside each window with a learned relative-position bias."""
    nw, t, c = windows.shape
    if c % heads:
        raise ValueError(f"channel count {c} not divisible by {heads} heads")
    hd = c // heads
    qkv = ops.linear(windows, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (nw, t, 3, heads, hd)), (2, 0, 3, 1, 4))
    q = ops.scale(qkv[0], hd ** -0.5)
    k, v = qkv[1], qkv[2]
    logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    bias = ops.take(params[f"{prefix}.rel_bias"], rel_index)        # (T, T, heads)
    logits = ops.add(logits, ops.transpose(bias, (2, 0, 1)))
    if mask is not None:
        logits = ops.add(logits, mask[:, None].astype(logits.dtype))
    attn = ops.softmax(logits, axis=-1)
    out = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
    out = ops.reshape(out, (nw, t, c))
    return ops.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def _resize_index(n: int, m: int) -> np.ndarray:
    return np.minimum(((2 * np.arange(m) + 1) * n) // (2 * m), n - 1)


def _windowed_msa(y: DiffArray, params: dict, prefix: str, heads: int, M: int, shifted: bool,
                  mode: str) -> DiffArray:
    rows, cols, c = y.shape
    if mode == "resize":
        lay0 = window_layout(rows, cols, M)
        tr = max(lay0.win[0], round(rows / lay0.win[0]) * lay0.win[0])
        tc = max(lay0.win[1], round(cols / lay0.win[1]) * lay0.win[1])
        fwd = (_resize_index(rows, tr), _resize_index(cols, tc))
        y = ops.getitem(y, np.ix_(*fwd))
        lay = window_layout(tr, tc, M)
    else:
        lay = window_layout(rows, cols, M)
        y = ops.pad(y, [(0, lay.pad[0]), (0, lay.pad[1]), (0, 0)])
    shift = lay.shift if shifted else (0, 0)
    y = cyclic_shift(y, shift)
    win = window_partition(y, lay.win)
    out = window_attention(win, params, prefix, heads, relative_position_index(lay.win, M),
                           attention_mask(lay, shifted))
    y = window_reverse(out, lay.win, lay.padded)
    y = cyclic_shift(y, (-shift[0], -shift[1]))
    if mode == "resize":
        return ops.getitem(y, np.ix_(_resize_index(lay.rows, rows), _resize_index(lay.cols, cols)))
    return ops.getitem(y, (slice(0, rows), slice(0, cols)))


def swin_block(x: DiffArray, params: dict, prefix: str, heads: int, M: int, shifted: bool,
               mode: str = "pad") -> DiffArray:
    """One pre-norm block: windowed (or shifted-window) MSA and an MLP, each residual."""
    y = ops.layer_norm(x, params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"])
    x = ops.add(x, _windowed_msa(y, params, f"{prefix}.attn", heads, M, shifted, mode))
    y = ops.layer_norm(x, params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"])
    y = ops.gelu(ops.linear(y, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"]))
    y = ops.linear(y, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
    return ops.add(x, y)


def swin_block_pair(x: DiffArray, params: dict, prefixes: tuple[str, str], heads: int, M: int,
                    mode: str = "pad") -> DiffArray:
    """W-MSA block followed by its SW-MSA successor."""
    x = swin_block(x, params, prefixes[0], heads, M, False, mode)
    return swin_block(x, params, prefixes[1], heads, M, True, mode)


def patch_merge(x: DiffArray, params: dict, prefix: str) -> DiffArray:
    """Concatenate 2x2 neighbours (odd sizes zero-padded), normalise, project 4C -> 2C."""
    h, w, _ = x.shape
    x = ops.pad(x, [(0, h % 2), (0, w % 2), (0, 0)])
    parts = [x[0::2, 0::2], x[1::2, 0::2], x[0::2, 1::2], x[1::2, 1::2]]
    x = ops.concat(parts, axis=-1)
    x = ops.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    return ops.matmul(x, params[f"{prefix}.reduce.w"])


def encode(images: np.ndarray, params: dict, cfg: ModelConfig,
           prefix: str = "encoder") -> list[DiffArray]:
    """Feature pyramid (4 levels) for one projection group given as (rows, cols, N)."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[:, :, None]
    if images.shape[2] != cfg.n_views:
        raise ValueError(f"expected {cfg.n_views} views, got {images.shape[2]}")
    with scope(prefix):
        x = patch_embed(images, params, f"{prefix}.patch_embed", cfg.patch)
        levels = []
        for k, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            for l in range(depth):
                x = swin_block(x, params, f"{prefix}.stage{k}.block{l}", heads, cfg.window,
                               shifted=l % 2 == 1, mode=cfg.window_mode)
            levels.append(x)
            if k < 3:
                x = patch_merge(x, params, f"{prefix}.stage{k}.merge")
    return levels
