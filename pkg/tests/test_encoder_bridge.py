from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biplanar3d import bridge, encoder
from biplanar3d.diff import ops, precision
from biplanar3d.encoder import (MASK_VALUE, PRESETS, ModelConfig, attention_mask, cyclic_shift,
                                encoder_specs, patch_merge, relative_position_index, window_layout,
                                window_partition, window_reverse)
from biplanar3d.params import count, materialize


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 7), st.integers(1, 4),
       st.integers(0, 2 ** 16))
def test_window_partition_round_trip(rows, cols, M, c, seed):
    lay = window_layout(rows, cols, M)
    x = np.random.default_rng(seed).standard_normal((*lay.padded, c)).astype(np.float32)
    w = window_partition(ops.constant(x), lay.win)
    assert w.shape == (lay.n_windows, lay.win[0] * lay.win[1], c)
    np.testing.assert_array_equal(window_reverse(w, lay.win, lay.padded).value, x)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 9), st.integers(0, 9))
def test_cyclic_shift_round_trip(rows, cols, a, b):
    x = np.arange(rows * cols, dtype=np.float32).reshape(rows, cols, 1)
    y = cyclic_shift(ops.constant(x), (a, b))
    np.testing.assert_array_equal(cyclic_shift(y, (-a, -b)).value, x)
    assert y.value[0, 0, 0] == x[a % rows, b % cols, 0]


def test_window_layout_pads_to_window_multiples():
    lay = window_layout(32, 40, 7)
    assert lay.padded == (35, 42) and lay.pad == (3, 2) and lay.n_windows == 30
    assert lay.shift == (3, 3)
    small = window_layout(5, 12, 7)
    assert small.win == (5, 7) and small.shift == (0, 3) and small.padded == (5, 14)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7))
def test_relative_position_index_matches_offsets(a, b, M):
    a, b = min(a, M), min(b, M)
    idx = relative_position_index((a, b), M)
    cells = [(i, j) for i in range(a) for j in range(b)]
    for p, (i1, j1) in enumerate(cells):
        for q, (i2, j2) in enumerate(cells):
            assert idx[p, q] == (i1 - i2 + M - 1) * (2 * M - 1) + (j1 - j2 + M - 1)
    assert idx.min() >= 0 and idx.max() < (2 * M - 1) ** 2


def test_relative_position_index_small_example():
    idx = relative_position_index((2, 2), 2)
    # offsets (0,0) sit at the table centre
    assert np.all(np.diag(idx) == 4)
    assert idx[0, 3] == 0 and idx[3, 0] == 8


def _mask_oracle(rows, cols, M, shifted):
    """Allowed iff the key is a real cell and no wrap-around separates it from the query."""
    lay = window_layout(rows, cols, M)
    (hp, wp), (a, b) = lay.padded, lay.win
    s = lay.shift if shifted else (0, 0)
    out = np.zeros((lay.n_windows, a * b, a * b))
    n = 0
    for wi in range(hp // a):
        for wj in range(wp // b):
            cells = [(wi * a + i, wj * b + j) for i in range(a) for j in range(b)]
            orig = [((i + s[0]) % hp, (j + s[1]) % wp) for i, j in cells]
            for p in range(len(cells)):
                for q in range(len(cells)):
                    same = all(cells[p][t] - cells[q][t] == orig[p][t] - orig[q][t] for t in (0, 1))
                    real = orig[q][0] < rows and orig[q][1] < cols
                    out[n, p, q] = 0.0 if same and real else MASK_VALUE
            n += 1
    return out


@given(st.integers(1, 11), st.integers(1, 11), st.integers(2, 5), st.booleans())
def test_attention_mask_matches_brute_force(rows, cols, M, shifted):
    mask = attention_mask(window_layout(rows, cols, M), shifted)
    oracle = _mask_oracle(rows, cols, M, shifted)
    if mask is None:
        assert np.all(oracle == 0)
    else:
        np.testing.assert_array_equal(mask, oracle)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 5))
def test_patch_merge_shape_law(h, w, c):
    specs = {}
    from biplanar3d.params import linear_specs, norm_specs
    norm_specs(specs, "m.norm", 4 * c)
    linear_specs(specs, "m.reduce", 4 * c, 2 * c, bias=False)
    params = materialize(specs)
    out = patch_merge(ops.constant(np.ones((h, w, c), np.float32)), params, "m")
    assert out.shape == (math.ceil(h / 2), math.ceil(w / 2), 2 * c)


@pytest.mark.parametrize("name", list(PRESETS))
def test_preset_pyramid_dims(name):
    cfg = PRESETS[name]
    H, W, D = cfg.volume_dims
    dims = cfg.stage_dims(H, D)
    for k, (r, c, ch) in enumerate(dims):
        assert (r, c, ch) == (H // (cfg.patch * 2 ** k), D // (cfg.patch * 2 ** k),
                              cfg.embed_dim * 2 ** k)


@pytest.mark.parametrize("mode", ["pad", "resize"])
def test_encoder_pyramid_shapes(toy_cfg, mode):
    cfg = ModelConfig(**{**toy_cfg.__dict__, "window_mode": mode})
    params = materialize(encoder_specs(cfg), 0)
    img = np.random.default_rng(0).random((18, 22, 1))
    levels = encoder.encode(img, params, cfg)
    assert [tuple(l.shape) for l in levels] == cfg.stage_dims(18, 22)


def test_encoder_rejects_wrong_view_count(toy_cfg):
    params = materialize(encoder_specs(toy_cfg), 0)
    with pytest.raises(ValueError):
        encoder.encode(np.zeros((16, 20, 2)), params, toy_cfg)


def test_padding_does_not_leak_into_real_tokens(toy_cfg):
    """Shifted-window attention on a padded grid equals a run where the pad holds other values."""
    params = materialize(encoder_specs(toy_cfg), 0)
    prefix = "encoder.stage0.block0"
    with precision(np.float64):
        y = np.random.default_rng(1).standard_normal((6, 5, 8))
        base = encoder._windowed_msa(ops.constant(y), params, f"{prefix}.attn", 1, 4, True, "pad")
        lay = window_layout(6, 5, 4)
        big = np.random.default_rng(2).standard_normal((*lay.padded, 8))
        big[:6, :5] = y
        # same computation with explicit non-zero padding and the mask
        win = window_partition(cyclic_shift(ops.constant(big), lay.shift), lay.win)
        out = encoder.window_attention(win, params, f"{prefix}.attn", 1,
                                       relative_position_index(lay.win, 4), attention_mask(lay, True))
        out = cyclic_shift(window_reverse(out, lay.win, lay.padded), (-lay.shift[0], -lay.shift[1]))
    np.testing.assert_allclose(base.value, out.value[:6, :5], atol=1e-12)


def test_doubling_embed_dim_quadruples_attention_weights():
    def attn_weights(c):
        specs = encoder_specs(ModelConfig(c, (2, 2, 2, 2), (1, 2, 4, 8)))
        return sum(int(np.prod(s.shape)) for n, s in specs.items()
                   if (".attn.qkv.w" in n or ".attn.proj.w" in n))
    assert attn_weights(64) == 4 * attn_weights(32)

    def attn_all(c):
        specs = encoder_specs(ModelConfig(c, (2, 2, 2, 2), (1, 2, 4, 8)))
        return count({n: s for n, s in specs.items() if ".attn." in n and "rel_bias" not in n})
    assert 3.8 < attn_all(64) / attn_all(32) < 4.0


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, (1, 1, 1, 1), (3, 1, 1, 1))
    with pytest.raises(ValueError):
        ModelConfig(window_mode="crop")
    with pytest.raises(ValueError):
        encoder.preset("huge")


# -- bridge ----------------------------------------------------------------------------

@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4),
       st.sampled_from(["cor", "sag"]), st.integers(0, 2 ** 16))
def test_bridge_equals_conv_on_broadcast_feature(h, w, d, c, view, seed):
    rng = np.random.default_rng(seed)
    params = {"bridge.level0.cor.w": ops.constant(rng.standard_normal((1, 1, 1, c, c))),
              "bridge.level0.cor.b": ops.constant(rng.standard_normal(c)),
              "bridge.level0.sag.w": ops.constant(rng.standard_normal((1, 1, 1, c, c))),
              "bridge.level0.sag.b": ops.constant(rng.standard_normal(c))}
    with precision(np.float64):
        if view == "cor":
            feat = rng.standard_normal((h, d, c))
            vol = np.broadcast_to(feat[:, None], (h, w, d, c))
        else:
            feat = rng.standard_normal((w, d, c))
            vol = np.broadcast_to(feat[None], (h, w, d, c))
        out = bridge.bridge_level(ops.constant(feat), view, 0, (h, w, d), params)
        ref = ops.conv3d(ops.constant(np.ascontiguousarray(vol)), params[f"bridge.level0.{view}.w"],
                         params[f"bridge.level0.{view}.b"])
    assert out.shape == (h, w, d, c)
    np.testing.assert_allclose(out.value, ref.value, atol=1e-12)
    # constant along the missing axis
    axis = bridge.MISSING_AXIS[view]
    np.testing.assert_array_equal(out.value, np.repeat(np.take(out.value, [0], axis=axis),
                                                       out.shape[axis], axis=axis))


def test_bridge_shape_mismatch_raises():
    params = {"bridge.level0.cor.w": ops.constant(np.ones((1, 1, 1, 2, 2))),
              "bridge.level0.cor.b": ops.constant(np.zeros(2))}
    with pytest.raises(ValueError):
        bridge.bridge_level(ops.constant(np.ones((3, 4, 2))), "cor", 0, (3, 5, 5), params)
    with pytest.raises(ValueError):
        bridge.bridge_level(ops.constant(np.ones((3, 4, 2))), "axial", 0, (3, 5, 4), params)
