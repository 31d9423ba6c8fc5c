from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from biplanar3d.drr import ProjectionConfig
from biplanar3d.phantoms import (AugmentParams, AugTransform, PhantomSpec, apply_transform, augment,
                                 build_dataset, generate_phantom, load_manifest, make_sample,
                                 sample_transform, split_of)
from biplanar3d.volume import LabelVolume


def _connected(mask):
    return ndimage.label(mask, structure=np.ones((3, 3, 3)))[1] == 1


@given(st.integers(0, 2 ** 16), st.integers(1, 6))
def test_spine_classes_present_connected_and_ordered(seed, k):
    vol = generate_phantom(PhantomSpec("spine", k, dims=(24, 24, 40), seed=seed))
    assert vol.present_classes() == list(range(1, k + 1))
    zs = []
    for c in range(1, k + 1):
        m = vol.mask(c)
        assert _connected(m)
        zs.append(np.argwhere(m)[:, 2].mean())
    assert zs == sorted(zs)  # vertebra 1 is the most cranial


@pytest.mark.parametrize("kind,k", [("femur", 1), ("ribcage", 4), ("mixed", 3)])
def test_other_kinds_are_connected(kind, k):
    vol = generate_phantom(PhantomSpec(kind, k, dims=(64, 48, 72), seed=2))
    for c in vol.present_classes():
        assert _connected(vol.mask(c))
    assert vol.class_names


def test_generation_is_deterministic():
    a = generate_phantom(PhantomSpec("spine", 5, seed=11))
    b = generate_phantom(PhantomSpec("spine", 5, seed=11))
    c = generate_phantom(PhantomSpec("spine", 5, seed=12))
    assert a == b and a != c


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec("skull")
    with pytest.raises(ValueError):
        PhantomSpec(k=0)
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec("spine", 12, dims=(16, 16, 20)))


def test_identity_and_disabled_augmentation():
    vol = generate_phantom(PhantomSpec(seed=1))
    assert apply_transform(vol, AugTransform()) is vol
    off = AugmentParams(enabled=False)
    assert sample_transform(off, np.random.default_rng(0)).is_identity()
    assert augment(vol, off, np.random.default_rng(0)) is vol


def test_flip_is_an_involution_along_h():
    vol = generate_phantom(PhantomSpec(seed=4))
    flipped = apply_transform(vol, AugTransform(flip=True))
    np.testing.assert_array_equal(flipped.voxels, vol.voxels[::-1])
    assert apply_transform(flipped, AugTransform(flip=True)) == vol


def test_integer_shift_translates_voxels():
    vol = generate_phantom(PhantomSpec(seed=4))
    out = apply_transform(vol, AugTransform(shift=(2.0, 0.0, -1.0)))
    np.testing.assert_array_equal(out.voxels[2:, :, :-1], vol.voxels[:-2, :, 1:])


@given(st.integers(0, 2 ** 16))
def test_augmentation_keeps_grid_and_label_set(seed):
    vol = generate_phantom(PhantomSpec(seed=0))
    out = augment(vol, AugmentParams(), np.random.default_rng(seed))
    assert out.dims == vol.dims and out.spacing == vol.spacing
    assert set(np.unique(out.voxels)) <= set(np.unique(vol.voxels))


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(zoom=-0.1)
    with pytest.raises(ValueError):
        AugmentParams(flip_p=1.5)


def test_split_assignment_is_stable_and_roughly_80_10_10():
    counts = Counter(split_of(s) for s in range(2000))
    assert split_of(17) == split_of(17)
    assert abs(counts["train"] / 2000 - 0.8) < 0.04
    assert abs(counts["val"] / 2000 - 0.1) < 0.03


def test_make_sample_projects_the_final_volume():
    ps, vol = make_sample(PhantomSpec(seed=3), AugmentParams(), rng=np.random.default_rng(5))
    H, W, D = vol.dims
    assert ps.coronal[0].dims == (H, D) and ps.sagittal[0].dims == (W, D)


def test_manifest_round_trip(tmp_path):
    m = build_dataset(tmp_path / "ds", 4, PhantomSpec("spine", 3, dims=(16, 16, 20)),
                      ProjectionConfig())
    loaded = load_manifest(tmp_path / "ds")
    assert loaded.samples == m.samples
    s = loaded.samples[2]
    assert s["split"] == split_of(s["seed"])
    assert loaded.volume(s) == generate_phantom(PhantomSpec("spine", 3, dims=(16, 16, 20), seed=2))
    assert len(loaded.projections(s).coronal) == 1
    assert sum(len(loaded.split(n)) for n in ("train", "val", "test")) == 4
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "bad.json")


def test_label_volume_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 5), num_classes=3)
