"""Labelled volumes, 2D images and the shared coordinate conventions.

Axis convention for every array in the package: axis 0 is H, axis 1 is W and
axis 2 is D. D is the longitudinal (cranio-caudal) axis and the rotation axis
of the projector. A coronal projection integrates along W and yields an
(H, D) image; a sagittal projection integrates along H and yields a (W, D)
image. Voxel ``(i, j, k)`` has its centre at ``((i + .5) sh, (j + .5) sw,
(k + .5) sd)`` millimetres.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANATOMY_GROUPS = ("femur", "pelvis", "spine", "rib")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense grid of class ids with physical spacing (0 is background)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_classes: int | None = None
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {vox.shape}")
        if vox.size and (not np.issubdtype(vox.dtype, np.integer)):
            if not np.all(np.mod(vox, 1) == 0):
                raise ValueError("label volume holds non-integer values")
        vox = vox.astype(np.uint16)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        k = self.num_classes
        vmax = int(vox.max()) if vox.size else 0
        if k is None:
            k = vmax
        if vmax > k:
            raise ValueError(f"voxel value {vmax} exceeds num_classes={k}")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "num_classes", int(k))
        object.__setattr__(self, "class_names", {int(a): str(b) for a, b in self.class_names.items()})

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims) * np.array(self.spacing)

    def present_classes(self) -> list[int]:
        ids = np.unique(self.voxels)
        return [int(c) for c in ids if c != 0]

    def mask(self, class_id: int) -> np.ndarray:
        return self.voxels == class_id

    def with_voxels(self, voxels: np.ndarray, spacing=None) -> "LabelVolume":
        return LabelVolume(voxels, self.spacing if spacing is None else spacing,
                           self.num_classes, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.num_classes == other.num_classes
                and bool(np.array_equal(self.voxels, other.voxels)))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Image2D:
    """A (rows, cols, channels) float image with pixel spacing in mm."""

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"image must be 2D (+channels), got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ClassMap:
    """Class id to name table with an anatomy group per class."""

    names: dict[int, str]
    groups: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(self.names)
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be contiguous from 1, got {ids}")
        if len(set(self.names.values())) != len(ids):
            raise ValueError("class names must be unique")
        for cid, g in self.groups.items():
            if g not in ANATOMY_GROUPS:
                raise ValueError(f"unknown anatomy group {g!r} for class {cid}")

    def __len__(self):
        return len(self.names)

    def id_of(self, name: str) -> int:
        for cid, n in self.names.items():
            if n == name:
                return cid
        raise KeyError(name)


def resample_isotropic(vol: LabelVolume, target_dims) -> LabelVolume:
    """Nearest-neighbour resampling to ``target_dims`` keeping physical extent.

    Output voxel ``i`` takes the label of the input voxel whose centre is
    nearest to its own centre; exact ties resolve to the higher index.
    """
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target dims must be three positive ints, got {target_dims}")
    if min(vol.dims) == 0:
        raise ValueError("cannot resample an empty volume")
    idx = []
    for n_in, n_out in zip(vol.dims, target):
        i = np.arange(n_out)
        # source = floor((i + 1/2) n_in / n_out), in exact integer arithmetic
        idx.append(np.minimum(((2 * i + 1) * n_in) // (2 * n_out), n_in - 1))
    out = vol.voxels[np.ix_(*idx)]
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(vol.spacing, vol.dims, target))
    return vol.with_voxels(out, spacing)


def voxel_centers(indices: np.ndarray, spacing) -> np.ndarray:
    return (np.asarray(indices, dtype=np.float64) + 0.5) * np.asarray(spacing, dtype=np.float64)


def class_centroid(vol: LabelVolume, class_id: int) -> np.ndarray | None:
    """Mean voxel-centre position (mm) of a class, or None when absent."""
    idx = np.argwhere(vol.voxels == class_id)
    if len(idx) == 0:
        return None
    return voxel_centers(idx, vol.spacing).mean(axis=0)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = (p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
                & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
                & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return mask & ~interior


def surface_voxels(vol: LabelVolume, class_id: int) -> np.ndarray:
    """Surface voxel centres of a class in mm, shape (n, 3)."""
    idx = np.argwhere(surface_mask(vol.voxels == class_id))
    return voxel_centers(idx, vol.spacing)


# -- lvv1 ------------------------------------------------------------------

def _write_record(path, header: dict, payload: bytes) -> None:
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        fh.write(payload)


def _read_record(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    return json.loads(data[:nl].decode("utf-8")), data[nl + 1:]


def write_lvv(path, vol: LabelVolume) -> None:
    """Write a volume as lvv1: one JSON header line then little-endian u16 voxels."""
    header = {
        "format": "lvv1",
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "num_classes": vol.num_classes,
        "class_names": {str(k): v for k, v in sorted(vol.class_names.items())},
    }
    _write_record(path, header, vol.voxels.astype("<u2").tobytes(order="C"))


def read_lvv(path) -> LabelVolume:
    header, payload = _read_record(path)
    if header.get("format") != "lvv1":
        raise ValueError(f"{path}: not an lvv1 file")
    dims = tuple(header["dims"])
    vox = np.frombuffer(payload, dtype="<u2")
    if vox.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {np.prod(dims)} voxels, found {vox.size}")
    names = {int(k): v for k, v in header.get("class_names", {}).items()}
    return LabelVolume(vox.reshape(dims), tuple(header["spacing"]), header["num_classes"], names)
