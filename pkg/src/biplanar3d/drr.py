"""Parallel-beam digitally reconstructed radiographs from label volumes.

Attenuation is assigned per class, integrated along rays by uniform sampling
with trilinear lookup, and mapped to intensity with ``1 - exp(-integral)``.
View ``k`` of a group of ``N`` is rotated by ``k * 90 / N`` degrees about the
D axis from the group's base direction (+W for coronal, +H for sagittal).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .volume import Image2D, LabelVolume, _read_record, _write_record

BONE_MU = 0.04        # 1/mm
SOFT_TISSUE_MU = 0.005


def default_attenuation(num_classes: int, bone: float = BONE_MU,
                        soft_tissue: float = SOFT_TISSUE_MU) -> dict[int, float]:
    table = {0: soft_tissue}
    table.update({c: bone for c in range(1, num_classes + 1)})
    return table


@dataclass(frozen=True)
class ProjectionConfig:
    n_views: int = 1
    attenuation: dict[int, float] | None = None
    noise_std: float = 0.0
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def table_for(self, vol: LabelVolume) -> dict[int, float]:
        if self.attenuation is None:
            return default_attenuation(vol.num_classes)
        return {int(k): float(v) for k, v in self.attenuation.items()}


@dataclass(frozen=True)
class ProjectionSet:
    """Coronal (H x D) and sagittal (W x D) image groups with view angles.

    Angles are in degrees measured from +W about the D axis.
    """

    coronal: list[Image2D]
    sagittal: list[Image2D]
    coronal_angles: list[float] = field(default_factory=list)
    sagittal_angles: list[float] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.coronal)

    def stack(self, group: str) -> np.ndarray:
        """Images of one group as a (rows, cols, N) array."""
        imgs = self.coronal if group == "coronal" else self.sagittal
        return np.concatenate([im.pixels for im in imgs], axis=2)

    def equals(self, other: "ProjectionSet") -> bool:
        return (self.coronal_angles == other.coronal_angles
                and self.sagittal_angles == other.sagittal_angles
                and all(np.array_equal(a.pixels, b.pixels)
                        for a, b in zip(self.coronal + self.sagittal,
                                        other.coronal + other.sagittal)))


def view_angles(n_views: int) -> tuple[list[float], list[float]]:
    inc = 90.0 / n_views
    cor = [k * inc for k in range(n_views)]
    return cor, [90.0 + a for a in cor]


def view_geometry(angle_deg: float, group: str) -> tuple[np.ndarray, np.ndarray]:
    """Ray direction and detector row axis for a view, in (H, W, D) coordinates."""
    t = math.radians(angle_deg)
    s, c = math.sin(t), math.cos(t)
    direction = np.array([s, c, 0.0])
    # rows run along +H for the coronal base view and +W for the sagittal one
    row_axis = np.array([c, -s, 0.0]) if group == "coronal" else np.array([-c, s, 0.0])
    for v in (direction, row_axis):
        v[np.abs(v) < 1e-15] = 0.0
    return direction, row_axis


def attenuation_volume(vol: LabelVolume, table: dict[int, float]) -> np.ndarray:
    present = [0] + vol.present_classes() if np.any(vol.voxels == 0) else vol.present_classes()
    for c in present:
        if c not in table:
            raise ValueError(f"no attenuation coefficient for class {c}")
    lut = np.zeros(max(max(table), int(vol.voxels.max()) if vol.voxels.size else 0) + 1)
    for c, mu in table.items():
        lut[c] = mu
    return lut[vol.voxels]


def project_view(mu: np.ndarray, spacing, angle_deg: float, group: str) -> np.ndarray:
    """Line integrals of ``mu`` for one view, shape (rows, D)."""
    spacing = np.asarray(spacing, dtype=np.float64)
    dims = np.array(mu.shape)
    extent = dims * spacing
    center = extent / 2.0
    direction, row_axis = view_geometry(angle_deg, group)
    n_rows, row_sp = (dims[0], spacing[0]) if group == "coronal" else (dims[1], spacing[1])
    n_cols, col_sp = dims[2], spacing[2]
    step = float(spacing.min()) / 2.0
    n_steps = 2 * int(math.ceil(np.linalg.norm(extent) / 2.0 / step + 1))
    half = n_steps * step / 2.0
    r = (np.arange(n_rows) + 0.5 - n_rows / 2.0) * row_sp
    c = (np.arange(n_cols) + 0.5 - n_cols / 2.0) * col_sp
    origins = (center[None, None, :]
               + r[:, None, None] * row_axis[None, None, :]
               + c[None, :, None] * np.array([0.0, 0.0, 1.0])[None, None, :]
               - half * direction[None, None, :])
    return _kernels.integrate_rays(np.ascontiguousarray(mu, dtype=np.float64), spacing,
                                   np.ascontiguousarray(origins), direction, step, n_steps)


def _finish(integral: np.ndarray, cfg: ProjectionConfig, stream: tuple[int, ...]) -> np.ndarray:
    img = 1.0 - np.exp(-integral)
    if cfg.noise_std > 0:
        rng = np.random.default_rng([cfg.seed, *stream])
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    if cfg.normalize:
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    else:
        img = np.clip(img, 0.0, 1.0)
    return img


def synthesize_drr(vol: LabelVolume, cfg: ProjectionConfig = ProjectionConfig()) -> ProjectionSet:
    mu = attenuation_volume(vol, cfg.table_for(vol))
    cor_angles, sag_angles = view_angles(cfg.n_views)
    groups = {}
    for g, (group, angles) in enumerate((("coronal", cor_angles), ("sagittal", sag_angles))):
        sp = (vol.spacing[0], vol.spacing[2]) if group == "coronal" else (vol.spacing[1], vol.spacing[2])
        groups[group] = [
            Image2D(_finish(project_view(mu, vol.spacing, a, group), cfg, (g, k)), sp)
            for k, a in enumerate(angles)
        ]
    return ProjectionSet(groups["coronal"], groups["sagittal"], cor_angles, sag_angles)


def ray_path_length(dims, spacing, origin, direction, mask) -> float:
    """Exact length (mm) of the ray ``origin + t * direction``, t >= 0, inside ``mask``.

    Every grid-plane crossing splits the ray into segments that each lie in a
    single voxel; segment lengths are summed over voxels where ``mask`` is set.
    """
    dims = np.asarray(dims, dtype=np.int64)
    spacing = np.asarray(spacing, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        raise ValueError("ray direction must be non-zero")
    d = d / norm
    mask = np.asarray(mask, dtype=bool)
    extent = dims * spacing
    t0, t1 = 0.0, math.inf
    for a in range(3):
        if d[a] == 0.0:
            if not 0.0 <= o[a] <= extent[a]:
                return 0.0
            continue
        ta, tb = (0.0 - o[a]) / d[a], (extent[a] - o[a]) / d[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    if t0 >= t1:
        return 0.0
    ts = [np.array([t0, t1])]
    for a in range(3):
        if d[a] != 0.0:
            planes = np.arange(dims[a] + 1) * spacing[a]
            tp = (planes - o[a]) / d[a]
            ts.append(tp[(tp > t0) & (tp < t1)])
    ts = np.unique(np.concatenate(ts))
    length = 0.0
    for ta, tb in zip(ts[:-1], ts[1:]):
        mid = o + d * (0.5 * (ta + tb))
        idx = np.clip(np.floor(mid / spacing).astype(np.int64), 0, dims - 1)
        if mask[tuple(idx)]:
            length += tb - ta
    return float(length)


# -- pgv1 ------------------------------------------------------------------

def write_pgv(path, img: Image2D, group: str, angle: float, n_views: int, index: int) -> None:
    header = {
        "format": "pgv1",
        "dims": [int(img.dims[0]), int(img.dims[1])],
        "channels": int(img.channels),
        "spacing": list(img.spacing),
        "group": group,
        "angle": float(angle),
        "n_views": int(n_views),
        "index": int(index),
    }
    _write_record(path, header, img.pixels.astype("<f4").tobytes(order="C"))


def read_pgv(path) -> tuple[Image2D, dict]:
    header, payload = _read_record(path)
    if header.get("format") != "pgv1":
        raise ValueError(f"{path}: not a pgv1 file")
    rows, cols = header["dims"]
    px = np.frombuffer(payload, dtype="<f4").reshape(rows, cols, header.get("channels", 1))
    return Image2D(px.astype(np.float64), tuple(header["spacing"])), header


def write_projection_set(directory, ps: ProjectionSet) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for group, imgs, angles in (("coronal", ps.coronal, ps.coronal_angles),
                                ("sagittal", ps.sagittal, ps.sagittal_angles)):
        for k, (img, a) in enumerate(zip(imgs, angles)):
            p = directory / f"{group}_{k}.pgv"
            write_pgv(p, img, group, a, ps.n_views, k)
            paths.append(p)
    index = {"format": "pgv1-set", "n_views": ps.n_views, "files": [p.name for p in paths]}
    (directory / "projections.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return paths


def read_projection_set(directory) -> ProjectionSet:
    directory = Path(directory)
    index = json.loads((directory / "projections.json").read_text())
    groups = {"coronal": {}, "sagittal": {}}
    for name in index["files"]:
        img, h = read_pgv(directory / name)
        groups[h["group"]][h["index"]] = (img, h["angle"])
    out = {}
    for g, items in groups.items():
        ks = sorted(items)
        out[g] = ([items[k][0] for k in ks], [items[k][1] for k in ks])
    return ProjectionSet(out["coronal"][0], out["sagittal"][0], out["coronal"][1], out["sagittal"][1])
