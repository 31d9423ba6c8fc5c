"""Procedural labelled phantoms, volume augmentation and seeded datasets.

Axis convention: volumes are (H, W, D) with D the longitudinal axis (index 0
cranial). H runs left-right, W runs posterior (low) to anterior (high).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .drr import ProjectionConfig, ProjectionSet, read_projection_set, synthesize_drr, write_projection_set
from .volume import LabelVolume, read_lvv, write_lvv

KINDS = ("spine", "femur", "ribcage", "mixed")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "spine"
    k: int = 5
    dims: tuple[int, int, int] = (32, 32, 40)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    # spine: gap between neighbouring vertebrae in voxels (min, max)
    gap: tuple[int, int] = (1, 2)
    # femur: head radius (mm), neck-shaft angle (deg), neck length / radius, shaft radius (mm)
    head_radius: float = 10.0
    nsa: float = 130.0
    neck_length: float = 25.0
    neck_radius: float = 5.0
    shaft_radius: float = 6.0
    # ribcage: tube radius (mm), arc span (deg)
    tube_radius: float = 1.5
    arc_span: tuple[float, float] = (60.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {KINDS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims must be three sizes >= 4, got {self.dims}")


def _grid(dims, spacing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-centre coordinates in mm, each of shape ``dims``."""
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


# -- spine ---------------------------------------------------------------------

def _spine(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    H, W, D = spec.dims
    sh, sw, sd = spec.spacing
    vox = np.zeros(spec.dims, dtype=np.uint16)
    margin = 1
    gaps = rng.integers(spec.gap[0], spec.gap[1] + 1, size=spec.k - 1)
    usable = D - 2 * margin - int(gaps.sum())
    weights = rng.uniform(0.8, 1.2, size=spec.k)
    heights = np.floor(weights / weights.sum() * usable).astype(int)
    heights[: usable - heights.sum()] += 1
    if heights.min() < 3:
        raise ValueError(f"depth {D} too small for {spec.k} vertebrae")
    gh, gw, gd = _grid(spec.dims, spec.spacing)
    z0 = margin
    for i, h in enumerate(heights):
        z1 = z0 + int(h)
        zc = 0.5 * (z0 + z1) * sd
        a_d = 0.5 * h * sd + 0.5 * sd
        ch = H * sh * (0.5 + rng.uniform(-0.03, 0.03))
        cw = W * sw * (0.55 + rng.uniform(-0.03, 0.03))
        a_h = H * sh * rng.uniform(0.2, 0.26)
        a_w = W * sw * rng.uniform(0.14, 0.18)
        body = ((gh - ch) / a_h) ** 2 + ((gw - cw) / a_w) ** 2 + ((gd - zc) / a_d) ** 2 <= 1.0
        # posterior process: a narrower lobe reaching toward low W
        lw = cw - a_w * rng.uniform(1.0, 1.2)
        lobe = (((gh - ch) / (0.35 * a_h)) ** 2 + ((gw - lw) / (0.75 * a_w)) ** 2
                + ((gd - zc) / (0.8 * a_d)) ** 2 <= 1.0)
        slab = np.zeros(spec.dims, dtype=bool)
        slab[:, :, z0:z1] = True
        vox[(body | lobe) & slab] = i + 1
        z0 = z1 + (int(gaps[i]) if i < len(gaps) else 0)
    return vox


# -- femur ---------------------------------------------------------------------

@dataclass(frozen=True)
class FemurGeometry:
    head_center: np.ndarray
    junction: np.ndarray
    neck_dir: np.ndarray     # junction -> head
    shaft_dir: np.ndarray    # junction -> distal
    head_radius: float
    nsa: float


def femur_geometry(spec: PhantomSpec) -> FemurGeometry:
    """Construction geometry of the femur phantom in mm."""
    ext = np.array(spec.dims) * np.array(spec.spacing)
    t = math.radians(spec.nsa)
    shaft_dir = np.array([0.0, 0.0, 1.0])
    neck_dir = np.array([-math.sin(t), 0.0, math.cos(t)])
    # place the head so its top sits a few mm below the cranial border
    head_z = spec.head_radius + 3.0
    junction_z = head_z - spec.neck_length * math.cos(t)
    junction = np.array([0.5 * ext[0] + 0.5 * spec.neck_length * math.sin(t), 0.5 * ext[1], junction_z])
    head = junction + spec.neck_length * neck_dir
    return FemurGeometry(head, junction, neck_dir, shaft_dir, spec.head_radius, spec.nsa)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def _femur(spec: PhantomSpec) -> np.ndarray:
    geo = femur_geometry(spec)
    gh, gw, gd = _grid(spec.dims, spec.spacing)
    pts = np.stack([gh, gw, gd], axis=-1)
    head = np.linalg.norm(pts - geo.head_center, axis=-1) <= geo.head_radius
    neck = _segment_distance(pts, geo.junction, geo.head_center) <= spec.neck_radius
    ext_d = spec.dims[2] * spec.spacing[2]
    shaft_end = np.array([geo.junction[0], geo.junction[1], ext_d - 2.0])
    shaft = _segment_distance(pts, geo.junction, shaft_end) <= spec.shaft_radius
    shaft &= gd >= geo.junction[2]
    return (head | neck | shaft).astype(np.uint16)


# -- ribcage -------------------------------------------------------------------

@dataclass(frozen=True)
class RibGeometry:
    center: np.ndarray       # arc centre in mm (H, W, D)
    radius: float            # arc radius in mm
    theta: tuple[float, float]  # start/end angle in radians, measured in the H-W plane
    tube_radius: float

    @property
    def arc_length(self) -> float:
        return self.radius * abs(self.theta[1] - self.theta[0])

    def points(self, n: int = 200) -> np.ndarray:
        th = np.linspace(self.theta[0], self.theta[1], n)
        return np.stack([self.center[0] + self.radius * np.cos(th),
                         self.center[1] + self.radius * np.sin(th),
                         np.full(n, self.center[2])], axis=1)


def rib_geometries(spec: PhantomSpec, rng: np.random.Generator | None = None) -> list[RibGeometry]:
    """Arcs alternating right/left, each starting near the posterior midline."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    ext = np.array(spec.dims) * np.array(spec.spacing)
    n_levels = math.ceil(spec.k / 2)
    zs = (np.arange(n_levels) + 0.5) / n_levels * ext[2]
    ribs = []
    for i in range(spec.k):
        side = 1.0 if i % 2 == 0 else -1.0
        radius = 0.38 * min(ext[0], ext[1]) * rng.uniform(0.9, 1.0)
        center = np.array([0.5 * ext[0], 0.5 * ext[1], zs[i // 2]])
        span = math.radians(rng.uniform(*spec.arc_span))
        # start just beside the posterior midline (angle -90 deg points to low W)
        start = -math.pi / 2 + side * math.radians(15.0)
        ribs.append(RibGeometry(center, float(radius), (start, start + side * span), spec.tube_radius))
    return ribs


def _tube_mask(pts: np.ndarray, rib: RibGeometry) -> np.ndarray:
    rel = pts - rib.center
    rho = np.hypot(rel[..., 0], rel[..., 1])
    ang = np.arctan2(rel[..., 1], rel[..., 0])
    lo, hi = sorted(rib.theta)
    # unwrap angles into the arc's range
    mid = 0.5 * (lo + hi)
    ang = mid + np.angle(np.exp(1j * (ang - mid)))
    inside = (rho - rib.radius) ** 2 + rel[..., 2] ** 2 <= rib.tube_radius ** 2
    return inside & (ang >= lo) & (ang <= hi)


def _ribcage(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    gh, gw, gd = _grid(spec.dims, spec.spacing)
    pts = np.stack([gh, gw, gd], axis=-1)
    vox = np.zeros(spec.dims, dtype=np.uint16)
    for i, rib in enumerate(rib_geometries(spec, rng)):
        vox[_tube_mask(pts, rib) & (vox == 0)] = i + 1
    return vox


def _largest_component_per_class(vox: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vox)
    for c in np.unique(vox):
        if c == 0:
            continue
        lab, n = ndimage.label(vox == c)
        if n == 0:
            continue
        sizes = np.bincount(lab.ravel())[1:]
        out[lab == int(np.argmax(sizes)) + 1] = c
    return out


def generate_phantom(spec: PhantomSpec) -> LabelVolume:
    """Deterministic labelled phantom; every class is one connected component."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "spine":
        vox, names = _spine(spec, rng), {i + 1: f"vertebra_{i + 1}" for i in range(spec.k)}
    elif spec.kind == "femur":
        vox, names = _femur(spec), {1: "femur"}
    elif spec.kind == "ribcage":
        vox = _ribcage(spec, rng)
        names = {i + 1: f"rib_{i // 2 + 1}_{'r' if i % 2 == 0 else 'l'}" for i in range(spec.k)}
    else:
        # spine stack with a pair of ribs per level, ribs labelled after the vertebrae
        vox = _spine(spec, rng)
        ribs = _ribcage(PhantomSpec("ribcage", 2 * spec.k, spec.dims, spec.spacing, spec.seed,
                                    tube_radius=spec.tube_radius, arc_span=spec.arc_span), rng)
        free = (vox == 0) & (ribs > 0)
        vox[free] = ribs[free] + spec.k
        names = {i + 1: f"vertebra_{i + 1}" for i in range(spec.k)}
        names.update({spec.k + i + 1: f"rib_{i // 2 + 1}_{'r' if i % 2 == 0 else 'l'}"
                      for i in range(2 * spec.k)})
    vox = _largest_component_per_class(vox)
    n_classes = max(names)
    return LabelVolume(vox, spec.spacing, n_classes, names)


# -- augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    zoom: float = 0.10           # relative, symmetric range
    rotation_deg: float = 10.0   # about D
    shift_vox: float = 8.0       # per axis
    flip_p: float = 0.5          # left-right flip along H
    enabled: bool = True

    def __post_init__(self):
        vals = (self.zoom, self.rotation_deg, self.shift_vox, self.flip_p)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("augmentation ranges must be finite and non-negative")
        if self.zoom >= 1 or self.flip_p > 1:
            raise ValueError("zoom must be < 1 and flip_p <= 1")


@dataclass(frozen=True)
class AugTransform:
    flip: bool = False
    angle_deg: float = 0.0
    zoom: float = 1.0
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def is_identity(self) -> bool:
        return not self.flip and self.angle_deg == 0 and self.zoom == 1 and not any(self.shift)


def sample_transform(params: AugmentParams, rng: np.random.Generator) -> AugTransform:
    if not params.enabled:
        return AugTransform()
    flip = bool(rng.random() < params.flip_p)
    angle = float(rng.uniform(-params.rotation_deg, params.rotation_deg))
    zoom = float(1.0 + rng.uniform(-params.zoom, params.zoom))
    shift = tuple(float(s) for s in rng.uniform(-params.shift_vox, params.shift_vox, size=3))
    return AugTransform(flip, angle, zoom, shift)


def apply_transform(vol: LabelVolume, tf: AugTransform) -> LabelVolume:
    """Flip, rotate about D, zoom and shift (in that order) with nearest-neighbour resampling.

    Works in voxel units around the volume centre; each output voxel pulls
    the input voxel its centre maps back into, or background when outside.
    """
    if tf.is_identity():
        return vol
    dims = np.array(vol.dims)
    c = dims / 2.0
    idx = np.indices(vol.dims).reshape(3, -1).T + 0.5 - c
    p = (idx - np.array(tf.shift)) / tf.zoom
    t = math.radians(tf.angle_deg)
    cs, sn = math.cos(t), math.sin(t)
    h = cs * p[:, 0] + sn * p[:, 1]
    w = -sn * p[:, 0] + cs * p[:, 1]
    p = np.stack([h, w, p[:, 2]], axis=1)
    if tf.flip:
        p[:, 0] = -p[:, 0]
    src = np.floor(p + c + 1e-9).astype(np.int64)
    ok = np.all((src >= 0) & (src < dims), axis=1)
    out = np.zeros(int(np.prod(dims)), dtype=np.uint16)
    out[ok] = vol.voxels[src[ok, 0], src[ok, 1], src[ok, 2]]
    return vol.with_voxels(out.reshape(vol.dims))


def augment(vol: LabelVolume, params: AugmentParams, rng: np.random.Generator) -> LabelVolume:
    return apply_transform(vol, sample_transform(params, rng))


# -- samples and datasets ----------------------------------------------------------

def make_sample(spec: PhantomSpec, aug: AugmentParams | None = None,
                proj: ProjectionConfig = ProjectionConfig(),
                rng: np.random.Generator | None = None) -> tuple[ProjectionSet, LabelVolume]:
    """Phantom, optionally augmented, with projections rendered from the final volume."""
    vol = generate_phantom(spec)
    if aug is not None and aug.enabled:
        vol = augment(vol, aug, np.random.default_rng(spec.seed) if rng is None else rng)
    return synthesize_drr(vol, proj), vol


def split_of(seed: int) -> str:
    """80/10/10 train/val/test assignment from a hash of the sample seed."""
    bucket = int(hashlib.sha256(str(int(seed)).encode()).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


@dataclass
class Manifest:
    root: Path
    samples: list[dict] = field(default_factory=list)
    phantom: dict = field(default_factory=dict)
    projection: dict = field(default_factory=dict)

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    def volume(self, sample: dict) -> LabelVolume:
        return read_lvv(self.root / sample["volume"])

    def projections(self, sample: dict) -> ProjectionSet:
        return read_projection_set(self.root / sample["projections"])

    def save(self) -> Path:
        path = self.root / "manifest.json"
        doc = {"format": "manifest1", "phantom": self.phantom, "projection": self.projection,
               "samples": self.samples}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("format") != "manifest1":
        raise ValueError(f"{path}: not a dataset manifest")
    return Manifest(path.parent, doc["samples"], doc.get("phantom", {}), doc.get("projection", {}))


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def build_dataset(out_dir, n: int, spec: PhantomSpec, proj: ProjectionConfig = ProjectionConfig(),
                  first_seed: int = 0) -> Manifest:
    """Write ``n`` phantoms (seeds first_seed..first_seed+n-1) with projections and a manifest.

    Stored samples are un-augmented; training augments on the fly.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for seed in range(first_seed, first_seed + n):
        s = PhantomSpec(**{**asdict(spec), "seed": seed})
        ps, vol = make_sample(s, None, proj)
        name = f"s{seed:05d}"
        write_lvv(root / f"{name}.lvv", vol)
        write_projection_set(root / name, ps)
        samples.append({"seed": seed, "split": split_of(seed), "volume": f"{name}.lvv",
                        "projections": name})
    proj_doc = _jsonable(asdict(proj))
    if proj_doc.get("attenuation") is not None:
        proj_doc["attenuation"] = {str(k): v for k, v in proj_doc["attenuation"].items()}
    m = Manifest(root, samples, _jsonable({k: v for k, v in asdict(spec).items() if k != "seed"}),
                 proj_doc)
    m.save()
    return m
