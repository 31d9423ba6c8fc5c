"""Simplified shape measurements: femoral head radius, neck-shaft angle and
rib centerlines with overlap/deviation scores between two centerlines.

All coordinates are in mm using voxel centres at ``(i + 0.5) * spacing``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize_scalar
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .volume import LabelVolume, voxel_centers

log = logging.getLogger(__name__)

CAP_FRACTION = 0.2
TUBE_RADIUS_MM = 3.0
GRID_MM = 1.0
LONG_AXIS = 2  # D


# -- geometry helpers --------------------------------------------------------------

def _principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid, eigenvalues (descending) and eigenvectors (columns) of a point cloud."""
    c = points.mean(axis=0)
    w, v = np.linalg.eigh(np.cov((points - c).T))
    order = np.argsort(w)[::-1]
    return c, w[order], v[:, order]


def fit_sphere(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Algebraic least-squares sphere: |p|^2 = 2 c.p + k, with r^2 = k + |c|^2."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 4:
        raise ValueError("sphere fit needs at least 4 points")
    A = np.column_stack([2 * points, np.ones(len(points))])
    b = (points ** 2).sum(axis=1)
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 4:
        raise ValueError("degenerate point set for sphere fit")
    c = sol[:3]
    r2 = sol[3] + c @ c
    if r2 <= 0:
        raise ValueError("degenerate point set for sphere fit")
    return c, float(np.sqrt(r2))


def boundary_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Centres of the voxel faces separating ``mask`` from its outside (mm)."""
    mask = np.asarray(mask, dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    p = np.pad(mask, 1)
    out = []
    for axis in range(3):
        for step in (-1, 1):
            nb = np.roll(p, -step, axis=axis)[1:-1, 1:-1, 1:-1]
            idx = np.argwhere(mask & ~nb).astype(np.float64) + 0.5
            idx[:, axis] += 0.5 * step
            out.append(idx * sp)
    return np.concatenate(out)


def _line_distance(points: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rel = points - origin
    return np.linalg.norm(rel - np.outer(rel @ direction, direction), axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


# -- femur -----------------------------------------------------------------------

@dataclass
class FemurMeasurement:
    fhr: float
    nsa: float
    head_center: np.ndarray
    neck_axis: np.ndarray
    shaft_axis: np.ndarray

    def to_dict(self) -> dict:
        return {"fhr_mm": self.fhr, "nsa_deg": self.nsa, "head_center_mm": self.head_center.tolist(),
                "neck_axis": self.neck_axis.tolist(), "shaft_axis": self.shaft_axis.tolist(),
                "protocol": "simplified"}


def femur_params(vol: LabelVolume, femur_class: int = 1) -> FemurMeasurement:
    """Head radius from a sphere fit at the proximal end; neck-shaft angle between the
    head-to-neck axis and the principal axis of the distal half.

    The neck axis runs from the centroid of a thin shell of neck voxels just
    outside the fitted head to the head centre.
    """
    mask = vol.mask(femur_class)
    if not mask.any():
        raise ValueError(f"class {femur_class} is absent")
    pts = voxel_centers(np.argwhere(mask), vol.spacing)
    centroid, evals, evecs = _principal_axes(pts)
    if evals[0] <= 0 or evals[1] / evals[0] > 0.95:
        raise ValueError("femur mask has no dominant long axis")
    axis = evecs[:, 0]
    proj = (pts - centroid) @ axis
    # the proximal end carries the head and neck, so it spreads further off-axis
    spread_hi = _line_distance(pts[proj > np.quantile(proj, 0.8)], centroid, axis).mean()
    spread_lo = _line_distance(pts[proj < np.quantile(proj, 0.2)], centroid, axis).mean()
    if spread_lo > spread_hi:
        axis, proj = -axis, -proj
    lo, hi = proj.min(), proj.max()

    # seed the head at the deepest interior point of the proximal part, then
    # refit to the surface points lying on the current sphere
    step = max(vol.spacing)
    edt = ndimage.distance_transform_edt(mask, sampling=vol.spacing)
    idx = np.argwhere(mask)
    prox = proj >= hi - 2 * CAP_FRACTION * (hi - lo)
    best = np.flatnonzero(prox)[int(np.argmax(edt[tuple(idx[prox].T)]))]
    c, r = pts[best], float(edt[tuple(idx[best])]) + 0.5 * min(vol.spacing)
    surf = boundary_points(mask, vol.spacing)
    for band in (1.5, 1.0, 0.75, 0.75, 0.75):
        on = np.abs(np.linalg.norm(surf - c, axis=1) - r) <= band * step
        c, r = fit_sphere(surf[on])

    distal = pts[proj <= 0.5 * (lo + hi)]
    m_s, _, sv = _principal_axes(distal)
    shaft = sv[:, 0]
    if shaft @ (m_s - c) < 0:
        shaft = -shaft
    # a thin shell just outside the head cuts the neck symmetrically about its axis
    d_head = np.linalg.norm(pts - c, axis=1)
    shell = (d_head >= r + 0.5 * step) & (d_head <= r + 1.5 * step + 0.15 * r)
    if shell.sum() < 3:
        raise ValueError("no neck voxels found between head and shaft")
    sub = np.zeros(mask.shape, dtype=bool)
    sub[tuple(idx[shell].T)] = True
    lab, n = ndimage.label(sub, structure=np.ones((3, 3, 3)))
    labels = lab[tuple(idx[shell].T)]
    if n > 1:
        cents = [pts[shell][labels == k].mean(axis=0) for k in range(1, n + 1)]
        k = 1 + int(np.argmin([np.linalg.norm(q - c) for q in cents]))
        neck_pts = pts[shell][labels == k]
    else:
        neck_pts = pts[shell]
    neck = _unit(c - neck_pts.mean(axis=0))
    nsa = float(np.degrees(np.arccos(np.clip(neck @ shaft, -1.0, 1.0))))
    return FemurMeasurement(r, nsa, c, neck, shaft)


# -- centerlines -------------------------------------------------------------------

@dataclass
class Centerline:
    points: np.ndarray        # (n, 3) mm, ordered, ~1 mm apart
    length: float             # mm
    n_components: int = 1

    def to_dict(self) -> dict:
        return {"length_mm": self.length, "points_mm": self.points.tolist(),
                "n_components": self.n_components}


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum()) if len(points) > 1 else 0.0


def resample_polyline(points: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Points at uniform arc-length spacing, keeping both endpoints."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return points[:1].copy()
    n = max(int(np.floor(s[-1] / step + 1e-9)), 1)
    t = np.append(np.arange(n + 1) * step, s[-1]) if n * step < s[-1] - 1e-9 else np.arange(n + 1) * step
    return np.column_stack([np.interp(t, s, points[:, k]) for k in range(3)])


def _longest_path(coords: np.ndarray, spacing) -> np.ndarray:
    """Index path of the longest geodesic in the 26-connected voxel graph (double sweep)."""
    n = len(coords)
    if n == 1:
        return np.array([0])
    lookup = {tuple(p): i for i, p in enumerate(coords)}
    rows, cols, wts = [], [], []
    offsets = [np.array(o) for o in np.ndindex(3, 3, 3) if o != (1, 1, 1)]
    sp = np.asarray(spacing, dtype=np.float64)
    for i, p in enumerate(coords):
        for o in offsets:
            j = lookup.get(tuple(p + o - 1))
            if j is not None and j > i:
                rows.append(i)
                cols.append(j)
                wts.append(float(np.linalg.norm((o - 1) * sp)))
    graph = coo_matrix((wts, (rows, cols)), shape=(n, n)).tocsr()
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        keep = np.flatnonzero(labels == np.bincount(labels).argmax())
        sub = _longest_path(coords[keep], spacing)
        return keep[sub]
    d0 = dijkstra(graph, directed=False, indices=0)
    a = int(np.argmax(d0))
    da, pred = dijkstra(graph, directed=False, indices=a, return_predecessors=True)
    b = int(np.argmax(da))
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    return np.array(path[::-1])


def _march_end(points: np.ndarray, tree: cKDTree, centers: np.ndarray, radius: float,
               voxel: float, look_mm: float = 3.0) -> np.ndarray:
    """Extend the path end through the tube tip by re-centred marching.

    Each step moves half a voxel along the current tangent and snaps to the
    centroid of the mask voxels in a one-voxel-thick slab across the tube.
    The tip is where the slab holds less than half the median count so far;
    that last step is taken straight along the tangent.
    """
    pts = [p for p in points]
    h = 0.5 * voxel
    counts: list[int] = []
    for _ in range(10_000):
        rev = np.array(pts[::-1])
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(rev, axis=0), axis=1))])
        back = rev[min(int(np.searchsorted(s, look_mm)), len(rev) - 1)]
        if np.allclose(back, pts[-1]):
            break
        d = _unit(pts[-1] - back)
        if s[-1] < look_mm:
            # too little path for a tangent: use the local axis of the mask instead
            local = centers[tree.query_ball_point(pts[-1], 2.0 * radius + voxel)]
            axis = _principal_axes(local)[2][:, 0] if len(local) > 3 else d
            d = axis if axis @ d >= 0 else -axis
        q = pts[-1] + h * d
        near = centers[tree.query_ball_point(q, radius + 1.5 * voxel)]
        if len(near):
            t = (near - q) @ d
            near = near[(t > -0.5 * voxel) & (t <= 0.5 * voxel)]
        if len(near) == 0 or (counts and len(near) < 0.5 * np.median(counts)):
            if len(near):
                pts.append(q)
            break
        counts.append(len(near))
        c = near.mean(axis=0)
        pts.append(c - ((c - q) @ d) * d)  # keep the half-voxel advance along the tangent
    return np.array(pts)


def _trim_ends(pts: np.ndarray, trim_mm: float) -> np.ndarray:
    """Drop path points within ``trim_mm`` of either end (skeleton spurs near the tips)."""
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    keep = (s >= trim_mm) & (s <= s[-1] - trim_mm)
    if keep.sum() < 2:
        mid = len(pts) // 2
        return pts[max(mid - 1, 0):mid + 1]
    return pts[keep]


def _smooth_path(pts: np.ndarray, sigma_mm: float) -> np.ndarray:
    """Gaussian smoothing along arc length with both endpoints held fixed."""
    fine = resample_polyline(pts, 0.25 * sigma_mm)
    if len(fine) < 3:
        return pts
    sm = ndimage.gaussian_filter1d(fine, 4.0, axis=0, mode="nearest")
    sm[0], sm[-1] = fine[0], fine[-1]
    return sm


def rib_centerline(vol: LabelVolume, rib_class: int, step_mm: float = 1.0,
                   smooth_mm: float = 1.5) -> Centerline:
    """Skeletonise, keep the longest path, extend through both tips, smooth and resample.

    The result runs from the end closer to the H midplane (spine side) outward.
    """
    mask = vol.mask(rib_class)
    if not mask.any():
        raise ValueError(f"class {rib_class} is absent")
    lab, n_comp = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n_comp > 1:
        sizes = np.bincount(lab.ravel())[1:]
        log.warning("class %d has %d components; using the largest", rib_class, n_comp)
        mask = lab == int(np.argmax(sizes)) + 1
    skel = skeletonize(mask).astype(bool)
    coords = np.argwhere(skel) if skel.any() else np.argwhere(mask)
    path = coords[_longest_path(coords, vol.spacing)]
    pts = voxel_centers(path, vol.spacing)
    sp = np.asarray(vol.spacing)
    centers = voxel_centers(np.argwhere(mask), sp)
    tree = cKDTree(centers)
    radius = float(np.mean(ndimage.distance_transform_edt(mask, sampling=sp)[tuple(path.T)]))
    pts = _trim_ends(pts, 2.0 * radius)
    pts = _march_end(pts, tree, centers, radius, float(sp.min()))
    pts = _march_end(pts[::-1], tree, centers, radius, float(sp.min()))[::-1]
    if smooth_mm > 0:
        pts = _smooth_path(pts, smooth_mm)
    mid_h = 0.5 * vol.dims[0] * vol.spacing[0]
    if abs(pts[-1, 0] - mid_h) < abs(pts[0, 0] - mid_h):
        pts = pts[::-1]
    return Centerline(resample_polyline(pts, step_mm), polyline_length(pts), n_comp)


def point_to_curve(points: np.ndarray, curve: np.ndarray) -> np.ndarray:
    """Distance from each point to the polyline ``curve`` (exact, segment-wise)."""
    points = np.atleast_2d(points)
    if len(curve) == 1:
        return np.linalg.norm(points - curve[0], axis=1)
    a, b = curve[:-1], curve[1:]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-300)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip((rel * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    nearest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - nearest, axis=2).min(axis=1)


def mean_curve_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean point-to-curve distance."""
    return 0.5 * float(point_to_curve(a, b).mean() + point_to_curve(b, a).mean())


def tube_dice(a: np.ndarray, b: np.ndarray, radius: float = TUBE_RADIUS_MM,
              grid: float = GRID_MM) -> float:
    """Dice (%) of the two polylines dilated to tubes and sampled on a common grid."""
    both = np.vstack([a, b])
    lo = np.floor((both.min(axis=0) - radius) / grid) * grid - grid
    hi = np.ceil((both.max(axis=0) + radius) / grid) * grid + grid
    axes = [np.arange(l, h + 0.5 * grid, grid) for l, h in zip(lo, hi)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    ta = point_to_curve(g, a) <= radius
    tb = point_to_curve(g, b) <= radius
    total = int(ta.sum()) + int(tb.sum())
    return 100.0 * 2 * int((ta & tb).sum()) / total if total else 100.0


@dataclass
class CenterlineScores:
    nl_dice: float
    lscd_error: float
    axial_shift: float  # optimal translation of the first line along D (mm)

    def to_dict(self) -> dict:
        return {"nl_dice": self.nl_dice, "lscd_error_mm": self.lscd_error,
                "axial_shift_mm": self.axial_shift}


def _axial(t: float) -> np.ndarray:
    e = np.zeros(3)
    e[LONG_AXIS] = t
    return e


def optimal_axial_shift(a: np.ndarray, b: np.ndarray, search_mm: float | None = None) -> float:
    """Translation t along D minimising the mean distance between a + t and b."""
    if search_mm is None:
        span = np.ptp(np.vstack([a, b])[:, LONG_AXIS])
        search_mm = span + 2 * TUBE_RADIUS_MM
    cost = lambda t: mean_curve_distance(a + _axial(t), b)  # noqa: E731
    grid = np.arange(-search_mm, search_mm + 0.25, 0.5)
    t0 = grid[int(np.argmin([cost(t) for t in grid]))]
    res = minimize_scalar(cost, bounds=(t0 - 0.5, t0 + 0.5), method="bounded",
                          options={"xatol": 1e-4})
    return float(res.x) if res.fun <= cost(t0) else float(t0)


def centerline_scores(pred: np.ndarray, gt: np.ndarray) -> CenterlineScores:
    """nl_dice after removing the optimal axial offset; lscd_error as the raw mean deviation.

    lscd_error keeps the axial component that nl_dice discards, so a pure
    longitudinal shift of a transverse curve shows up as its magnitude.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    swap = (pred.shape, pred.tobytes()) > (gt.shape, gt.tobytes())
    a, b = (gt, pred) if swap else (pred, gt)
    t = optimal_axial_shift(a, b)
    nl = tube_dice(a + _axial(t / 2), b - _axial(t / 2))
    return CenterlineScores(nl, mean_curve_distance(pred, gt), -t if swap else t)


@dataclass
class MorphometryReport:
    femur: dict[str, dict] = field(default_factory=dict)
    ribs: dict[str, dict] = field(default_factory=dict)
    scores: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"femur": self.femur, "ribs": self.ribs, "scores": self.scores,
                           "protocol": "simplified"}, indent=2, sort_keys=True)


def measure(vol: LabelVolume, classes: list[int], reference: LabelVolume | None = None) -> MorphometryReport:
    """Femur parameters for femur classes and centerlines for rib classes (by name),
    plus centerline scores against ``reference`` when given."""
    rep = MorphometryReport()
    for c in classes:
        name = vol.class_names.get(c, str(c))
        if name.startswith("femur"):
            rep.femur[name] = femur_params(vol, c).to_dict()
        else:
            line = rib_centerline(vol, c)
            rep.ribs[name] = line.to_dict()
            if reference is not None and reference.mask(c).any():
                ref = rib_centerline(reference, c)
                rep.scores[name] = centerline_scores(line.points, ref.points).to_dict()
    return rep
