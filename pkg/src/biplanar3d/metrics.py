"""Segmentation and identification metrics: Dice, HD95, L-error and ID-rate.

Per-class values are reported for every class seen in either volume.
Aggregates run over the classes present in the ground truth; classes the
prediction misses score Dice 0 and are left out of the distance means
(or, in strict mode, charged the volume diagonal).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume, class_centroid, surface_voxels

ID_THRESHOLD_MM = 20.0


def _same_grid(pred: LabelVolume, gt: LabelVolume) -> None:
    if pred.dims != gt.dims:
        raise ValueError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")


def dice(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float | None:
    """Overlap in percent; None when the class is absent from both volumes."""
    _same_grid(pred, gt)
    p, g = pred.mask(class_id), gt.mask(class_id)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return None
    return 200.0 * int(np.logical_and(p, g).sum()) / total


def surface_distances(pred: LabelVolume, gt: LabelVolume, class_id: int) -> np.ndarray | None:
    """Both directed nearest-surface distance sets (mm), concatenated."""
    _same_grid(pred, gt)
    sp = surface_voxels(pred, class_id)
    sg = surface_voxels(gt, class_id)
    if len(sp) == 0 or len(sg) == 0:
        return None
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return np.concatenate([d_pg, d_gp])


def hd95(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float | None:
    """95th percentile of the pooled surface distances; None if either side lacks the class."""
    d = surface_distances(pred, gt, class_id)
    return None if d is None else float(np.percentile(d, 95))


def centroid_distance(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float | None:
    a, b = class_centroid(pred, class_id), class_centroid(gt, class_id)
    if a is None or b is None:
        return None
    return float(np.linalg.norm(a - b))


def l_error(pred: LabelVolume, gt: LabelVolume) -> float | None:
    """Mean centroid distance over classes present in both volumes."""
    _same_grid(pred, gt)
    shared = sorted(set(pred.present_classes()) & set(gt.present_classes()))
    if not shared:
        return None
    return float(np.mean([centroid_distance(pred, gt, c) for c in shared]))


def identified(pred: LabelVolume, gt: LabelVolume, threshold_mm: float = ID_THRESHOLD_MM) -> dict[int, bool]:
    """Per ground-truth class: predicted centroid within threshold and nearest of all predicted centroids."""
    _same_grid(pred, gt)
    pred_c = {c: class_centroid(pred, c) for c in pred.present_classes()}
    out = {}
    for c in gt.present_classes():
        g = class_centroid(gt, c)
        if c not in pred_c:
            out[c] = False
            continue
        d_own = float(np.linalg.norm(pred_c[c] - g))
        others = [float(np.linalg.norm(v - g)) for k, v in pred_c.items() if k != c]
        out[c] = d_own < threshold_mm and all(d_own < d for d in others)
    return out


def id_rate(pred: LabelVolume, gt: LabelVolume, threshold_mm: float = ID_THRESHOLD_MM) -> float | None:
    flags = identified(pred, gt, threshold_mm)
    if not flags:
        return None
    return 100.0 * sum(flags.values()) / len(flags)


@dataclass
class ClassMetrics:
    dice: float | None
    hd95: float | None
    l_error: float | None
    identified: bool | None


@dataclass
class MetricsReport:
    per_class: dict[int, ClassMetrics]
    mean_dice: float | None
    mean_hd95: float | None
    mean_l_error: float | None
    id_rate: float | None
    gt_classes: list[int] = field(default_factory=list)
    missing: list[int] = field(default_factory=list)    # in ground truth, absent from prediction
    spurious: list[int] = field(default_factory=list)   # predicted, absent from ground truth
    strict: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): asdict(v) for k, v in self.per_class.items()}
        d["table"] = {"Dice": self.mean_dice, "HD": self.mean_hd95, "L-error": self.mean_l_error,
                      "ID-rate": self.id_rate}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(pred: LabelVolume, gt: LabelVolume, threshold_mm: float = ID_THRESHOLD_MM,
             strict: bool = False) -> MetricsReport:
    _same_grid(pred, gt)
    gt_classes = gt.present_classes()
    pred_classes = pred.present_classes()
    flags = identified(pred, gt, threshold_mm)
    per_class = {}
    for c in sorted(set(gt_classes) | set(pred_classes)):
        per_class[c] = ClassMetrics(dice(pred, gt, c), hd95(pred, gt, c),
                                    centroid_distance(pred, gt, c), flags.get(c))
    worst = float(np.linalg.norm(gt.extent)) if strict else None

    def dist(v):
        return worst if v is None else v

    return MetricsReport(
        per_class=per_class,
        mean_dice=_mean(per_class[c].dice for c in gt_classes),
        mean_hd95=_mean(dist(per_class[c].hd95) for c in gt_classes),
        mean_l_error=_mean(dist(per_class[c].l_error) for c in gt_classes),
        id_rate=100.0 * sum(flags.values()) / len(flags) if flags else None,
        gt_classes=gt_classes,
        missing=[c for c in gt_classes if c not in pred_classes],
        spurious=[c for c in pred_classes if c not in gt_classes],
        strict=strict,
    )


def summarize(reports: list[MetricsReport]) -> dict[str, float | None]:
    """Dataset-level means of the per-case aggregates."""
    keys = ("mean_dice", "mean_hd95", "mean_l_error", "id_rate")
    return {k: _mean(getattr(r, k) for r in reports) for k in keys} | {"n_cases": len(reports)}

