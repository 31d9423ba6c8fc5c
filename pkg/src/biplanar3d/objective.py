"""Training objective: per-stream DiceCE against the labels plus a symmetric
cross-stream KL term that pushes the coronal and sagittal predictions to agree.

    total = 1/2 * (single(p, y) + cross(p, q) + single(q, y) + cross(q, p))
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diff import ops
from .diff.array import DiffArray, as_array, scope
from .volume import LabelVolume

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-8


def one_hot(labels, n_channels: int) -> np.ndarray:
    labels = np.asarray(labels.voxels if isinstance(labels, LabelVolume) else labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_channels):
        raise ValueError(f"labels outside [0, {n_channels - 1}]")
    return np.eye(n_channels)[labels.astype(np.int64)]


def _check(pred: DiffArray, y) -> tuple[DiffArray, np.ndarray]:
    pred = as_array(pred)
    labels = y.voxels if isinstance(y, LabelVolume) else np.asarray(y)
    if pred.shape[:-1] != labels.shape:
        raise ValueError(f"prediction grid {pred.shape[:-1]} != label grid {labels.shape}")
    if isinstance(y, LabelVolume) and pred.shape[-1] != y.num_classes + 1:
        raise ValueError(f"prediction has {pred.shape[-1]} channels, labels need {y.num_classes + 1}")
    return pred, one_hot(labels, pred.shape[-1]).astype(pred.dtype)


def dice_ce_loss(pred: DiffArray, y, smooth: float = DICE_SMOOTH) -> DiffArray:
    """Mean foreground (1 - soft Dice) plus voxel-mean cross-entropy.

    ``pred`` is a (H, W, D, K+1) probability volume; ``y`` a LabelVolume or an
    integer array with values in 0..K.
    """
    pred, target = _check(pred, y)
    axes = tuple(range(pred.ndim - 1))
    fg = pred[..., 1:]
    tfg = target[..., 1:]
    inter = ops.sum(ops.mul(fg, tfg), axis=axes)
    denom = ops.add(ops.sum(fg, axis=axes), tfg.sum(axis=axes))
    dice = ops.div(ops.add(ops.scale(inter, 2.0), smooth), ops.add(denom, smooth))
    dice_term = ops.sub(1.0, ops.mean(dice))
    logp = ops.log(ops.clamp_min(pred, PROB_FLOOR))
    ce = ops.neg(ops.mean(ops.sum(ops.mul(logp, target), axis=-1)))
    return ops.add(dice_term, ce)


def kl_cross_loss(p: DiffArray, q: DiffArray, reduction: str = "mean") -> DiffArray:
    """Per-voxel KL(p || q) over classes, averaged (or summed) over voxels."""
    p, q = as_array(p), as_array(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    log_ratio = ops.sub(ops.log(ops.clamp_min(p, PROB_FLOOR)), ops.log(ops.clamp_min(q, PROB_FLOOR)))
    per_voxel = ops.sum(ops.mul(p, log_ratio), axis=-1)
    if reduction == "mean":
        return ops.mean(per_voxel)
    if reduction == "sum":
        return ops.sum(per_voxel)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossBreakdown:
    total: float
    single_cor: float
    single_sag: float
    cross_cor_sag: float
    cross_sag_cor: float
    graph: DiffArray | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "single_cor": self.single_cor, "single_sag": self.single_sag,
                "cross_cor_sag": self.cross_cor_sag, "cross_sag_cor": self.cross_sag_cor}


def total_loss(p: DiffArray, q: DiffArray, y, kl_reduction: str = "mean",
               cross_weight: float = 1.0) -> LossBreakdown:
    """Combine both streams' supervised losses with the two cross terms.

    ``cross_weight = 0`` leaves the KL terms out of the graph entirely and
    reports them as 0.
    """
    with scope("objective"):
        s_cor = dice_ce_loss(p, y)
        s_sag = dice_ce_loss(q, y)
        graph = ops.add(s_cor, s_sag)
        c_pq = c_qp = 0.0
        if cross_weight != 0.0:
            kl_pq = kl_cross_loss(p, q, kl_reduction)
            kl_qp = kl_cross_loss(q, p, kl_reduction)
            cross = ops.add(kl_pq, kl_qp)
            if cross_weight != 1.0:
                cross = ops.scale(cross, cross_weight)
            graph = ops.add(graph, cross)
            c_pq, c_qp = float(kl_pq.value), float(kl_qp.value)
        graph = ops.scale(graph, 0.5)
    return LossBreakdown(float(graph.value), float(s_cor.value), float(s_sag.value),
                         c_pq, c_qp, graph)
