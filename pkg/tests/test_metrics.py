from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biplanar3d.metrics import dice, evaluate, hd95, id_rate, identified, l_error, summarize
from biplanar3d.volume import LabelVolume

K = 3


def _surface_brute(mask):
    pts = []
    H, W, D = mask.shape
    for i in range(H):
        for j in range(W):
            for k in range(D):
                if not mask[i, j, k]:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if not (0 <= a < H and 0 <= b < W and 0 <= c < D) or not mask[a, b, c]:
                        pts.append((i, j, k))
                        break
    return np.array(pts, dtype=float).reshape(-1, 3)


def _oracle(pred, gt, spacing, thr=20.0):
    sp = np.array(spacing)
    out = {}
    centroids_p = {c: (np.argwhere(pred == c) + 0.5).mean(0) * sp for c in range(1, K + 1) if (pred == c).any()}
    centroids_g = {c: (np.argwhere(gt == c) + 0.5).mean(0) * sp for c in range(1, K + 1) if (gt == c).any()}
    for c in range(1, K + 1):
        p, g = pred == c, gt == c
        d = None if p.sum() + g.sum() == 0 else 200.0 * (p & g).sum() / (p.sum() + g.sum())
        h = None
        if p.any() and g.any():
            sp_, sg = (_surface_brute(p) + 0.5) * sp, (_surface_brute(g) + 0.5) * sp
            allp = np.sqrt(((sp_[:, None] - sg[None]) ** 2).sum(-1))
            h = float(np.percentile(np.concatenate([allp.min(1), allp.min(0)]), 95))
        ident = None
        if c in centroids_g:
            if c not in centroids_p:
                ident = False
            else:
                own = np.linalg.norm(centroids_p[c] - centroids_g[c])
                others = [np.linalg.norm(v - centroids_g[c]) for k, v in centroids_p.items() if k != c]
                ident = bool(own < thr and all(own < o for o in others))
        out[c] = (d, h, ident)
    shared = [c for c in centroids_p if c in centroids_g]
    lerr = float(np.mean([np.linalg.norm(centroids_p[c] - centroids_g[c]) for c in shared])) if shared else None
    return out, lerr


vols = st.tuples(st.integers(2, 8), st.integers(2, 8), st.integers(2, 8)).flatmap(
    lambda s: st.tuples(st.just(s), st.integers(0, 2 ** 16)))


@given(vols, st.sampled_from([(1.0, 1.0, 1.0), (0.5, 1.0, 2.0)]), st.floats(0.5, 30.0))
def test_metrics_match_all_pairs_oracle(shape_seed, spacing, thr):
    shape, seed = shape_seed
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, K + 1, shape) * (rng.random(shape) < 0.6)
    pred = np.where(rng.random(shape) < 0.3, rng.integers(0, K + 1, shape), gt)
    P, G = LabelVolume(pred, spacing, K), LabelVolume(gt, spacing, K)
    per, lerr = _oracle(pred, gt, spacing, thr)
    flags = identified(P, G, thr)
    for c, (d, h, ident) in per.items():
        got_d, got_h = dice(P, G, c), hd95(P, G, c)
        assert (got_d is None) == (d is None) and (d is None or abs(got_d - d) < 1e-6)
        assert (got_h is None) == (h is None) and (h is None or abs(got_h - h) < 1e-6)
        assert flags.get(c) == ident
    got_l = l_error(P, G)
    assert (got_l is None) == (lerr is None) and (lerr is None or abs(got_l - lerr) < 1e-6)
    if flags:
        assert abs(id_rate(P, G, thr) - 100.0 * sum(flags.values()) / len(flags)) < 1e-9


@given(vols)
def test_perfect_prediction_scores(shape_seed):
    shape, seed = shape_seed
    gt = np.random.default_rng(seed).integers(0, K + 1, shape)
    if not gt.any():
        gt.flat[0] = 1
    G = LabelVolume(gt, (1.0, 1.0, 1.0), K)
    rep = evaluate(G, G)
    assert (rep.mean_dice, rep.mean_hd95, rep.mean_l_error, rep.id_rate) == (100.0, 0.0, 0.0, 100.0)


def test_missing_class_handling_and_strict_mode():
    gt = np.zeros((6, 6, 6), int)
    gt[:2, :2, :2] = 1
    gt[4:, 4:, 4:] = 2
    pred = gt.copy()
    pred[pred == 2] = 0
    pred[0, 5, 0] = 3
    G, P = LabelVolume(gt, num_classes=K), LabelVolume(pred, num_classes=K)
    rep = evaluate(P, G)
    assert rep.missing == [2] and rep.spurious == [3]
    assert rep.mean_dice == 50.0 and rep.id_rate == 50.0
    assert rep.mean_hd95 == 0.0  # class 2 has no distance and is skipped
    strict = evaluate(P, G, strict=True)
    assert math.isclose(strict.mean_hd95, 0.5 * math.sqrt(3 * 36))
    assert set(rep.per_class) == {1, 2, 3}


def test_identification_requires_nearest_centroid():
    gt = np.zeros((20, 4, 4), int)
    gt[0:4] = 1
    gt[6:10] = 2
    pred = np.zeros_like(gt)
    pred[6:10] = 1   # class 1 predicted where class 2 is
    pred[12:16] = 2
    flags = identified(LabelVolume(pred, num_classes=K), LabelVolume(gt, num_classes=K))
    # class 1: own prediction 6 mm away and nearest; class 2: predicted class 1 sits on it
    assert flags == {1: True, 2: False}


def test_report_schema_and_summary():
    gt = np.zeros((4, 4, 4), int)
    gt[1:3, 1:3, 1:3] = 1
    G = LabelVolume(gt, num_classes=K)
    d = evaluate(G, G).to_dict()
    assert set(d["table"]) == {"Dice", "HD", "L-error", "ID-rate"}
    assert set(d) >= {"per_class", "mean_dice", "mean_hd95", "mean_l_error", "id_rate", "missing"}
    shifted = np.roll(gt, 1, axis=0)
    reps = [evaluate(G, G), evaluate(LabelVolume(shifted, num_classes=K), G)]
    s = summarize(reps)
    assert s["n_cases"] == 2
    assert math.isclose(s["mean_dice"], np.mean([r.mean_dice for r in reps]))
    assert math.isclose(s["mean_l_error"], 0.5)


def test_grid_mismatch_raises():
    with pytest.raises(ValueError):
        evaluate(LabelVolume(np.zeros((2, 2, 2))), LabelVolume(np.zeros((2, 2, 3))))
