"""Independent oracles used by the unit and acceptance tests.

These deliberately avoid the library's own polygon-clipping and
precision-curve code paths: IoU comes from Monte-Carlo volume sampling,
AP from an exhaustive sweep over score thresholds.
"""

import numpy as np

from autolabel3d.geometry import box_corners, iou_3d, points_in_box


def mc_iou3d(a, b, n_samples=1_000_000, seed=0):
    """Monte-Carlo volume IoU over the joint axis-aligned bounding region."""
    corners = np.vstack([box_corners(a), box_corners(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def _greedy_counts(detections, gts, iou_thresh):
    """(n_tp, n_det) under greedy score-descending matching."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = [False] * len(gts)
    n_tp = 0
    for i in order:
        best_j, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            v = iou_3d(detections[i][0], g)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            n_tp += 1
    return n_tp, len(detections)


def sweep_average_precision(detections, gts, iou_thresh, mode):
    """AP by evaluating precision/recall at every score threshold."""
    if not gts:
        return None
    if not detections:
        return 0.0
    curve = []
    for t in sorted({s for _, s in detections}, reverse=True):
        subset = [d for d in detections if d[1] >= t]
        n_tp, n_det = _greedy_counts(subset, gts, iou_thresh)
        curve.append((n_tp / n_det, n_tp / len(gts)))
    if mode == "11-point":
        points = [i / 10.0 for i in range(11)]
    else:
        points = [i / 40.0 for i in range(1, 41)]
    total = 0.0
    for r in points:
        ps = [p for p, rec in curve if rec >= r]
        total += max(ps) if ps else 0.0
    return total / len(points)


def random_box(rng, center_scale=20.0):
    from autolabel3d.geometry import Box3D

    return Box3D(rng.uniform(-center_scale, center_scale),
                 rng.uniform(-center_scale, center_scale),
                 rng.uniform(-2.0, 2.0),
                 rng.uniform(1.0, 5.0), rng.uniform(1.0, 3.0),
                 rng.uniform(1.0, 2.5), rng.uniform(-np.pi, np.pi))
