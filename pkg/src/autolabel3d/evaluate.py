"""Score generated annotations against ground truth."""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_3d, location_error
from .kitti_io import read_calib_file, read_label_file


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    n_gt: int = 0
    n_matched: int = 0
    miou: float = float("nan")
    recall_iou: float = float("nan")
    mean_le: float = float("nan")
    recall_le: float = float("nan")
    ap_11: float | None = None
    ap_r40: float | None = None
    iou_thresh: float = 0.7
    le_thresh: float = 0.5
    per_difficulty_ap: dict = field(default_factory=dict)

    def as_records(self):
        rec = {"n_gt": self.n_gt, "n_matched": self.n_matched,
               "miou": self.miou, "recall_iou": self.recall_iou,
               "mean_le": self.mean_le, "recall_le": self.recall_le,
               "ap_11": self.ap_11, "ap_r40": self.ap_r40,
               "iou_thresh": self.iou_thresh, "le_thresh": self.le_thresh}
        for tag, ap in sorted(self.per_difficulty_ap.items()):
            rec[f"ap_r40_difficulty_{tag}"] = ap
        return rec

    def as_table(self):
        lines = ["metric                value",
                 "--------------------  ----------"]
        for k, v in self.as_records().items():
            if isinstance(v, float):
                lines.append(f"{k:<20}  {v:.4f}")
            else:
                lines.append(f"{k:<20}  {v}")
        return "\n".join(lines)


def _match_by_box2d(pred_objs, gt_objs):
    """One-to-one association by 2D box identity (autolabel mode)."""
    pairs = []
    used = [False] * len(pred_objs)
    for g in gt_objs:
        best, best_d = -1, float("inf")
        for j, p in enumerate(pred_objs):
            if used[j] or p.box3d is None:
                continue
            d = math.hypot(p.box2d.u_min - g.box2d.u_min,
                           p.box2d.v_min - g.box2d.v_min) \
                + math.hypot(p.box2d.u_max - g.box2d.u_max,
                             p.box2d.v_max - g.box2d.v_max)
            if d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
            pairs.append((pred_objs[best], g))
    return pairs


def score_annotations(pred_dir, gt_root, frame_ids=None, iou_thresh=0.7,
                      le_thresh=0.5, cls="Car", detection_mode=False):
    """Compare predicted label files with ground-truth ones.

    pred_dir holds one label file per frame; gt_root is a dataset root
    (calib/ and label_2/). Autolabel mode pairs objects one-to-one through
    their 2D boxes; detection mode relies on AP's greedy score matching.
    """
    if frame_ids is None:
        frame_ids = sorted(os.path.splitext(f)[0] for f in os.listdir(pred_dir)
                           if f.endswith(".txt"))
    ious, les = [], []
    per_frame = []     # (detections, gt_objects) for AP
    n_gt = 0
    for frame_id in frame_ids:
        pred_path = os.path.join(pred_dir, f"{frame_id}.txt")
        gt_path = os.path.join(gt_root, "label_2", f"{frame_id}.txt")
        if not os.path.exists(pred_path):
            raise EvalError(f"no prediction file for frame {frame_id}")
        if not os.path.exists(gt_path):
            raise EvalError(f"no ground-truth file for frame {frame_id}")
        calib = read_calib_file(os.path.join(gt_root, "calib", f"{frame_id}.txt"))
        preds = [o for o in read_label_file(pred_path, calib) if o.cls == cls]
        gts = [o for o in read_label_file(gt_path, calib)
               if o.cls == cls and o.box3d is not None]
        n_gt += len(gts)
        detections = [(o.box3d, o.score if o.score is not None else 1.0)
                      for o in preds if o.box3d is not None]
        per_frame.append((detections, gts))
        for p, g in _match_by_box2d(preds, gts):
            ious.append(iou_3d(p.box3d, g.box3d))
            les.append(location_error(p.box3d, g.box3d))

    report = EvalReport(n_gt=n_gt, n_matched=len(ious),
                        iou_thresh=iou_thresh, le_thresh=le_thresh)
    if ious:
        ious = np.asarray(ious)
        les = np.asarray(les)
        report.miou = float(ious.mean())
        report.recall_iou = float((ious >= iou_thresh).mean())
        report.mean_le = float(les.mean())
        report.recall_le = float((les <= le_thresh).mean())
    if n_gt:
        boxed = [(d, [g.box3d for g in gts]) for d, gts in per_frame]
        report.ap_11 = pooled_average_precision(boxed, iou_thresh, "11-point")
        report.ap_r40 = pooled_average_precision(boxed, iou_thresh, "R40")
        tags = {g.difficulty for _, gts in per_frame for g in gts}
        for tag in tags:
            frames = [(d, [g.box3d for g in gts if g.difficulty == tag])
                      for d, gts in per_frame]
            ap = pooled_average_precision(frames, iou_thresh, "R40")
            if ap is not None:
                report.per_difficulty_ap[tag] = ap
    return report


def pooled_average_precision(per_frame, iou_thresh, mode):
    """AP with per-frame greedy matching pooled over all frames."""
    from .geometry import _pr_curve

    scored = []
    n_gt = 0
    for detections, gts in per_frame:
        n_gt += len(gts)
        if not detections:
            continue
        order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
        tp, _ = _pr_curve(detections, gts, iou_thresh)
        for rank, i in enumerate(order):
            scored.append((detections[i][1], tp[rank]))
    if n_gt == 0:
        return None
    if not scored:
        return 0.0
    scored.sort(key=lambda x: -x[0])
    precisions, recalls = [], []
    n_tp = 0
    for i, (_, hit) in enumerate(scored):
        n_tp += int(hit)
        precisions.append(n_tp / (i + 1))
        recalls.append(n_tp / n_gt)
    if mode == "11-point":
        points = [i / 10.0 for i in range(11)]
    else:
        points = [i / 40.0 for i in range(1, 41)]
    total = 0.0
    for r in points:
        ps = [p for p, rec in zip(precisions, recalls) if rec >= r]
        total += max(ps) if ps else 0.0
    return total / len(points)


def write_report(report, path):
    """Emit both the human-readable table and key=value records."""
    with open(path, "w") as fh:
        fh.write(report.as_table() + "\n\n")
        for k, v in report.as_records().items():
            fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")
