import numpy as np
import pytest

from autolabel3d.evaluate import (EvalError, EvalReport,
                                  pooled_average_precision, score_annotations,
                                  write_report)
from autolabel3d.geometry import (Box2D, Box3D, Calibration, average_precision,
                                  iou_3d)
from autolabel3d.kitti_io import (ObjectAnnotation, write_calib_file,
                                  write_label_file)


def _calib(f=100.0, cu=50.0, cv=40.0):
    P = np.array([[f, 0.0, cu, 0.0], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return Calibration(P=P, R0=np.eye(3), Tr=np.hstack([np.eye(3), np.zeros((3, 1))]))


def _write_dataset(root, gt_frames, pred_frames):
    """gt_frames/pred_frames: {frame_id: [ObjectAnnotation, ...]}."""
    calib = _calib()
    gt_root = root / "gt"
    pred_dir = root / "pred"
    for sub in ("calib", "label_2"):
        (gt_root / sub).mkdir(parents=True)
    pred_dir.mkdir()
    for frame_id, objs in gt_frames.items():
        write_calib_file(gt_root / "calib" / f"{frame_id}.txt", calib)
        write_label_file(gt_root / "label_2" / f"{frame_id}.txt", objs, calib)
    for frame_id, objs in pred_frames.items():
        write_label_file(pred_dir / f"{frame_id}.txt", objs, calib)
    return str(pred_dir), str(gt_root)


def _obj(box3d, box2d=None, score=None):
    if box2d is None:
        # a distinctive 2D box keyed to the 3D center for 1:1 matching
        box2d = Box2D(10 * box3d.cx, 10 * box3d.cy + 500.0,
                      10 * box3d.cx + 5.0, 10 * box3d.cy + 505.0)
    return ObjectAnnotation("Car", box2d, box3d, score=score)


def _box_with_iou(gt, iou):
    """Shift an axis-aligned box along x so the pair has exactly this IoU."""
    delta = gt.l * (1.0 - iou) / (1.0 + iou)
    return Box3D(gt.cx + delta, gt.cy, gt.cz, gt.l, gt.w, gt.h, gt.ry)


def test_box_with_iou_helper():
    gt = Box3D(10.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0)
    for target in (0.9, 0.72, 0.3):
        assert iou_3d(_box_with_iou(gt, target), gt) == pytest.approx(target, abs=1e-12)


def test_identical_predictions_are_perfect(tmp_path):
    gts = [Box3D(8.0 + 6 * i, (-1.0) ** i * 2.0, -0.5, 4.0, 1.7, 1.5, 0.3 * i)
           for i in range(3)]
    frames = {"000000": [_obj(b) for b in gts[:2]], "000001": [_obj(gts[2])]}
    pred_dir, gt_root = _write_dataset(tmp_path, frames, frames)
    rep = score_annotations(pred_dir, gt_root)
    assert rep.n_gt == rep.n_matched == 3
    assert rep.miou == pytest.approx(1.0, abs=1e-9)
    assert rep.recall_iou == 1.0
    assert rep.mean_le == pytest.approx(0.0, abs=1e-9)
    assert rep.recall_le == 1.0
    assert rep.ap_11 == pytest.approx(1.0, abs=1e-12)
    assert rep.ap_r40 == pytest.approx(1.0, abs=1e-12)


def test_offset_predictions_have_zero_recall(tmp_path):
    gts = [Box3D(10.0, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0),
           Box3D(18.0, 3.0, -0.5, 4.2, 1.6, 1.4, 0.7)]
    moved = [Box3D(g.cx + 10.0, g.cy, g.cz, g.l, g.w, g.h, g.ry) for g in gts]
    gt_frames = {"000000": [_obj(b) for b in gts]}
    pred_frames = {"000000": [_obj(m, box2d=_obj(g).box2d)
                              for m, g in zip(moved, gts)]}
    pred_dir, gt_root = _write_dataset(tmp_path, gt_frames, pred_frames)
    rep = score_annotations(pred_dir, gt_root)
    assert rep.n_matched == 2
    assert rep.recall_iou == 0.0
    assert rep.recall_le == 0.0
    assert rep.mean_le == pytest.approx(10.0, abs=1e-9)


def test_five_object_fixture(tmp_path):
    # five matched pairs with IoUs {0.9, 0.8, 0.72, 0.6, 0.3}
    target_ious = [0.9, 0.8, 0.72, 0.6, 0.3]
    gts, preds = [], []
    for i, iou in enumerate(target_ious):
        gt = Box3D(8.0 + 7 * i, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0)
        gts.append(_obj(gt))
        preds.append(_obj(_box_with_iou(gt, iou), box2d=_obj(gt).box2d))
    pred_dir, gt_root = _write_dataset(
        tmp_path, {"000000": gts}, {"000000": preds})
    rep = score_annotations(pred_dir, gt_root)
    assert rep.n_gt == rep.n_matched == 5
    assert rep.miou == pytest.approx(0.664, abs=1e-9)
    assert rep.recall_iou == pytest.approx(0.6, abs=1e-12)


def test_missing_prediction_file_is_data_error(tmp_path):
    gts = {"000000": [_obj(Box3D(10.0, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0))]}
    pred_dir, gt_root = _write_dataset(tmp_path, gts, gts)
    with pytest.raises(EvalError, match="no prediction"):
        score_annotations(pred_dir, gt_root, frame_ids=["000000", "000042"])


def test_empty_gt_yields_na_fields(tmp_path):
    pred_dir, gt_root = _write_dataset(
        tmp_path, {"000000": []},
        {"000000": [_obj(Box3D(10.0, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0))]})
    rep = score_annotations(pred_dir, gt_root)
    assert rep.n_gt == 0 and rep.n_matched == 0
    assert np.isnan(rep.miou)
    assert rep.ap_11 is None and rep.ap_r40 is None


def test_extra_predictions_lower_ap_not_miou(tmp_path):
    gt = Box3D(10.0, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0)
    false_pos = _obj(Box3D(30.0, 8.0, -0.5, 4.0, 1.7, 1.5, 0.0),
                     box2d=Box2D(300.0, 10.0, 320.0, 30.0), score=0.9)
    preds = {"000000": [_obj(gt, score=0.8), false_pos]}
    pred_dir, gt_root = _write_dataset(tmp_path, {"000000": [_obj(gt)]}, preds)
    rep = score_annotations(pred_dir, gt_root)
    assert rep.miou == pytest.approx(1.0, abs=1e-9)
    # the higher-scoring false positive caps precision at 1/2 at full recall
    assert rep.ap_r40 < 1.0


def test_pooled_ap_matches_single_frame_ap(rng):
    from oracles import random_box

    for _ in range(20):
        gts = [random_box(rng) for _ in range(int(rng.integers(1, 5)))]
        dets = [(random_box(rng), float(s))
                for s in rng.permutation(rng.integers(2, 8))]
        pooled = pooled_average_precision([(dets, gts)], 0.5, "R40")
        assert pooled == pytest.approx(
            average_precision(dets, gts, 0.5, "R40"), abs=1e-12)


def test_pooled_ap_empty_cases():
    assert pooled_average_precision([([], [])], 0.7, "R40") is None
    gt = Box3D(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0)
    assert pooled_average_precision([([], [gt])], 0.7, "R40") == 0.0


def test_per_difficulty_breakdown(tmp_path):
    # a truncated object lands in a harder difficulty bucket than a clean one
    easy = ObjectAnnotation("Car", Box2D(100.0, 100.0, 160.0, 160.0),
                            Box3D(10.0, 0.0, -0.5, 4.0, 1.7, 1.5, 0.0))
    hard = ObjectAnnotation("Car", Box2D(200.0, 100.0, 260.0, 160.0),
                            Box3D(20.0, 3.0, -0.5, 4.0, 1.7, 1.5, 0.0),
                            truncated=0.6, occluded=2)
    assert easy.difficulty != hard.difficulty
    frames = {"000000": [easy, hard]}
    pred_dir, gt_root = _write_dataset(tmp_path, frames, frames)
    rep = score_annotations(pred_dir, gt_root)
    assert set(rep.per_difficulty_ap) == {easy.difficulty, hard.difficulty}
    # each bucket keeps every detection but only its own ground truth; with
    # tied scores input order decides, so the first-listed object's bucket
    # sees its true positive first (AP 1.0) and the other bucket sees a false
    # positive first (AP 0.5)
    assert rep.per_difficulty_ap[easy.difficulty] == pytest.approx(1.0, abs=1e-12)
    assert rep.per_difficulty_ap[hard.difficulty] == pytest.approx(0.5, abs=1e-12)


def test_write_report_round_trip(tmp_path):
    rep = EvalReport(n_gt=4, n_matched=3, miou=0.75, recall_iou=0.5,
                     mean_le=0.2, recall_le=1.0, ap_11=0.8, ap_r40=0.9)
    path = tmp_path / "report.txt"
    write_report(rep, path)
    text = path.read_text()
    assert "miou" in text
    records = dict(line.split("=", 1) for line in text.splitlines()
                   if "=" in line)
    assert float(records["miou"]) == 0.75
    assert int(records["n_gt"]) == 4
