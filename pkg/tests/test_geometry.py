import math

import numpy as np
import pytest

from autolabel3d.geometry import (BACK, FRONT, BehindCameraError, Box2D, Box3D,
                                  Calibration, average_precision, box_corners,
                                  diou_loss, direction_class, extract_frustum,
                                  iou_3d, location_error, normalize_angle,
                                  point_in_box, points_in_box, project_point,
                                  resolve_direction, unproject_point)
from autolabel3d.tensor import Graph, Tensor, backward

from oracles import mc_iou3d, random_box, sweep_average_precision


def simple_calib(f=100.0, cu=50.0, cv=40.0):
    # camera frame == lidar frame with z as depth
    P = np.array([[f, 0.0, cu, 0.0], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    Tr = np.hstack([np.eye(3), np.zeros((3, 1))])
    return Calibration(P=P, R0=np.eye(3), Tr=Tr)


# -- types -------------------------------------------------------------------

def test_box3d_rejects_non_positive_dims():
    with pytest.raises(ValueError, match="non-positive"):
        Box3D(0, 0, 0, 1.0, 0.0, 1.0, 0.0)


def test_box3d_normalizes_yaw():
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).ry == pytest.approx(-math.pi)


def test_box2d_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        Box2D(10, 10, 10, 20)


# -- projection --------------------------------------------------------------

def test_project_optical_axis():
    u, v, depth = project_point((0.0, 0.0, 5.0), simple_calib())
    assert (u, v) == (50.0, 40.0)
    assert depth == 5.0


def test_project_similar_triangles():
    u, v, _ = project_point((5.0 * 0.3, 0.0, 5.0), simple_calib())
    assert u == pytest.approx(50.0 + 100.0 * 0.3)
    assert v == 40.0


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project_point((0.0, 0.0, -1.0), simple_calib())


def test_unproject_round_trip(rng):
    calib = simple_calib()
    pts = rng.uniform([-5, -5, 2], [5, 5, 30], size=(1000, 3))
    for p in pts:
        u, v, depth = project_point(p, calib)
        assert np.abs(unproject_point(u, v, depth, calib) - p).max() < 1e-9


def test_extract_frustum_full_image(rng):
    calib = simple_calib()
    cloud = rng.uniform([-5, -5, 1], [5, 5, 20], size=(200, 3))
    box = Box2D(-1e9, -1e9, 1e9, 1e9)
    assert len(extract_frustum(cloud, box, calib)) == 200


def test_extract_frustum_matches_brute_force(rng):
    calib = simple_calib()
    cloud = rng.uniform([-5, -5, -5], [5, 5, 20], size=(500, 3))
    box = Box2D(30, 25, 70, 55)
    idx = set(extract_frustum(cloud, box, calib).tolist())
    expected = set()
    for i, p in enumerate(cloud):
        try:
            u, v, _ = project_point(p, calib)
        except BehindCameraError:
            continue
        if box.contains(u, v):
            expected.add(i)
    assert idx == expected


def test_extract_frustum_empty():
    calib = simple_calib()
    cloud = np.array([[0.0, 0.0, 5.0, 0.0]])
    assert len(extract_frustum(cloud, Box2D(200, 200, 210, 210), calib)) == 0


# -- corners / containment ---------------------------------------------------

def test_unit_cube_corners():
    corners = box_corners(Box3D(0, 0, 0, 1, 1, 1, 0.0))
    assert sorted(map(tuple, np.round(corners, 12))) == sorted(
        (x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5))


def test_quarter_turn_swaps_extents():
    corners = box_corners(Box3D(0, 0, 0, 4, 2, 1, math.pi / 2))
    assert corners[:, 0].max() - corners[:, 0].min() == pytest.approx(2.0)
    assert corners[:, 1].max() - corners[:, 1].min() == pytest.approx(4.0)


def test_corner_centroid_is_center(rng):
    for _ in range(20):
        b = random_box(rng)
        c = box_corners(b).mean(axis=0)
        assert np.abs(c - [b.cx, b.cy, b.cz]).max() < 1e-12


def test_point_in_box_center_and_outside():
    b = Box3D(1, 2, 3, 4, 2, 1.5, 0.7)
    assert point_in_box((1, 2, 3), b)
    corner = box_corners(b)[0]
    outward = corner + (corner - [b.cx, b.cy, b.cz]) * 1e-6
    assert not point_in_box(outward, b)


def test_points_in_box_rotation_oracle(rng):
    b = random_box(rng)
    pts = rng.uniform(-25, 25, size=(10000, 3))
    # independent implementation via an explicit rotation matrix
    R = np.array([[math.cos(b.ry), -math.sin(b.ry), 0],
                  [math.sin(b.ry), math.cos(b.ry), 0], [0, 0, 1]])
    local = (pts - [b.cx, b.cy, b.cz]) @ R
    expected = np.all(np.abs(local) <= [b.l / 2, b.w / 2, b.h / 2], axis=1)
    assert np.array_equal(points_in_box(pts, b), expected)


# -- IoU ---------------------------------------------------------------------

def test_iou_identical():
    b = Box3D(1, 2, -1, 4, 2, 1.5, 0.3)
    assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)


def test_iou_disjoint():
    a = Box3D(0, 0, 0, 4, 2, 1.5, 0.0)
    b = Box3D(10, 0, 0, 4, 2, 1.5, 0.0)
    assert iou_3d(a, b) == 0.0


def test_iou_quarter_turn_analytic():
    a = Box3D(0, 0, 0, 4, 2, 1.5, 0.0)
    b = Box3D(0, 0, 0, 4, 2, 1.5, math.pi / 2)
    # BEV intersection 2x2, union 4*2*2 - 4 = 12 -> 1/3 in 3D too
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_iou_symmetric_and_pi_invariant(rng):
    for _ in range(20):
        a, b = random_box(rng, 4.0), random_box(rng, 4.0)
        assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)
        flipped = Box3D(a.cx, a.cy, a.cz, a.l, a.w, a.h, a.ry + math.pi)
        assert iou_3d(flipped, b) == pytest.approx(iou_3d(a, b), abs=1e-9)


def test_iou_against_monte_carlo(rng):
    for i in range(10):
        a = random_box(rng, 3.0)
        b = random_box(rng, 3.0)
        assert iou_3d(a, b) == pytest.approx(
            mc_iou3d(a, b, n_samples=200_000, seed=i), abs=2e-2)


# -- dIoU --------------------------------------------------------------------

def test_diou_zero_on_match():
    b = Box3D(3, -2, 0.5, 4.2, 1.8, 1.5, 0.4)
    assert float(diou_loss(b.as_array(), b)) == pytest.approx(0.0, abs=1e-12)


def test_diou_exceeds_one_when_separated():
    gt = Box3D(0, 0, 0, 4, 2, 1.5, 0.0)
    near = diou_loss(Box3D(20, 0, 0, 4, 2, 1.5, 0.0).as_array(), gt)
    far = diou_loss(Box3D(40, 0, 0, 4, 2, 1.5, 0.0).as_array(), gt)
    assert float(near) > 1.0
    assert float(far) > float(near)


def test_diou_nonnegative(rng):
    gt = random_box(rng, 5.0)
    for _ in range(50):
        assert float(diou_loss(random_box(rng, 5.0).as_array(), gt)) >= 0.0


def test_diou_gradient_matches_finite_differences():
    gt = Box3D(10.0, 2.0, -0.8, 4.2, 1.7, 1.5, 0.35)
    vals = np.array([10.4, 1.7, -0.6, 4.0, 1.8, 1.4, 0.6])
    pred = Tensor(vals.copy(), requires_grad=True)
    with Graph():
        backward(diou_loss([pred[i] for i in range(7)], gt))
    h = 1e-6
    for i in range(7):
        bumped = vals.copy()
        bumped[i] += h
        fp = float(diou_loss(list(bumped), gt))
        bumped[i] -= 2 * h
        fm = float(diou_loss(list(bumped), gt))
        num = (fp - fm) / (2 * h)
        assert abs(pred.grad[i] - num) / max(abs(num), 1e-6) < 1e-3


# -- direction ---------------------------------------------------------------

def test_direction_boundaries():
    assert direction_class(0.0) == FRONT
    assert direction_class(-math.pi / 2) == FRONT
    assert direction_class(math.pi / 2) == BACK
    assert direction_class(math.pi - 1e-9) == BACK


def test_resolve_direction_rules():
    b = Box3D(0, 0, 0, 4, 2, 1.5, 0.0)
    assert resolve_direction(b, FRONT).ry == 0.0
    assert resolve_direction(b, BACK).ry == pytest.approx(-math.pi)


def test_resolve_direction_preserves_iou(rng):
    for _ in range(20):
        b, g = random_box(rng, 3.0), random_box(rng, 3.0)
        d = int(rng.integers(0, 2))
        assert iou_3d(resolve_direction(b, d), g) == pytest.approx(
            iou_3d(b, g), abs=1e-12)


def test_normalize_angle_range(rng):
    for a in rng.uniform(-30, 30, size=100):
        n = normalize_angle(a)
        assert -math.pi <= n < math.pi
        assert math.cos(n) == pytest.approx(math.cos(a), abs=1e-9)


# -- metrics -----------------------------------------------------------------

def test_location_error_345():
    a = Box3D(0, 0, 0, 1, 1, 1, 0)
    b = Box3D(3, 4, 0, 1, 1, 1, 0)
    c = Box3D(3, 4, 7, 1, 1, 1, 0)
    assert location_error(a, a) == 0.0
    assert location_error(a, b) == 5.0
    assert location_error(a, c) == 5.0     # height excluded


def test_ap_single_tp_and_fp():
    gt = Box3D(0, 0, 0, 4, 2, 1.5, 0.0)
    tp = Box3D(0.2, 0, 0, 4, 2, 1.5, 0.0)
    assert iou_3d(tp, gt) >= 0.7
    for mode in ("11-point", "R40"):
        assert average_precision([(tp, 0.9)], [gt], 0.7, mode) == 1.0
    fp = Box3D(2.5, 0, 0, 4, 2, 1.5, 0.0)
    assert iou_3d(fp, gt) < 0.7
    for mode in ("11-point", "R40"):
        assert average_precision([(fp, 0.9)], [gt], 0.7, mode) == 0.0


def test_ap_no_ground_truth_is_none():
    assert average_precision([(Box3D(0, 0, 0, 1, 1, 1, 0), 0.5)], []) is None


def test_ap_matches_threshold_sweep_oracle(rng):
    for trial in range(20):
        gts = [random_box(rng, 5.0) for _ in range(int(rng.integers(1, 5)))]
        dets = []
        for _ in range(int(rng.integers(1, 8))):
            base = gts[int(rng.integers(0, len(gts)))]
            jit = rng.normal(scale=rng.uniform(0.05, 2.0), size=3)
            dets.append((Box3D(base.cx + jit[0], base.cy + jit[1],
                               base.cz + jit[2], base.l, base.w, base.h,
                               base.ry), float(rng.random())))
        for mode in ("11-point", "R40"):
            assert average_precision(dets, gts, 0.7, mode) == pytest.approx(
                sweep_average_precision(dets, gts, 0.7, mode), abs=1e-15)


def test_ap_score_monotone_invariance(rng):
    gts = [random_box(rng, 5.0) for _ in range(3)]
    dets = [(random_box(rng, 5.0), float(s))
            for s in rng.uniform(0.1, 0.9, size=6)]
    ref = average_precision(dets, gts, 0.5, "R40")
    squashed = [(b, s ** 3 + 1.0) for b, s in dets]
    assert average_precision(squashed, gts, 0.5, "R40") == ref
