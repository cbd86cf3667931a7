"""Oriented 3D boxes, camera projection, rotated IoU and detection metrics.

Boxes live in the LiDAR frame: x forward, y left, z up; yaw rotates about
the vertical z axis. The polygon/IoU helpers are written against plain
scalar arithmetic so they accept either floats (fast metric path) or
scalar autodiff tensors (the box-loss path); comparisons only ever look at
values, so the tensor path stays piecewise-differentiable.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

FRONT = 0
BACK = 1


class BehindCameraError(ValueError):
    pass


def normalize_angle(a):
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class Box3D:
    """7-parameter oriented box: center (m), dimensions (m), yaw (rad)."""
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    ry: float

    def __post_init__(self):
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"non-positive box dimensions ({self.l}, {self.w}, {self.h})")
        self.ry = normalize_angle(self.ry)

    @property
    def volume(self):
        return self.l * self.w * self.h

    def as_array(self):
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.ry])


@dataclass
class Box2D:
    """Pixel-space axis-aligned box."""
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate 2D box {self}")

    def contains(self, u, v):
        return self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min


@dataclass
class Calibration:
    """KITTI-style projection chain: image = P . R0 . Tr . X_lidar."""
    P: np.ndarray            # 3x4 intrinsic projection
    R0: np.ndarray           # 3x3 rectification
    Tr: np.ndarray           # 3x4 rigid LiDAR -> camera reference

    def lidar_to_rect(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ref = pts @ self.Tr[:, :3].T + self.Tr[:, 3]
        return ref @ self.R0.T

    def rect_to_lidar(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ref = pts @ np.linalg.inv(self.R0).T
        return (ref - self.Tr[:, 3]) @ np.linalg.inv(self.Tr[:, :3]).T

    def rect_to_image(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        hom = np.hstack([pts, np.ones((len(pts), 1))]) @ self.P.T
        depth = hom[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = hom[:, :2] / depth[:, None]
        return uv, depth


def project_points(pts, calib):
    """Vectorized projection; returns (uv [N,2], depth [N]). No depth check."""
    return calib.rect_to_image(calib.lidar_to_rect(pts))


def project_point(p, calib):
    uv, depth = project_points(np.asarray(p, dtype=np.float64)[None], calib)
    if depth[0] <= 0:
        raise BehindCameraError(f"point {tuple(p)} has camera depth {depth[0]:.3f} <= 0")
    return uv[0, 0], uv[0, 1], depth[0]


def unproject_point(u, v, depth, calib):
    """Closed-form inverse of project_point for a known depth."""
    K = calib.P[:, :3]
    t = calib.P[:, 3]
    rect = np.linalg.solve(K, depth * np.array([u, v, 1.0]) - t)
    return calib.rect_to_lidar(rect[None])[0]


def extract_frustum(cloud, box2d, calib):
    """Indices of points projecting inside the 2D box with positive depth.

    Boundaries are inclusive. ``cloud`` is [N,3] or [N,4] (xyz + extras).
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.intp)
    uv, depth = project_points(cloud[:, :3], calib)
    keep = (depth > 0) \
        & (uv[:, 0] >= box2d.u_min) & (uv[:, 0] <= box2d.u_max) \
        & (uv[:, 1] >= box2d.v_min) & (uv[:, 1] <= box2d.v_max)
    return np.flatnonzero(keep)


# -- corners / containment --------------------------------------------------

def box_corners(box):
    """8 corners, [8,3]: bottom face counter-clockwise seen from above
    (+l+w, -l+w, -l-w, +l-w in the yaw frame), then the top face in the
    same order."""
    c, s = math.cos(box.ry), math.sin(box.ry)
    out = np.empty((8, 3))
    i = 0
    for dz in (-box.h / 2.0, box.h / 2.0):
        for dx, dy in ((box.l / 2, box.w / 2), (-box.l / 2, box.w / 2),
                       (-box.l / 2, -box.w / 2), (box.l / 2, -box.w / 2)):
            out[i] = (box.cx + dx * c - dy * s,
                      box.cy + dx * s + dy * c,
                      box.cz + dz)
            i += 1
    return out


def points_in_box(points, box):
    """Boolean mask: inclusive containment in the yaw-aligned box frame."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points - np.array([box.cx, box.cy, box.cz])
    c, s = math.cos(box.ry), math.sin(box.ry)
    x = d[:, 0] * c + d[:, 1] * s
    y = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(x) <= box.l / 2) & (np.abs(y) <= box.w / 2) \
        & (np.abs(d[:, 2]) <= box.h / 2)


def point_in_box(p, box):
    return bool(points_in_box(np.asarray(p)[None], box)[0])


# -- generic scalar helpers (float or scalar Tensor) ------------------------

def _cos(x):
    return x.cos() if isinstance(x, Tensor) else math.cos(x)


def _sin(x):
    return x.sin() if isinstance(x, Tensor) else math.sin(x)


def _sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else math.sqrt(x)


def _pick_max(a, b):
    return a if float(a) >= float(b) else b


def _pick_min(a, b):
    return a if float(a) <= float(b) else b


def _bev_corners_generic(cx, cy, l, w, ry):
    """BEV footprint corners, counter-clockwise."""
    c, s = _cos(ry), _sin(ry)
    pts = []
    for dx, dy in ((l * 0.5, w * 0.5), (l * -0.5, w * 0.5),
                   (l * -0.5, w * -0.5), (l * 0.5, w * -0.5)):
        pts.append((cx + dx * c - dy * s, cy + dx * s + dy * c))
    return pts


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip a polygon by a convex CCW polygon."""
    output = subject
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        if not output:
            break
        inp = output
        output = []
        # signed area of (edge, vertex): >= 0 means inside for CCW clip
        dists = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        m = len(inp)
        for j in range(m):
            cur, nxt = inp[j], inp[(j + 1) % m]
            dc, dn = dists[j], dists[(j + 1) % m]
            if float(dc) >= 0.0:
                output.append(cur)
                if float(dn) < 0.0:
                    t = dc / (dc - dn)
                    output.append((cur[0] + t * (nxt[0] - cur[0]),
                                   cur[1] + t * (nxt[1] - cur[1])))
            elif float(dn) >= 0.0:
                t = dc / (dc - dn)
                output.append((cur[0] + t * (nxt[0] - cur[0]),
                               cur[1] + t * (nxt[1] - cur[1])))
    return output


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc = acc + (x1 * y2 - x2 * y1)
    acc = acc * 0.5
    return acc if float(acc) >= 0.0 else -acc


def _iou3d_generic(a, b):
    """IoU of two 7-scalar boxes (cx,cy,cz,l,w,h,ry); scalar-type generic."""
    inter_poly = _clip_polygon(
        _bev_corners_generic(a[0], a[1], a[3], a[4], a[6]),
        _bev_corners_generic(b[0], b[1], b[3], b[4], b[6]))
    bev = _polygon_area(inter_poly)
    if float(bev) < 1e-12:
        return 0.0
    top = _pick_min(a[2] + a[5] * 0.5, b[2] + b[5] * 0.5)
    bot = _pick_max(a[2] - a[5] * 0.5, b[2] - b[5] * 0.5)
    if float(top) <= float(bot):
        return 0.0
    inter = bev * (top - bot)
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return inter / union


def iou_3d(a, b):
    """Rotated-box 3D IoU in [0,1] via BEV polygon clipping."""
    v = _iou3d_generic(a.as_array(), b.as_array())
    return float(min(max(float(v), 0.0), 1.0))


def diou_loss(pred, gt):
    """1 - IoU + d^2/c^2 for a predicted 7-scalar box against a Box3D.

    ``pred`` is a sequence of 7 scalars (floats or scalar Tensors:
    cx,cy,cz,l,w,h,ry). The enclosing region for the distance penalty is
    the axis-aligned 3D box over both corner sets; c is its diagonal.
    """
    g = gt.as_array()
    iou = _iou3d_generic(pred, g)
    dx = pred[0] - gt.cx
    dy = pred[1] - gt.cy
    dz = pred[2] - gt.cz
    d2 = dx * dx + dy * dy + dz * dz

    pc = _bev_corners_generic(pred[0], pred[1], pred[3], pred[4], pred[6])
    gc = _bev_corners_generic(gt.cx, gt.cy, gt.l, gt.w, gt.ry)
    xs = [p[0] for p in pc] + [p[0] for p in gc]
    ys = [p[1] for p in pc] + [p[1] for p in gc]
    zs = [pred[2] - pred[5] * 0.5, pred[2] + pred[5] * 0.5,
          gt.cz - gt.h * 0.5, gt.cz + gt.h * 0.5]
    ex = _fold(_pick_max, xs) - _fold(_pick_min, xs)
    ey = _fold(_pick_max, ys) - _fold(_pick_min, ys)
    ez = _fold(_pick_max, zs) - _fold(_pick_min, zs)
    c2 = ex * ex + ey * ey + ez * ez
    return 1.0 - iou + d2 / c2


def _fold(f, xs):
    acc = xs[0]
    for x in xs[1:]:
        acc = f(acc, x)
    return acc


# -- direction --------------------------------------------------------------

def direction_class(ry):
    """FRONT for yaw in [-pi/2, pi/2), BACK otherwise."""
    ry = normalize_angle(ry)
    return FRONT if -math.pi / 2 <= ry < math.pi / 2 else BACK


def resolve_direction(box, direction):
    """Flip the box 180 degrees if its yaw disagrees with the direction bit."""
    if direction_class(box.ry) == direction:
        return box
    return Box3D(box.cx, box.cy, box.cz, box.l, box.w, box.h,
                 normalize_angle(box.ry + math.pi))


# -- metrics ----------------------------------------------------------------

def location_error(pred, gt):
    """Ground-plane (x,y) center distance in meters; height is ignored."""
    return math.hypot(pred.cx - gt.cx, pred.cy - gt.cy)


def _pr_curve(detections, gts, iou_thresh):
    """Greedy score-descending matching; each GT used at most once.

    Returns (tp_flags in score order, n_gt). Ties in score keep input order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = [False] * len(gts)
    tp = []
    for i in order:
        box = detections[i][0]
        best_j, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            v = iou_3d(box, g)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            tp.append(True)
        else:
            tp.append(False)
    return tp, len(gts)


def average_precision(detections, gts, iou_thresh=0.7, mode="R40"):
    """Interpolated AP at 11 or 40 recall points; None when no ground truth."""
    if not gts:
        return None
    if not detections:
        return 0.0
    tp, n_gt = _pr_curve(detections, gts, iou_thresh)
    precisions, recalls = [], []
    n_tp = 0
    for i, hit in enumerate(tp):
        n_tp += int(hit)
        precisions.append(n_tp / (i + 1))
        recalls.append(n_tp / n_gt)
    if mode == "11-point":
        points = [i / 10.0 for i in range(11)]
    elif mode == "R40":
        points = [i / 40.0 for i in range(1, 41)]
    else:
        raise ValueError(f"unknown AP mode {mode!r}")
    total = 0.0
    for r in points:
        ps = [p for p, rec in zip(precisions, recalls) if rec >= r]
        total += max(ps) if ps else 0.0
    return total / len(points)
