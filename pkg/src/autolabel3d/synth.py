"""Deterministic synthetic KITTI-style scenes for desk-scale experiments.

Scenes contain car-like cuboids in front of a pinhole camera. LiDAR points
are sampled on the camera-facing faces, the image renders the boxes as
flat-shaded polygons over a textured background, and exact ground-truth
boxes plus per-point/per-pixel ownership are kept as in-memory metadata.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Box2D, Box3D, Calibration, normalize_angle, project_points
from .kitti_io import FrameRecord, ObjectAnnotation, write_frame, write_split

IMG_W, IMG_H = 384, 288
FOCAL = 330.0
GROUND_Z = -1.6


def default_calibration():
    """Canonical pinhole chain: x forward / y left / z up -> camera."""
    P = np.array([[FOCAL, 0.0, IMG_W / 2.0, 0.0],
                  [0.0, FOCAL, IMG_H / 2.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    R0 = np.eye(3)
    Tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, -0.08],
                   [1.0, 0.0, 0.0, 0.0]])
    return Calibration(P=P, R0=R0, Tr=Tr)


@dataclass
class SynthMeta:
    owner_pixels: np.ndarray    # [h,w] object index per pixel, -1 background
    point_owner: np.ndarray     # [n_points] object index, -1 background
    boxes: list                 # ground-truth Box3D per object


def _box_axes(box):
    c, s = math.cos(box.ry), math.sin(box.ry)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    return ex, ey, ez


def _faces(box):
    """(normal, center, u_vec, u_half, v_vec, v_half) for 5 faces (no bottom)."""
    ex, ey, ez = _box_axes(box)
    ctr = np.array([box.cx, box.cy, box.cz])
    hl, hw, hh = box.l / 2, box.w / 2, box.h / 2
    return [
        (ex, ctr + ex * hl, ey, hw, ez, hh),
        (-ex, ctr - ex * hl, ey, hw, ez, hh),
        (ey, ctr + ey * hw, ex, hl, ez, hh),
        (-ey, ctr - ey * hw, ex, hl, ez, hh),
        (ez, ctr + ez * hh, ex, hl, ey, hw),
    ]


def _visible_faces(box):
    return [f for f in _faces(box) if np.dot(f[0], f[1]) < 0.0]


_SURFACE_INSET = 5e-4


def _sample_surface(box, n, rng):
    """n points over the full shell (all faces but the bottom), area-weighted.

    Covering the whole shell rather than only the camera-facing faces mimics
    the aggregated multi-pass clouds that offboard labeling pipelines build
    by accumulating sweeps along a track, and keeps the cloud centroid close
    to the true box center.

    Points are inset half a millimeter from the exact surface so that the
    single-precision cloud stays strictly inside the box: storing an on-face
    coordinate as f32 perturbs it by up to a few micrometers, which would
    flip the containment bit for most samples.
    """
    faces = _faces(box)
    areas = np.array([4.0 * f[3] * f[5] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    eps = _SURFACE_INSET
    for f, cnt in zip(faces, counts):
        if cnt == 0:
            continue
        a = rng.uniform(-1.0, 1.0, size=cnt)
        b = rng.uniform(-1.0, 1.0, size=cnt)
        pts.append(f[1] - f[0] * eps
                   + a[:, None] * f[2] * (f[3] - eps)
                   + b[:, None] * f[4] * (f[5] - eps))
    return np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))


def _background_texture(rng):
    coarse = rng.uniform(0.25, 0.75, size=(IMG_H // 12, IMG_W // 12, 3))
    img = np.kron(coarse, np.ones((12, 12, 1)))[:IMG_H, :IMG_W]
    grad = np.linspace(0.15, -0.15, IMG_H)[:, None, None]
    return np.clip(img + grad, 0.0, 1.0)


def _corner_box2d(box, calib):
    """Outermost projected 3D corners, clipped to the image."""
    from .geometry import box_corners
    uv, depth = project_points(box_corners(box), calib)
    uv = uv[depth > 0]
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    u0c, v0c = max(u0, 0.0), max(v0, 0.0)
    u1c, v1c = min(u1, IMG_W - 1.0), min(v1, IMG_H - 1.0)
    if u1c - u0c < 4 or v1c - v0c < 4:
        return None, 1.0
    full = (u1 - u0) * (v1 - v0)
    trunc = 1.0 - (u1c - u0c) * (v1c - v0c) / full
    return Box2D(u0c, v0c, u1c, v1c), trunc


def _render_objects(image, owner, boxes, colors, calib):
    img = Image.fromarray(np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8), "RGB")
    own = Image.fromarray(owner.astype(np.int32), "I")
    draw = ImageDraw.Draw(img)
    draw_own = ImageDraw.Draw(own)
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].cx)  # far first
    for i in order:
        box, color = boxes[i], colors[i]
        faces = _visible_faces(box)
        faces.sort(key=lambda f: -np.linalg.norm(f[1]))
        for normal, ctr, uvec, uh, vvec, vh in faces:
            corners = [ctr + su * uvec * uh + sv * vvec * vh
                       for su, sv in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
            uv, depth = project_points(np.array(corners), calib)
            if (depth <= 0).any():
                continue
            shade = 0.45 + 0.55 * max(0.0, -np.dot(normal, ctr) / np.linalg.norm(ctr))
            rgb = tuple(int(min(255, c * shade * 255)) for c in color)
            poly = [(float(u), float(v)) for u, v in uv]
            draw.polygon(poly, fill=rgb)
            draw_own.polygon(poly, fill=i)
    return np.asarray(img, dtype=np.float64) / 255.0, np.asarray(own, dtype=np.int64)


def synth_scene(seed, n_objects=2, sparsity=(160, 320), truncation_prob=0.0,
                frame_id=None, depth_range=(9.0, 26.0), yaw_jitter=0.1):
    """One deterministic synthetic frame with exact ground truth.

    Yaws are traffic-like by default: each car faces along or against the
    viewing axis plus Gaussian jitter of ``yaw_jitter`` radians, the way
    parked and driving cars line up with the road in real street scenes.
    ``yaw_jitter=None`` samples orientations uniformly instead.
    """
    rng = np.random.default_rng(seed)
    calib = default_calibration()
    if frame_id is None:
        frame_id = f"{seed:06d}"

    y_slope = (IMG_W / 2.0) / FOCAL
    boxes, colors = [], []
    attempts = 0
    while len(boxes) < n_objects and attempts < 200:
        attempts += 1
        # car-like dims around the common sedan statistics (~3.9 x 1.6 x 1.5)
        l = rng.uniform(3.6, 4.2)
        w = rng.uniform(1.5, 1.75)
        h = rng.uniform(1.4, 1.65)
        x = rng.uniform(*depth_range)
        if rng.random() < truncation_prob:
            y = math.copysign(x * y_slope, rng.uniform(-1, 1))
        else:
            y = rng.uniform(-0.62, 0.62) * x * y_slope
        if yaw_jitter is None:
            ry = rng.uniform(-math.pi, math.pi)
        else:
            axis = 0.0 if rng.random() < 0.5 else math.pi
            ry = normalize_angle(axis + rng.normal(0.0, yaw_jitter))
        cand = Box3D(x, y, GROUND_Z + h / 2.0, l, w, h, ry)
        if any(math.hypot(cand.cx - b.cx, cand.cy - b.cy) < 5.5 for b in boxes):
            continue
        # keep viewing cones disjoint so one object's frustum never swallows
        # another object's points; each box subtends about half its diagonal
        # over its distance
        def _half_span(b):
            return math.atan2(0.5 * math.hypot(b.l, b.w), math.hypot(b.cx, b.cy))

        azimuth = math.atan2(cand.cy, cand.cx)
        if any(abs(azimuth - math.atan2(b.cy, b.cx))
               < _half_span(cand) + _half_span(b) + 0.05 for b in boxes):
            continue
        boxes.append(cand)
        colors.append(tuple(rng.uniform(0.35, 0.95, size=3)))

    # camera-facing surface points per object
    clouds, owners = [], []
    for i, box in enumerate(boxes):
        n_pts = int(rng.integers(sparsity[0], sparsity[1] + 1))
        pts = _sample_surface(box, n_pts, rng)
        clouds.append(pts)
        owners.append(np.full(len(pts), i))

    # a light blanket of ground points: enough background falls into each
    # frustum to keep segmentation non-trivial without drowning the object
    n_ground = 150
    gx = rng.uniform(5.0, 38.0, size=n_ground)
    gy = rng.uniform(-1.0, 1.0, size=n_ground) * gx * y_slope * 0.95
    ground = np.stack([gx, gy, np.full(n_ground, GROUND_Z)], axis=1)
    clouds.append(ground)
    owners.append(np.full(n_ground, -1))

    xyz = np.concatenate(clouds, axis=0)
    point_owner = np.concatenate(owners, axis=0)
    intensity = rng.uniform(0.1, 0.9, size=len(xyz))
    cloud = np.hstack([xyz, intensity[:, None]]).astype(np.float32).astype(np.float64)

    image = _background_texture(rng)
    owner = np.full((IMG_H, IMG_W), -1, dtype=np.int64)
    image, owner = _render_objects(image, owner, boxes, colors, calib)

    objects = []
    kept_boxes = []
    for i, box in enumerate(boxes):
        box2d, trunc = _corner_box2d(box, calib)
        if box2d is None:
            continue
        objects.append(ObjectAnnotation("Car", box2d, box, truncated=trunc))
        kept_boxes.append(box)

    meta = SynthMeta(owner_pixels=owner, point_owner=point_owner, boxes=boxes)
    return FrameRecord(frame_id, cloud, image, calib, objects, meta=meta)


def generate_dataset(root, seed, n_frames, n_objects=2, sparsity=(160, 320),
                     truncation_prob=0.0, val_fraction=0.0, yaw_jitter=0.1):
    """Write a synthetic dataset tree; returns the list of frame ids."""
    rng = np.random.default_rng(seed)
    frame_ids = []
    for i in range(n_frames):
        frame = synth_scene(int(rng.integers(0, 2**31 - 1)), n_objects=n_objects,
                            sparsity=sparsity, truncation_prob=truncation_prob,
                            frame_id=f"{i:06d}", yaw_jitter=yaw_jitter)
        write_frame(root, frame)
        frame_ids.append(frame.frame_id)
    n_val = int(round(val_fraction * n_frames))
    write_split(root, "train", frame_ids[:n_frames - n_val])
    write_split(root, "val", frame_ids[n_frames - n_val:])
    return frame_ids


def box_surface_distance(points, box):
    """Distance from each point to the box surface (0 on the surface)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points - np.array([box.cx, box.cy, box.cz])
    c, s = math.cos(box.ry), math.sin(box.ry)
    local = np.stack([d[:, 0] * c + d[:, 1] * s,
                      -d[:, 0] * s + d[:, 1] * c,
                      d[:, 2]], axis=1)
    q = np.abs(local) - np.array([box.l / 2, box.w / 2, box.h / 2])
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)
