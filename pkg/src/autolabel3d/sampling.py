"""Per-object multimodal sample assembly and augmentation.

An ObjectSample is the model's input unit: a fixed-size set of elements
(context points with 3D coordinates, padding pixels, target pixels), each
carrying a pixel coordinate and a 4-channel k-by-k image patch (RGB plus
the overlap-mask channel). Context coordinates are centroid-normalized;
the stored offset is added back when decoding box predictions.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box3D, direction_class, extract_frustum, points_in_box, project_points

FIVE_LEVEL_VALUES = {1: 0.75, 2: 0.5, 3: 0.25, 4: 0.0}


class EmptyFrustumError(ValueError):
    pass


class TooFewForegroundError(ValueError):
    pass


@dataclass
class SampleLabels:
    box: Box3D                  # world (LiDAR) frame ground truth
    foreground: np.ndarray      # [n_context] bool, per real context point
    direction: int


@dataclass
class ObjectSample:
    frame_id: str
    obj_index: int
    box2d: object
    n_context: int              # real LiDAR points; n_context <= n_prime
    xyz: np.ndarray             # [n_context,3] centroid-normalized
    centroid: np.ndarray        # [3] world-frame offset
    uv: np.ndarray              # [n_prime+m, 2] context | padding | targets
    patches: np.ndarray         # [n_prime+m, 4, k, k]
    n_prime: int
    m: int
    labels: SampleLabels | None = None

    @property
    def n_elements(self):
        return self.n_prime + self.m

    def world_xyz(self):
        return self.xyz + self.centroid


def overlap_mask(frame, obj_index, mode="binary", visibilities=None):
    """Per-pixel overlap-mask map for one object.

    binary: pixels inside any other object's 2D box get 0, else 1.
    five-level: overlapped pixels get 0.75/0.5/0.25/0 for neighbor
    visibility levels 1..4; overlapping regions keep the lowest value.
    """
    h, w = frame.image.shape[:2]
    mask = np.ones((h, w))
    for j, other in enumerate(frame.objects):
        if j == obj_index:
            continue
        if mode == "binary":
            value = 0.0
        elif mode == "five-level":
            if visibilities is None or j not in visibilities:
                raise ValueError(f"five-level mask needs a visibility level for object {j}")
            level = visibilities[j]
            if level not in FIVE_LEVEL_VALUES:
                raise ValueError(f"unknown visibility level {level!r} (expected 1..4)")
            value = FIVE_LEVEL_VALUES[level]
        else:
            raise ValueError(f"unknown overlap mask mode {mode!r}")
        b = other.box2d
        u0, u1 = max(0, int(math.floor(b.u_min))), min(w, int(math.ceil(b.u_max)) + 1)
        v0, v1 = max(0, int(math.floor(b.v_min))), min(h, int(math.ceil(b.v_max)) + 1)
        if u0 < u1 and v0 < v1:
            region = mask[v0:v1, u0:u1]
            np.minimum(region, value, out=region)
    return mask


def _crop_patches(image4, uv, k):
    """k-by-k crops centered at rounded (u,v); borders edge-replicated."""
    h, w = image4.shape[:2]
    half = k // 2
    n = len(uv)
    out = np.empty((n, image4.shape[2], k, k))
    ui = np.rint(uv[:, 0]).astype(int)
    vi = np.rint(uv[:, 1]).astype(int)
    offs = np.arange(-half, half + 1)
    for i in range(n):
        rows = np.clip(vi[i] + offs, 0, h - 1)
        cols = np.clip(ui[i] + offs, 0, w - 1)
        out[i] = image4[np.ix_(rows, cols)].transpose(2, 0, 1)
    return out


def _target_grid(box2d, m):
    """Stratified ceil(sqrt(m))-square grid of cell centers, trimmed to m."""
    g = math.ceil(math.sqrt(m))
    us = box2d.u_min + (np.arange(g) + 0.5) / g * box2d.width
    vs = box2d.v_min + (np.arange(g) + 0.5) / g * box2d.height
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)[:m]


def build_sample(frame, obj_index, n_prime, m, k, rng_seed,
                 min_points=5, overlap_mode="binary", visibilities=None,
                 require_labels=True):
    """Assemble the fixed-size multimodal sample for one weak 2D box.

    Deterministic given (frame, rng_seed). Context membership does not
    depend on the seed when the frustum is already within n_prime.
    """
    obj = frame.objects[obj_index]
    box2d = obj.box2d
    rng = np.random.default_rng(rng_seed)

    idx = extract_frustum(frame.cloud, box2d, frame.calib)
    if len(idx) == 0:
        raise EmptyFrustumError(
            f"frame {frame.frame_id} object {obj_index}: no LiDAR point projects "
            "into the 2D box")
    xyz = frame.cloud[idx, :3]

    labels = None
    if obj.box3d is not None and require_labels:
        fg_all = points_in_box(xyz, obj.box3d)
        if fg_all.sum() < min_points:
            raise TooFewForegroundError(
                f"frame {frame.frame_id} object {obj_index}: only {int(fg_all.sum())} "
                f"foreground points (< {min_points})")

    if len(xyz) > n_prime:
        keep = np.sort(rng.choice(len(xyz), size=n_prime, replace=False))
        xyz = xyz[keep]
    n_context = len(xyz)

    uv_context, _ = project_points(xyz, frame.calib)
    n_pad = n_prime - n_context
    uv_pad = np.stack([rng.uniform(box2d.u_min, box2d.u_max, size=n_pad),
                       rng.uniform(box2d.v_min, box2d.v_max, size=n_pad)], axis=1) \
        if n_pad else np.zeros((0, 2))
    uv_targets = _target_grid(box2d, m)
    uv = np.concatenate([uv_context, uv_pad, uv_targets], axis=0)

    omask = overlap_mask(frame, obj_index, overlap_mode, visibilities)
    image4 = np.concatenate([frame.image, omask[:, :, None]], axis=2)
    patches = _crop_patches(image4, uv, k)

    centroid = xyz.mean(axis=0)

    if obj.box3d is not None:
        labels = SampleLabels(box=obj.box3d,
                              foreground=points_in_box(xyz, obj.box3d),
                              direction=direction_class(obj.box3d.ry))
    return ObjectSample(frame_id=frame.frame_id, obj_index=obj_index, box2d=box2d,
                        n_context=n_context, xyz=xyz - centroid, centroid=centroid,
                        uv=uv, patches=patches, n_prime=n_prime, m=m, labels=labels)


# -- augmentation -----------------------------------------------------------

@dataclass
class AugmentConfig:
    auto_contrast: bool = False
    sharpness_range: float = 0.0        # blend factor toward a 3x3 blur
    color_jitter: float = 0.0           # per-channel multiplicative range
    translation_range: float = 0.0      # meters, per axis
    scale_range: float = 0.0            # relative, e.g. 0.05 -> [0.95, 1.05]
    mirror_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mirror_prob <= 1.0):
            raise ValueError("mirror probability must be in [0,1]")
        for name in ("sharpness_range", "color_jitter", "translation_range", "scale_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def is_identity(self):
        return not self.auto_contrast and self.sharpness_range == 0 \
            and self.color_jitter == 0 and self.translation_range == 0 \
            and self.scale_range == 0 and self.mirror_prob == 0


def _blur3(patches):
    acc = np.zeros_like(patches)
    n = patches.shape[-1]
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            rows = np.clip(np.arange(n) + di, 0, n - 1)
            cols = np.clip(np.arange(n) + dj, 0, n - 1)
            acc += patches[..., rows[:, None], cols[None, :]]
    return acc / 9.0


def augment(sample, cfg, rng=None):
    """Augmented copy of a sample.

    Cloud transforms apply consistently to context coordinates and the
    label box; image jitters touch the RGB patch channels only. Pixel
    coordinates are never moved (calibration consistency).
    """
    if cfg.is_identity:
        return sample
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    centroid = sample.centroid.copy()
    xyz = sample.xyz.copy()
    box = sample.labels.box if sample.labels is not None else None

    if cfg.scale_range > 0:
        s = rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range)
        xyz *= s
        centroid *= s
        if box is not None:
            box = Box3D(box.cx * s, box.cy * s, box.cz * s,
                        box.l * s, box.w * s, box.h * s, box.ry)
    if cfg.translation_range > 0:
        dt = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)
        centroid += dt
        if box is not None:
            box = Box3D(box.cx + dt[0], box.cy + dt[1], box.cz + dt[2],
                        box.l, box.w, box.h, box.ry)
    if cfg.mirror_prob > 0 and rng.random() < cfg.mirror_prob:
        xyz[:, 1] *= -1.0
        centroid[1] *= -1.0
        if box is not None:
            box = Box3D(box.cx, -box.cy, box.cz, box.l, box.w, box.h, -box.ry)

    patches = sample.patches.copy()
    rgb = patches[:, :3]
    if cfg.auto_contrast:
        lo = rgb.min(axis=(2, 3), keepdims=True)
        hi = rgb.max(axis=(2, 3), keepdims=True)
        span = np.where(hi - lo < 1e-6, 1.0, hi - lo)
        rgb[:] = (rgb - lo) / span
    if cfg.sharpness_range > 0:
        f = rng.uniform(-cfg.sharpness_range, cfg.sharpness_range)
        rgb[:] = np.clip(rgb + f * (rgb - _blur3(rgb)), 0.0, 1.0)
    if cfg.color_jitter > 0:
        factors = rng.uniform(1.0 - cfg.color_jitter, 1.0 + cfg.color_jitter, size=3)
        rgb[:] = np.clip(rgb * factors[None, :, None, None], 0.0, 1.0)

    labels = sample.labels
    if labels is not None:
        labels = SampleLabels(box=box, foreground=labels.foreground.copy(),
                              direction=direction_class(box.ry))
    return replace(sample, xyz=xyz, centroid=centroid, patches=patches, labels=labels)
