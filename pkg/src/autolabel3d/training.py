"""Multi-task loss assembly, mask-and-predict self-supervision, training loop."""

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .geometry import diou_loss, direction_class, iou_3d
from .network import forward, init_parameters, save_checkpoint
from .optim import Adam
from .sampling import augment
from .tensor import Graph, Tensor, backward

LAMBDA_BOX = 5.0
CONTEXT_XYZ_WEIGHT = 0.1


class DivergenceError(RuntimeError):
    pass


@dataclass
class MaskPlan:
    masked_indices: np.ndarray
    ratio: float


def plan_mask(n_context, rng, max_ratio=0.95):
    """Sample the mask-and-predict plan: ratio ~ U[0, max_ratio], indices
    without replacement. At least one context point always stays unmasked."""
    if n_context < 1:
        raise ValueError("cannot plan a mask for zero context points")
    ratio = rng.uniform(0.0, max_ratio)
    count = min(int(round(ratio * n_context)), n_context - 1)
    idx = np.sort(rng.choice(n_context, size=count, replace=False))
    return MaskPlan(masked_indices=idx, ratio=ratio)


@dataclass
class LossReport:
    l_seg: float = 0.0
    l_xyz: float = 0.0
    l_box: float = 0.0
    l_dir: float = 0.0
    l_conf: float = 0.0
    total: float = 0.0
    lambda_box: float = LAMBDA_BOX
    xyz_empty: bool = False

    def terms(self):
        return {"l_seg": self.l_seg, "l_xyz": self.l_xyz, "l_box": self.l_box,
                "l_dir": self.l_dir, "l_conf": self.l_conf, "total": self.total}


def compute_losses(predictions, sample, plan, detection_mode=False, labeled=True,
                   lambda_box=LAMBDA_BOX):
    """Assemble the total loss tensor and its per-term report.

    Labeled samples get the full objective; unlabeled ones optimize the
    point-generation term only. Point generation is supervised on real
    context points gated by predicted foreground, with weight 1 for masked
    points and 0.1 for unmasked ones (leaked coordinates).
    """
    n_c = sample.n_context
    masked = np.zeros(n_c, dtype=bool)
    masked[plan.masked_indices] = True

    # foreground gate from the segmentation head's own predictions (values only)
    seg_data = predictions.seg_logits.data
    probs_fg = np.exp(seg_data[:, 1]) / np.exp(seg_data).sum(axis=1)
    gate = probs_fg > 0.5

    report = LossReport(lambda_box=lambda_box)
    zero = Tensor(0.0)
    l_seg = l_box = l_dir = l_conf = zero

    if labeled:
        if sample.labels is None:
            raise ValueError("labeled loss requested for a sample without labels")
        fg = sample.labels.foreground.astype(np.intp)
        ce = tz.cross_entropy(predictions.seg_logits, fg)
        fg_probs = tz.masked_softmax(predictions.seg_logits,
                                     np.ones_like(seg_data, dtype=bool))[:, 1]
        l_seg = ce + tz.dice_loss(fg_probs, fg)
        l_box = diou_loss(predictions.box_scalars, sample.labels.box)
        l_dir = tz.cross_entropy(predictions.dir_logits,
                                 [direction_class(sample.labels.box.ry)])
        if detection_mode:
            target = iou_3d(predictions.decoded_box(), sample.labels.box)
            l_conf = tz.smooth_l1(predictions.conf, Tensor(target))

    sel = np.flatnonzero(gate)
    if len(sel) == 0:
        l_xyz = zero
        report.xyz_empty = True
    else:
        weights = np.where(masked[sel], 1.0, CONTEXT_XYZ_WEIGHT)[:, None]
        l_xyz = tz.smooth_l1(predictions.xyz[sel], Tensor(sample.xyz[sel]),
                             weights=np.broadcast_to(weights, (len(sel), 3)))

    if labeled:
        total = l_seg + l_xyz + lambda_box * l_box + l_dir
        if detection_mode:
            total = total + l_conf
    else:
        total = l_xyz

    report.l_seg = float(l_seg)
    report.l_xyz = float(l_xyz)
    report.l_box = float(l_box)
    report.l_dir = float(l_dir)
    report.l_conf = float(l_conf)
    report.total = float(total)
    return total, report


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 300
    max_steps: int = 0              # 0 = no cap
    seed: int = 0
    lambda_box: float = LAMBDA_BOX
    mask_ratio_max: float = 0.95
    detection_mode: bool = False
    augment_cfg: object = None
    ckpt_dir: str = ""
    ckpt_every: int = 0             # epochs; 0 = final only
    log_path: str = ""
    val_every: int = 0              # epochs; 0 = never


def _log_line(fh, record):
    if fh is not None:
        fh.write(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in record.items()) + "\n")


def _validation_miou(params, model_cfg, val_samples):
    from .network import forward as fwd
    ious = []
    for s in val_samples:
        preds = fwd(s, params, model_cfg)
        from .geometry import resolve_direction
        box = resolve_direction(preds.decoded_box(), preds.direction())
        ious.append(iou_3d(box, s.labels.box))
    return float(np.mean(ious)) if ious else float("nan")


def train(labeled_samples, model_cfg, train_cfg, unlabeled_samples=None,
          val_samples=None, params=None):
    """Optimize on a stream of prebuilt samples.

    Per-sample Adam updates; when unlabeled samples are present, one
    unlabeled (point-generation-only) step is interleaved after each
    labeled step. Deterministic under a fixed seed. Returns (params, log),
    where log is the list of per-step records.
    """
    if not labeled_samples:
        raise ValueError("training needs at least one labeled sample")
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = init_parameters(model_cfg, seed=int(rng.integers(0, 2**31 - 1)))
    opt = Adam(params.values(), lr=train_cfg.lr)
    unlabeled = list(unlabeled_samples or [])
    u_cursor = 0

    log_fh = None
    if train_cfg.log_path:
        os.makedirs(os.path.dirname(train_cfg.log_path) or ".", exist_ok=True)
        log_fh = open(train_cfg.log_path, "w")
    log = []
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(len(labeled_samples))
            for i in order:
                records = [(labeled_samples[i], True)]
                if unlabeled:
                    records.append((unlabeled[u_cursor % len(unlabeled)], False))
                    u_cursor += 1
                for sample, labeled in records:
                    if train_cfg.augment_cfg is not None:
                        sample = augment(sample, train_cfg.augment_cfg, rng)
                    plan = plan_mask(sample.n_context, rng, train_cfg.mask_ratio_max)
                    with Graph():
                        preds = forward(sample, params, model_cfg,
                                        masked_indices=plan.masked_indices)
                        total, report = compute_losses(
                            preds, sample, plan,
                            detection_mode=train_cfg.detection_mode,
                            labeled=labeled, lambda_box=train_cfg.lambda_box)
                        if not np.isfinite(report.total):
                            raise DivergenceError(
                                f"non-finite loss at epoch {epoch} step {step}: "
                                f"{report.terms()}")
                        backward(total)
                    opt.step()
                    opt.zero_grad()
                    record = {"epoch": epoch, "step": step, "labeled": int(labeled),
                              **report.terms()}
                    log.append(record)
                    _log_line(log_fh, record)
                    step += 1
                    if train_cfg.max_steps and step >= train_cfg.max_steps:
                        raise StopIteration
            if val_samples and train_cfg.val_every and (epoch + 1) % train_cfg.val_every == 0:
                miou = _validation_miou(params, model_cfg, val_samples)
                record = {"epoch": epoch, "step": step, "val_miou": miou}
                log.append(record)
                _log_line(log_fh, record)
            if train_cfg.ckpt_dir and train_cfg.ckpt_every \
                    and (epoch + 1) % train_cfg.ckpt_every == 0:
                os.makedirs(train_cfg.ckpt_dir, exist_ok=True)
                save_checkpoint(os.path.join(train_cfg.ckpt_dir, f"epoch_{epoch + 1}"),
                                params, model_cfg)
    except StopIteration:
        pass
    finally:
        if log_fh is not None:
            log_fh.close()
    if train_cfg.ckpt_dir:
        os.makedirs(train_cfg.ckpt_dir, exist_ok=True)
        save_checkpoint(os.path.join(train_cfg.ckpt_dir, "final"), params, model_cfg)
    return params, log


# -- inference --------------------------------------------------------------

def _fallback_box(frame, obj_index):
    """Last-resort box for an empty frustum: mean car geometry dropped at
    the unprojected 2D-box center at a nominal depth."""
    from .geometry import unproject_point
    b = frame.objects[obj_index].box2d
    from .geometry import Box3D
    p = unproject_point((b.u_min + b.u_max) / 2.0, (b.v_min + b.v_max) / 2.0,
                        15.0, frame.calib)
    return Box3D(p[0], p[1], p[2], 3.9, 1.6, 1.5, 0.0)


def label_frame(frame, params, model_cfg, overlap_mode="binary", visibilities=None):
    """One predicted Box3D per weak 2D box, never skipped.

    Returns the frame's object annotations with box3d replaced by
    predictions (and score set in detection mode). No context points are
    masked at inference.
    """
    from dataclasses import replace as dc_replace

    from .geometry import resolve_direction
    from .sampling import EmptyFrustumError, build_sample

    out = []
    for i, obj in enumerate(frame.objects):
        try:
            sample = build_sample(frame, i, model_cfg.n_prime, model_cfg.m,
                                  model_cfg.patch_k, rng_seed=0,
                                  overlap_mode=overlap_mode,
                                  visibilities=visibilities, require_labels=False)
        except EmptyFrustumError:
            out.append(dc_replace(obj, box3d=_fallback_box(frame, i), score=None))
            continue
        preds = forward(sample, params, model_cfg)
        box = resolve_direction(preds.decoded_box(), preds.direction())
        score = float(preds.conf) if preds.conf is not None else None
        out.append(dc_replace(obj, box3d=box, score=score))
    return out


def autolabel(params, model_cfg, root, frame_ids, out_dir,
              overlap_mode="binary"):
    """Write predicted KITTI-format label files for every frame id."""
    from .kitti_io import read_frame, write_label_file

    os.makedirs(out_dir, exist_ok=True)
    for frame_id in frame_ids:
        try:
            frame = read_frame(root, frame_id)
            objects = label_frame(frame, params, model_cfg, overlap_mode=overlap_mode)
            write_label_file(os.path.join(out_dir, f"{frame_id}.txt"),
                             objects, frame.calib)
        except OSError as exc:
            raise OSError(f"autolabel failed on frame {frame_id}: {exc}") from exc
