"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Model hyperparameters live in a config file (one ``key = value`` per line);
flags carry only paths and seeds so an experiment is reproducible from its
command line plus config.
"""

import argparse
import os
import sys

import numpy as np

from .evaluate import EvalError, score_annotations, write_report
from .gradcheck import run_all
from .kitti_io import DatasetError, read_frame, read_split
from .network import forward, load_checkpoint
from .runconfig import parse_run_config
from .sampling import EmptyFrustumError, TooFewForegroundError, build_sample
from .synth import generate_dataset
from .tensor import MaskError
from .training import DivergenceError, autolabel, train
from .viz import export_attention, export_bev

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERICAL_ERROR = 3


def _build_parser():
    parser = argparse.ArgumentParser(prog="autolabel3d",
                                     description="3D box autolabeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic KITTI-style dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--truncation-prob", type=float, default=0.0)
    p.add_argument("--val-fraction", type=float, default=0.0)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--unlabeled", default=None,
                   help="dataset root used for self-supervision only")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("autolabel", help="write predicted label files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None,
                   help="split name; default is every frame with a calib file")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("visualize", help="export BEV and attention images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", default=None)
    return parser


def _frame_ids(root, split):
    if split is not None:
        return read_split(root, split)
    calib_dir = os.path.join(root, "calib")
    if not os.path.isdir(calib_dir):
        raise DatasetError(f"no calib directory under {root}")
    return sorted(os.path.splitext(f)[0] for f in os.listdir(calib_dir)
                  if f.endswith(".txt"))


def _collect_samples(root, frame_ids, cfg, labeled):
    """Build one sample per object; unusable objects are skipped with a note."""
    samples = []
    for frame_id in frame_ids:
        frame = read_frame(root, frame_id)
        for i in range(len(frame.objects)):
            try:
                s = build_sample(frame, i, cfg.n_prime, cfg.m, cfg.patch_k,
                                 rng_seed=0, min_points=cfg.min_points,
                                 overlap_mode=cfg.overlap_mode,
                                 require_labels=labeled)
            except (EmptyFrustumError, TooFewForegroundError) as exc:
                print(f"skip: {exc}", file=sys.stderr)
                continue
            if not labeled:
                s.labels = None
            samples.append(s)
    return samples


def _cmd_synth(args):
    generate_dataset(args.out, args.seed, args.frames, n_objects=args.objects,
                     truncation_prob=args.truncation_prob,
                     val_fraction=args.val_fraction)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def _cmd_train(args):
    run_cfg = parse_run_config(args.config)
    model_cfg = run_cfg.model_config()
    train_ids = read_split(args.data, "train")
    labeled = _collect_samples(args.data, train_ids, run_cfg, labeled=True)
    if not labeled:
        raise DatasetError(f"no trainable objects in {args.data}")
    unlabeled = None
    if args.unlabeled:
        ids = _frame_ids(args.unlabeled, None)
        unlabeled = _collect_samples(args.unlabeled, ids, run_cfg, labeled=False)
    val = None
    try:
        val_ids = read_split(args.data, "val")
    except OSError:
        val_ids = []
    if val_ids:
        val = _collect_samples(args.data, val_ids, run_cfg, labeled=True)

    os.makedirs(args.out, exist_ok=True)
    train_cfg = run_cfg.train_config(
        seed=args.seed, ckpt_dir=args.out,
        ckpt_every=run_cfg.ckpt_every, val_every=run_cfg.val_every,
        log_path=os.path.join(args.out, "train.log"))
    _, log = train(labeled, model_cfg, train_cfg,
                   unlabeled_samples=unlabeled, val_samples=val)
    steps = sum(1 for r in log if "total" in r)
    print(f"trained {steps} steps; checkpoint at {os.path.join(args.out, 'final')}")
    return 0


def _cmd_autolabel(args):
    params, model_cfg = load_checkpoint(args.ckpt)
    frame_ids = _frame_ids(args.data, args.split)
    if not frame_ids:
        raise DatasetError(f"no frames to label in {args.data}")
    autolabel(params, model_cfg, args.data, frame_ids, args.out)
    print(f"labeled {len(frame_ids)} frames into {args.out}")
    return 0


def _cmd_eval(args):
    report = score_annotations(args.pred, args.gt)
    write_report(report, args.report)
    print(report.as_table())
    return 0


def _cmd_visualize(args):
    params, model_cfg = load_checkpoint(args.ckpt)
    frame = read_frame(args.data, args.frame)
    os.makedirs(args.out, exist_ok=True)

    from .network import generate_points
    from .training import label_frame

    labeled = label_frame(frame, params, model_cfg)
    pred_boxes = [o.box3d for o in labeled]
    gt_boxes = [o.box3d for o in frame.objects if o.box3d is not None]
    export_bev(frame, pred_boxes, gt_boxes,
               os.path.join(args.out, f"{args.frame}_bev.png"))

    dense_all = []
    for i in range(len(frame.objects)):
        try:
            sample = build_sample(frame, i, model_cfg.n_prime, model_cfg.m,
                                  model_cfg.patch_k, rng_seed=0,
                                  require_labels=False)
        except EmptyFrustumError:
            continue
        preds = forward(sample, params, model_cfg, keep_attention=True)
        export_attention(sample, preds, frame,
                         os.path.join(args.out, f"{args.frame}_obj{i}_attention.png"))
        dense_all.append(generate_points(sample, preds))

    if dense_all:
        from dataclasses import replace
        dense = np.concatenate(dense_all, axis=0)
        cloud = np.concatenate([dense, np.zeros((len(dense), 1))], axis=1)
        export_bev(replace(frame, cloud=cloud), pred_boxes, gt_boxes,
                   os.path.join(args.out, f"{args.frame}_dense.png"))
    print(f"wrote visualizations for frame {args.frame} to {args.out}")
    return 0


def _cmd_gradcheck(args):
    seed = 0
    if args.config:
        seed = parse_run_config(args.config).seed
    results = run_all(seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.max_rel_err:.3e} "
              f"(tolerance {r.tolerance:.0e})")
        ok = ok and r.passed
    return 0 if ok else NUMERICAL_ERROR


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "autolabel": _cmd_autolabel,
    "eval": _cmd_eval,
    "visualize": _cmd_visualize,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; remap per our contract
        return 0 if not exc.code else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, EvalError, FileNotFoundError, NotADirectoryError,
            EmptyFrustumError, TooFewForegroundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (DivergenceError, MaskError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
