"""Command-line surface: dataset generation, training, prediction,
evaluation, and diagnostics.

All randomness flows from the per-command --seed through named sub-streams;
reruns with the same flags produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import autodiff as ad
from . import dataset, datagen, eval3d, fusion, geom3d, kitti_io, pointnet
from .errors import PointFusionError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointfusion",
        description="Desk-scale 3D box estimation from image crops and "
                    "frustum point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value scene spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=fusion.VARIANTS)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch CSV metrics path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("predict", help="run inference over detections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int, default=300)
    p.add_argument("--n-max", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate predictions against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["3d", "bev"], default="3d")
    p.add_argument("--mode", choices=["kitti", "sunrgbd"], default="kitti")
    p.add_argument("--interpolation", choices=["continuous", "11point"],
                   default="continuous")
    p.add_argument("--out", help="results table path (default: stdout)")

    p = sub.add_parser("ablate-points",
                       help="AP as a function of the test-time point cap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--caps", default="50,100,200,300,400,500")
    p.add_argument("--top-k", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("iou", help="3D IoU of two boxes given as "
                                   "cx,cy,cz,l,w,h,yaw")
    p.add_argument("--box-a", required=True)
    p.add_argument("--box-b", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--variant", choices=fusion.VARIANTS, default="final")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _parse_box(text: str) -> geom3d.Box3D:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 7:
        raise PointFusionError("box must be cx,cy,cz,l,w,h,yaw")
    return geom3d.corners_from_param(geom3d.BoxParam(
        center=np.array(vals[:3]), dims=np.array(vals[3:6]), yaw=vals[6]))


def cmd_gen(args) -> int:
    spec = (datagen.SceneSpec.from_file(args.spec) if args.spec
            else datagen.SceneSpec())
    spec.seed = args.seed
    datagen.generate_dataset(spec, args.scenes, args.out, split=args.split)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = (fusion.ModelConfig.from_file(args.config) if args.config
              else fusion.ModelConfig())
    if args.variant is not None:
        config.variant = args.variant
        config.__post_init__()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    frames = dataset.load_frames(args.data)
    features = (dataset.load_features(args.data)
                if config.feature_source == "precomputed" else None)
    samples, resample = dataset.training_resampler(
        frames, features, config.n_max, config.seed, config.jitter)
    model = fusion.train(samples, config, metrics_path=args.metrics,
                         log=lambda msg: print(msg, file=sys.stderr),
                         resample=resample if config.jitter > 0 else None)
    model.save(args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    if args.n_max <= 0:
        raise PointFusionError("--n-max must be positive")
    model = fusion.Model.load(args.checkpoint)
    frames = dataset.load_frames(args.data)
    features = dataset.load_features(args.data)
    preds = fusion.predict(model, frames, features, top_k=args.top_k,
                           n_max=args.n_max, seed=args.seed)
    kitti_io.write_predictions(args.out, preds)
    print(f"{len(preds)} predictions written to {args.out}")
    return 0


def _gt_frames(frames):
    return {f.frame_id: [lab.to_box3d() for lab in f.labels] for f in frames}


def cmd_eval(args) -> int:
    preds = kitti_io.read_predictions(args.preds)
    frames = dataset.load_frames(args.data)
    config = eval3d.EvalConfig(metric=args.metric, mode=args.mode,
                               interpolation=args.interpolation)
    results = eval3d.evaluate(preds, _gt_frames(frames), config)
    table = eval3d.format_table(results, config)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table)
    else:
        print(table, end="")
    return 0


def cmd_ablate_points(args) -> int:
    caps = [int(v) for v in args.caps.split(",")]
    if any(c <= 0 for c in caps):
        raise PointFusionError("caps must be positive")
    model = fusion.Model.load(args.checkpoint)
    frames = dataset.load_frames(args.data)
    features = dataset.load_features(args.data)
    gt = _gt_frames(frames)
    config = eval3d.EvalConfig(default_threshold=0.5,
                               iou_thresholds={}, metric="3d")
    lines = ["cap,class,ap"]
    for cap in caps:
        preds = fusion.predict(model, frames, features, top_k=args.top_k,
                               n_max=cap, seed=args.seed)
        results = eval3d.evaluate(preds, gt, config)
        for cls in sorted(results):
            lines.append(f"{cap},{cls},{results[cls].ap:.6f}")
    out = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(out)
    else:
        print(out, end="")
    return 0


def cmd_iou(args) -> int:
    a = _parse_box(args.box_a)
    b = _parse_box(args.box_b)
    print(f"iou3d  {geom3d.iou3d(a, b):.6f}")
    print(f"iou_bev {geom3d.iou_bev(a, b):.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    """End-to-end finite-difference check on a 3-point toy sample."""
    rng = np.random.default_rng(args.seed)
    config = fusion.ModelConfig(variant=args.variant, seed=args.seed,
                                point_widths=(8, 8, 16, 32),
                                head_widths=(16, 8))
    model = fusion.Model(config)
    points = rng.normal(size=(3, 3))
    image_feature = rng.normal(size=2048) * 0.1
    gt = geom3d.corners_from_param(geom3d.BoxParam(
        center=points.mean(axis=0), dims=np.array([1.5, 1.0, 0.8]), yaw=0.3))

    def loss_for(params):
        tparams = {k: ad.Tensor(v, requires_grad=True)
                   for k, v in params.items()}
        pred, A = model.forward(points, image_feature, tparams)
        lb = model.loss(pred, points, gt, A)
        return lb.total_node, tparams

    total, tparams = loss_for(model.params)
    total.backward()
    worst = 0.0
    worst_name = ""
    for name, t in tparams.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.values)
        flat = model.params[name].ravel()
        idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-5
            fp = float(loss_for(model.params)[0].values)
            flat[i] = old - 1e-5
            fm = float(loss_for(model.params)[0].values)
            flat[i] = old
            numeric = (fp - fm) / 2e-5
            analytic = g.ravel()[i]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric),
                                                1e-6)
            if rel > worst:
                worst, worst_name = rel, name
    print(f"max relative gradient error {worst:.2e} ({worst_name})")
    return 0 if worst < 1e-3 else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate-points": cmd_ablate_points,
    "iou": cmd_iou,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except PointFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
