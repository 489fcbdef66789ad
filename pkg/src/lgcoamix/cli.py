"""Command-line entry point: segment, mix, augment-batch, gradcheck, train-toy, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import LossConfig, MixConfig, Rng, one_hot
from .io import (
    InvalidInput,
    read_image,
    write_image,
    write_label,
    write_plan,
    write_superpixel_map,
)
from .mixer import lambda_area, lgcoamix, mix_labels
from .slic import SlicParams, slic_segment

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

log = logging.getLogger("lgcoamix")


def _mix_config(args) -> MixConfig:
    return MixConfig(q_min=args.qmin, q_max=args.qmax, p=args.p)


def _slic_params(args, q: int = 1) -> SlicParams:
    return SlicParams(q, compactness=args.compactness, iterations=args.iters)


def cmd_segment(args) -> int:
    image = read_image(args.input)
    smap = slic_segment(image, _slic_params(args, args.superpixels))
    write_superpixel_map(args.out, smap)
    print(f"{smap.L} superpixels -> {args.out}")
    return EXIT_OK


def cmd_mix(args) -> int:
    x1 = read_image(args.image_a)
    x2 = read_image(args.image_b)
    k = args.num_classes
    y1 = one_hot(args.class_a, k) if k else None
    y2 = one_hot(args.class_b, k) if k else None
    sample, plan = lgcoamix(x1, y1, x2, y2, _mix_config(args), Rng(args.seed), slic=_slic_params(args))
    prefix = args.out_prefix
    if prefix.endswith(("/", "\\")):
        Path(prefix).mkdir(parents=True, exist_ok=True)
    lam = lambda_area(plan)
    write_image(prefix + "x_mix.png", sample.x_mix)
    write_superpixel_map(prefix + "s_mix.png", sample.s_mix)
    write_plan(prefix + "plan.json", plan, sample, lambda_area=lam)
    if k:
        write_label(prefix + "label.json", mix_labels(y1, y2, lam))
    print(f"q1={plan.q1} q2={plan.q2} pasted={plan.m} L={sample.s_mix.L} lambda_area={lam:.6f}")
    return EXIT_OK


def cmd_augment_batch(args) -> int:
    from .batch import augment_batch

    report = augment_batch(args.manifest, _mix_config(args), args.seed, args.out_dir, args.workers,
                           slic=_slic_params(args))
    for path, reason in report.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    print(f"wrote {report.written} samples -> {report.manifest_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_trials

    if args.trials < 1 or args.eps <= 0:
        raise InvalidInput("--trials must be >= 1 and --eps positive")
    worst = run_trials(args.seed, args.trials, args.eps, LossConfig(literal_contrast=not args.standard_contrast))
    ok = True
    for name, err in worst.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:9s} max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_train_toy(args) -> int:
    from .toy import TrainConfig, TrainingDiverged, train

    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InvalidInput(f"cannot read config {args.config}: {exc}") from exc
    if args.epochs is not None:
        data["epochs"] = args.epochs
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(data)
    except TypeError as exc:
        raise InvalidInput(str(exc)) from exc
    log_path = Path(args.log) if args.log else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    def on_epoch(record):
        line = json.dumps(record, sort_keys=True)
        print(line, flush=True)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")

    try:
        train(cfg, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench(args) -> int:
    from .batch import bench

    report = bench(args.manifest, _mix_config(args), args.seed, args.workers, slic=_slic_params(args))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _add_mix_args(p):
    p.add_argument("--qmin", type=int, default=25)
    p.add_argument("--qmax", type=int, default=30)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def _add_slic_args(p):
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgcoamix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="SLIC superpixels of one image")
    p.add_argument("--input", required=True)
    p.add_argument("--superpixels", type=int, default=30)
    p.add_argument("--out", required=True)
    _add_slic_args(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("mix", help="superpixel grid mix of two images")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--num-classes", type=int, default=0, help="write label.json when given")
    p.add_argument("--class-a", type=int, default=0)
    p.add_argument("--class-b", type=int, default=0)
    _add_mix_args(p)
    _add_slic_args(p)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("augment-batch", help="mix every image of a manifest with a random partner")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    _add_mix_args(p)
    _add_slic_args(p)
    p.set_defaults(func=cmd_augment_batch)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--standard-contrast", action="store_true",
                   help="check the contrastive form whose denominator includes all other vectors")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy model on synthetic shapes")
    p.add_argument("--config", help="JSON document with TrainConfig fields")
    p.add_argument("--log", help="JSONL file receiving one record per epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="time segmentation, mixing and pooling over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write the JSON report here")
    _add_mix_args(p)
    _add_slic_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInput, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
