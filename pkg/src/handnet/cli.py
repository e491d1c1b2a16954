"""Command-line front end.

Subcommands:
  summary     print architecture, parameter and FLOP accounting
  gradcheck   run analytic-vs-numeric gradient checks on the core layers
  train-toy   fit the synthetic corpus and write logs/checkpoints
  eval        score saved predictions against ground truth
  shift-test  measure prediction degradation under random input shifts

Exit codes: 0 success, 1 validation error (unknown flag, bad config
value, malformed file), 2 numeric failure (gradient check failed,
training diverged).
"""

import argparse
import sys

import numpy as np

from . import gradcheck as gc
from . import kernels, metrics, network, ops, training
from .blocks import BlockConfig, DenseBlock, InvertedBottleneck, TransitionLayer
from .blurpool import BlurPool, make_blur_filter
from .layers import BatchNorm, Conv2D, DepthwiseConv2D
from .tensor import ConfigError, FormatError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # flag/usage problems are validation errors: exit 1, not argparse's 2
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(args):
    cfg = network.PRESETS[args.preset]() if args.preset else network.default_config()
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}")
        cfg = network.NetworkConfig.from_text(text)
    for key in ("pooling", "activation"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "attention", None) is not None:
        cfg.attention = args.attention == "on"
    cfg.validate()
    return cfg


def _dtype(args):
    return np.float64 if args.precision == "double" else np.float32


def _print_filters(n):
    k = make_blur_filter(n).kernel
    denom = n ** 4
    nums = np.rint(k * denom).astype(int)
    print(f"blur filter n={n} (x 1/{denom}):")
    for row in nums:
        print("  [" + " ".join(f"{v:4d}" for v in row) + "]")


def cmd_summary(args):
    cfg = _load_config(args)
    net = network.Network(cfg, seed=args.seed, dtype=_dtype(args))
    total, items = network.count_params(net, itemized=True)
    rep = network.count_flops(net)
    print(f"input: {cfg.input_h}x{cfg.input_w}x{cfg.input_channels}")
    print("spatial trace:", " -> ".join(str(t) for t in net.spatial_trace()))
    if args.filters:
        _print_filters(cfg.blur_n)
    if args.verbose:
        # stage table: params and MACs grouped by top path segment, the
        # output size a stage hands to its successor
        by_stage_p, by_stage_m = {}, {}
        for name, n in items:
            key = name.split("/")[0]
            by_stage_p[key] = by_stage_p.get(key, 0) + n
        for name, m in rep.items:
            key = name.split("/")[0]
            by_stage_m[key] = by_stage_m.get(key, 0) + m
        dims = net._stage_dims[1:] + [net._head_dims]
        print(f"  {'stage':<20s} {'output':>9s} {'params':>10s} {'MACs':>14s}")
        for (name, _), (h, w) in zip(net.stages, dims):
            print(f"  {name:<20s} {f'{h}x{w}':>9s} "
                  f"{by_stage_p.get(name, 0):>10d} "
                  f"{by_stage_m.get(name, 0):>14d}")
        print(f"  {'head':<20s} {'1x1':>9s} {by_stage_p.get('head', 0):>10d} "
              f"{by_stage_m.get('head', 0):>14d}")
    print(f"parameters: {total}")
    print(f"forward MACs: {rep.total_macs}")
    print(f"forward FLOPs: {rep.total_flops}")
    if rep.reduction_factors:
        name, kf, do, f_kf, f_k = rep.reduction_factors[0]
        print(f"separable reduction factor at {name}: "
              f"{f_kf:.3f} (kernel denom) / {f_k:.3f} (growth denom)")
    return 0


def _gradcheck_suite(seed, tolerance):
    """Layer-by-layer checks at toy shapes, then a micro end-to-end net."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, module, shape):
        x = rng.standard_normal(shape)
        checks.append((name, module, x))

    add("conv 3x3", Conv2D(3, 4, 3, rng), (2, 6, 6, 3))
    add("conv 1x1 nobias", Conv2D(4, 5, 1, rng, bias=False), (2, 5, 5, 4))
    add("depthwise 3x3", DepthwiseConv2D(4, 3, rng), (2, 6, 6, 4))
    add("batchnorm", BatchNorm(5), (3, 4, 4, 5))
    add("blurpool n=2", BlurPool(2, 2), (2, 7, 7, 3))
    add("blurpool n=3", BlurPool(3, 2), (2, 8, 8, 2))
    bc = BlockConfig(e=2, k=3, activation="mish", attention=False)
    add("bottleneck", InvertedBottleneck(4, bc, rng), (2, 5, 5, 4))
    ac = BlockConfig(e=2, k=3, activation="mish", attention=True,
                     kappa=0.5, u=0.5, n_h=2)
    add("aa-bottleneck", DenseBlock(4, 1, ac, rng, np.float64, h=5, w=5),
        (1, 5, 5, 4))
    add("dense block", DenseBlock(3, 2, bc, rng, np.float64), (1, 5, 5, 3))
    add("transition blur", TransitionLayer(4, 3, "blur", rng), (2, 6, 6, 4))
    add("transition max", TransitionLayer(4, 3, "max", rng), (2, 7, 7, 4))
    net = network.Network(network.micro_config(), seed=seed, dtype=np.float64)
    checks.append(("micro network", net,
                   rng.standard_normal((1, 16, 16, 3))))

    failed = 0
    for name, module, x in checks:
        rep = gc.grad_check(module, None, x, tolerance=tolerance, seed=seed)
        status = "ok" if rep.passed else "FAIL"
        print(f"  {name:24s} max rel err {rep.max_relative_error:.3e}  {status}")
        if not rep.passed:
            failed += 1
            print(f"    worst: {rep.worst_parameter}"
                  f"[{rep.worst_parameter_index}]")
    return failed


def cmd_gradcheck(args):
    print(f"gradient checks (tolerance {args.tolerance:g}, seed {args.seed})")
    failed = _gradcheck_suite(args.seed, args.tolerance)
    if failed:
        print(f"{failed} check(s) failed")
        return 2
    print("all checks passed")
    return 0


def cmd_train_toy(args):
    cfg = network.PRESETS[args.preset]()
    if args.preset == "default":
        raise ConfigError("train-toy runs on the tiny or micro preset")
    net = network.Network(cfg, seed=args.seed, dtype=_dtype(args))
    images, kps = training.make_synth_dataset(
        args.images, size=cfg.input_h, seed=args.seed)
    sched = training.LRSchedule(lr_min=args.lr_min, lr_max=args.lr_max,
                                stepsize=args.stepsize)
    log = open(args.log, "w") if args.log else None
    if log:
        log.write("epoch,lr,loss,epe_px\n")

    def checkpoint(n, epoch):
        network.save_weights(n, f"{args.out}.epoch{epoch + 1}")

    try:
        hist = training.train_toy(
            net, images, kps, args.epochs, batch_size=args.batch_size,
            sched=sched, momentum=args.momentum, seed=args.seed, log=log,
            checkpoint_every=args.checkpoint_every,
            checkpoint_fn=checkpoint if args.checkpoint_every else None)
    except training.DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 2
    finally:
        if log:
            log.close()
    last = hist[-1]
    print(f"epochs: {len(hist)}  final loss: {last.loss:.6g}  "
          f"final epe: {last.epe_px:.4f} px")
    if args.out:
        network.save_weights(net, args.out)
        print(f"weights written to {args.out}")
    return 0


def cmd_eval(args):
    try:
        ids, pairs = metrics.read_records(args.pred)
        if args.gt:
            # ground truth kept in its own file: same record format, its
            # truth columns replace the prediction file's, matched by id
            ids_g, gt = metrics.read_records(args.gt)
            if ids != ids_g:
                print("eval: prediction and ground-truth ids disagree",
                      file=sys.stderr)
                return 1
            pairs = [metrics.EvalRecord(p.prediction, g.ground_truth,
                                        norm_scale=g.norm_scale)
                     for p, g in zip(pairs, gt)]
    except (OSError, FormatError) as err:
        print(f"eval: {err}", file=sys.stderr)
        return 1
    mean_epe, med_epe = metrics.epe(pairs)
    curve = metrics.pck_curve(pairs, metrics.PCK_THRESHOLDS)
    area = metrics.auc(curve, metrics.PCK_THRESHOLDS)
    print(f"samples: {len(pairs)}")
    print(f"epe mean: {mean_epe:.4f} px  median: {med_epe:.4f} px")
    print(f"pck auc (0..30 px): {area:.4f}")
    hcurve = None
    if all(p.norm_scale is not None for p in pairs):
        hcurve = metrics.pckh_curve(pairs, metrics.PCKH_THRESHOLDS)
        harea = metrics.auc(hcurve, metrics.PCKH_THRESHOLDS)
        print(f"pckh auc (0..1): {harea:.4f}")
    if args.out:
        metrics.write_curve_csv(args.out, metrics.PCK_THRESHOLDS, curve)
        print(f"pck curve written to {args.out}")
    if args.out_pckh:
        if hcurve is None:
            print("eval: --out-pckh needs norm_scale on every record",
                  file=sys.stderr)
            return 1
        metrics.write_curve_csv(args.out_pckh, metrics.PCKH_THRESHOLDS, hcurve)
        print(f"pckh curve written to {args.out_pckh}")
    return 0


def cmd_shift_test(args):
    try:
        net = network.load_weights(args.weights)
    except (OSError, FormatError) as err:
        print(f"shift-test: {err}", file=sys.stderr)
        return 1
    images, kps = training.make_synth_dataset(
        args.images, size=net.cfg.input_h, seed=args.seed)

    def model(imgs, gts):
        return net.predict(imgs)

    rep = metrics.shift_robustness(model, (images, kps),
                                   max_shift=args.max_shift, seed=args.seed)
    print(f"samples: {rep.n_samples} used, {rep.n_skipped} skipped")
    print(f"epe unshifted: mean {rep.baseline_epe[0]:.4f} px  "
          f"median {rep.baseline_epe[1]:.4f} px")
    print(f"epe shifted:   mean {rep.shifted_epe[0]:.4f} px  "
          f"median {rep.shifted_epe[1]:.4f} px")
    print(f"degradation:   mean {rep.delta_mean:.4f} px  "
          f"median {rep.delta_median:.4f} px")
    return 0


def build_parser():
    p = _Parser(prog="handnet",
                description="dense attention-augmented keypoint regression")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--precision", choices=("single", "double"),
                        default="single")

    s = sub.add_parser("summary", help="architecture and cost accounting")
    common(s)
    s.add_argument("--config", help="config file overriding the preset")
    s.add_argument("--preset", choices=sorted(network.PRESETS), default="default")
    s.add_argument("--pooling", choices=("blur", "average", "max"))
    s.add_argument("--activation", choices=("mish", "relu"))
    s.add_argument("--attention", choices=("on", "off"))
    s.add_argument("--filters", action="store_true",
                   help="print the blur filter kernel")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_summary)

    s = sub.add_parser("gradcheck", help="numeric gradient verification")
    common(s)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("train-toy", help="fit the synthetic corpus")
    common(s)
    s.add_argument("--preset", choices=sorted(network.PRESETS), default="tiny")
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--lr-min", type=float, default=1e-4)
    s.add_argument("--lr-max", type=float, default=1e-1)
    s.add_argument("--stepsize", type=int, default=6)
    s.add_argument("--out", help="weights file to write")
    s.add_argument("--log", help="CSV training log")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True,
                   help="record file (id, 21 pred pairs, 21 true pairs[, scale])")
    s.add_argument("--gt", help="optional separate ground-truth record file")
    s.add_argument("--out", help="write the PCK curve as CSV")
    s.add_argument("--out-pckh", help="write the PCKh curve as CSV")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("shift-test", help="robustness to input translation")
    common(s)
    s.add_argument("--weights", required=True)
    s.add_argument("--images", type=int, default=16)
    s.add_argument("--max-shift", type=int, default=20)
    s.set_defaults(fn=cmd_shift_test)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else 1
    try:
        kernels.active_backend()  # fail fast on a bad HANDNET_BACKEND value
        return args.fn(args)
    except training.DivergenceError as err:
        print(f"{parser.prog}: {err}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, ValueError) as err:
        print(f"{parser.prog}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
