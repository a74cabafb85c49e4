"""Command-line entry point: ``smogup train|upsample|eval|sample-smog|init``.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

import argparse
import csv
import logging
from pathlib import Path
import sys

import numpy as np

from . import autodiff as ad
from . import checkpoint, config, io, network as nw, pipeline, trainer
from .geometry import normalize
from .report import FiguresUnavailable
from .losses import write_metric_csv

EXIT_USAGE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("smogup")


class UsageError(Exception):
    pass


def _ratio(text):
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not r > 0 or not np.isfinite(r):
        raise argparse.ArgumentTypeError(f"ratio must be a positive number, got {text}")
    return r


def _existing(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_model(path):
    _existing(path, "model checkpoint")
    try:
        return checkpoint.load(path).model
    except checkpoint.CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _figure(args, name, fn, *fargs):
    if not getattr(args, "figures", None):
        return
    from . import report
    out = getattr(report, fn)(*fargs, Path(args.figures) / name)
    log.info("wrote %s", out)


# commands


def cmd_init(args):
    cfg = config.load(args.config).model if args.config else nw.ModelConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    checkpoint.save(args.out, nw.Model(cfg))
    print(args.out)
    return 0


def cmd_train(args):
    overrides = {"iterations": args.iterations, "batch_size": args.batch, "seed": args.seed}
    if args.figures:
        overrides["figures"] = str(Path(args.figures).resolve())
    try:
        run = config.load(args.config, overrides)
    except config.ConfigError as exc:
        raise UsageError(str(exc)) from None
    if not run.io.dataset:
        raise UsageError("config sets no dataset")
    _existing(run.io.dataset, "dataset")
    if run.io.resume:
        _existing(run.io.resume, "resume checkpoint")
    try:
        pairs = pipeline.training_pairs(run.io.dataset, run.io.patch_size, run.train.train_ratio,
                                        run.io.num_pairs, run.train.seed)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None

    start = 0
    if run.io.resume:
        ckpt = checkpoint.load(run.io.resume)
        model = ckpt.model
        state = checkpoint.restore_state(ckpt, model)
        start = ckpt.step
    else:
        model = nw.Model(run.model)
        state = None
    tr = trainer.Trainer(model, run.train, pairs, state, start)

    def save(t):
        checkpoint.save(run.io.checkpoint, t.model, t.state, t.step, run.train)

    fh, writer = trainer.open_log(run.io.log, append=bool(run.io.resume) and Path(run.io.log).exists())
    try:
        tr.run(log_writer=writer, checkpoint_fn=save)
    finally:
        fh.close()
    save(tr)
    print(f"trained {tr.step} steps; checkpoint {run.io.checkpoint}; log {run.io.log}")
    if run.io.figures:
        args.figures = run.io.figures
        _figure(args, "loss_curve.png", "loss_curve", trainer.read_log(run.io.log))
    return 0


def cmd_upsample(args):
    model = _load_model(args.model)
    _existing(args.input, "input")
    pts = io.read_xyz(args.input)
    out = pipeline.upsample_cloud(pts, args.ratio, model, args.seed, args.patch_size, args.coverage)
    io.write_xyz(args.out, out)
    print(f"{len(pts)} -> {len(out)} points: {args.out}")
    _figure(args, Path(args.out).stem + ".png", "clouds", [("input", pts), ("output", out)])
    return 0


def _pairs_for_eval(pred, gt, mesh):
    pred, gt = Path(pred), Path(gt)
    if pred.is_dir() != gt.is_dir():
        raise UsageError("prediction and ground truth must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, pred, gt, Path(mesh) if mesh else None)], False
    out = []
    for p in sorted(pred.glob("*.xyz")):
        g = gt / p.name
        if not g.exists():
            raise UsageError(f"no ground truth for {p.name} in {gt}")
        m = None
        if mesh:
            cands = [Path(mesh) / (p.stem + s) for s in pipeline.MESH_SUFFIXES]
            m = next((c for c in cands if c.exists()), None)
            if m is None:
                raise UsageError(f"no mesh for {p.stem} in {mesh}")
        out.append((p.stem, p, g, m))
    if not out:
        raise UsageError(f"no .xyz files in {pred}")
    return out, True


def cmd_eval(args):
    _existing(args.pred, "prediction")
    _existing(args.gt, "ground truth")
    if args.mesh:
        _existing(args.mesh, "mesh")
    jobs, multi = _pairs_for_eval(args.pred, args.gt, args.mesh)
    reports = []
    for name, p, g, m in jobs:
        mesh = io.read_mesh(m) if m else None
        reports.append((name, pipeline.evaluate_pair(io.read_xyz(p), io.read_xyz(g), mesh, not args.raw)))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_metric_csv(fh, reports, multi)
    else:
        write_metric_csv(sys.stdout, reports, multi)
    _figure(args, "metrics.png", "metric_bars", reports)
    return 0


def cmd_sample_smog(args):
    if args.m < 1:
        raise UsageError("-m must be at least 1")
    model = _load_model(args.model)
    _existing(args.input, "input")
    pts, _ = normalize(io.read_xyz(args.input))
    with ad.no_grad(), ad.use_dtype(model.dtype):
        bb = nw.extract_features(pts, model)
        smog_out = nw.smog_head(bb.features, model, nw.component_indices(pts, model))
        samples, comp, params = nw.draw_queries(smog_out, args.m, model, args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "component"])
        for (x, y, z), c in zip(samples, comp):
            w.writerow([f"{x:.9g}", f"{y:.9g}", f"{z:.9g}", int(c)])
    finally:
        if args.out:
            fh.close()
    if args.params:
        from .smog import write_params_csv
        with open(args.params, "w", newline="") as ph:
            write_params_csv(ph, params)
    _figure(args, "smog.png", "smog_sphere", params.means, samples)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="smogup", description="Arbitrary-ratio point cloud upsampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    figures = argparse.ArgumentParser(add_help=False)
    figures.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR (needs matplotlib)")

    s = sub.add_parser("train", parents=[figures], help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("upsample", parents=[figures], help="upsample an XYZ cloud by a real ratio")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("--ratio", type=_ratio, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--patch-size", type=int, default=256)
    s.add_argument("--coverage", type=float, default=1.0)
    s.set_defaults(func=cmd_upsample)

    s = sub.add_parser("eval", parents=[figures], help="CD/HD (and P2F with --mesh) in 1e-3 units")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--mesh")
    s.add_argument("--out")
    s.add_argument("--raw", action="store_true", help="skip normalization by the ground-truth transform")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample-smog", parents=[figures], help="dump mixture samples and component ids")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("-m", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--params", help="also write the mixture parameters as CSV")
    s.set_defaults(func=cmd_sample_smog)

    s = sub.add_parser("init", help="write an untrained checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_init)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, config.ConfigError, io.ParseError, FileNotFoundError) as exc:
        print(f"smogup: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingAborted, ad.NumericalError) as exc:
        print(f"smogup: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"smogup: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FiguresUnavailable as exc:
        print(f"smogup: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
