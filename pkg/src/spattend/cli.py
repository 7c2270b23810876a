"""``spattend`` command-line entry point.

Exit codes: 0 success, 1 invalid input (config, arguments, sizes),
2 runtime failure, 3 training divergence.
"""

import argparse
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataError, DimensionError, DivergenceError, SpattendError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is our runtime-failure code
    def error(self, message):
        raise UsageError(message)


def _load_config(args, required=True):
    from .config import ExperimentConfig

    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["run.out"] = args.out
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config, overrides)
    if required:
        raise UsageError("--config is required for this command")
    return ExperimentConfig.default(overrides)


def _datasets(cfg):
    from .data import generate_synthetic, read_image_tree

    if cfg["data.source"] == "synthetic":
        return generate_synthetic(cfg.synthetic())
    root = cfg["data.root"]
    return read_image_tree(root, "train"), read_image_tree(root, "test")


def _check_data(cfg, data):
    model_cfg = cfg.model()
    if data.images.shape[1:] != model_cfg.input_shape:
        raise DimensionError(f"images are {data.images.shape[1:]}, model expects {model_cfg.input_shape}")
    if data.labels.max() >= model_cfg.num_classes:
        raise ConfigError(f"labels reach {data.labels.max()}, model.classes is {model_cfg.num_classes}",
                          key="model.classes")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_train(args):
    from .model import Model
    from .training import evaluate, train

    cfg = _load_config(args)
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as f:
        f.write(cfg.canonical_text())
    train_set, test_set = _datasets(cfg)
    _check_data(cfg, train_set)
    model = Model(cfg.model(), seed=cfg["run.seed"])
    result = train(model, train_set, cfg.schedule(), cfg.loss(), cfg.svm(), out_dir=out, config_hash=cfg.hash(),
                   log_stream=lambda rec: print(rec.tsv(), flush=True) if not args.quiet else None)
    metrics = {"train": result.metrics.summary(), "best_epoch": result.best_epoch,
               "stopped_early": result.stopped_early, "config_hash": cfg.hash()}
    if len(test_set):
        metrics["test"] = evaluate(model, test_set, result.svm, cfg.loss()).summary()
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps({k: metrics[k] for k in ("train", "test") if k in metrics}, sort_keys=True))
    return EXIT_OK


def _restore(cfg, checkpoint):
    from .model import Model
    from .training import load_checkpoint

    model = Model(cfg.model(), seed=cfg["run.seed"])
    try:
        svm, digest = load_checkpoint(checkpoint, model)
    except (KeyError, DimensionError) as exc:
        raise ConfigError(f"checkpoint {checkpoint} does not fit the configured model: {exc}") from None
    if digest != cfg.hash():
        print(f"warning: checkpoint config hash {digest[:12]} differs from config {cfg.hash()[:12]}",
              file=sys.stderr)
    return model, svm


def cmd_eval(args):
    from .training import evaluate

    cfg = _load_config(args)
    checkpoint = args.checkpoint or os.path.join(cfg["run.out"], "checkpoint.bin")
    model, svm = _restore(cfg, checkpoint)
    train_set, test_set = _datasets(cfg)
    data = test_set if args.split == "test" else train_set
    _check_data(cfg, data)
    metrics = evaluate(model, data, svm, cfg.loss()).summary()
    print(json.dumps(metrics, sort_keys=True))
    if args.metrics:
        _write_json(args.metrics, metrics)
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradcheck

    if args.config:
        _load_config(args)  # validated for symmetry; the checks use their own tiny fixtures
    names = None if args.ops == "all" else [n.strip() for n in args.ops.split(",") if n.strip()]
    try:
        results = gradcheck.run(names, seeds=args.seeds, cases=getattr(args, "cases", None))
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    lines, ok = gradcheck.report(results)
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ablate(args):
    from .ablation import run_ablation

    cfg = _load_config(args)
    if cfg["data.source"] != "synthetic":
        raise ConfigError("ablation needs a synthetic dataset (data.source = synthetic)", key="data.source")
    out = cfg["run.out"]

    def progress(rec):
        if not args.quiet:
            print(f"# {rec.mode} seed {rec.seed}: test {rec.test_accuracy:.4f}", flush=True)

    result = run_ablation(cfg, out_dir=out, progress=progress)
    print(result.table(), end="")
    if result.control:
        print("# control (centred patch, no clutter)")
        print(result.table(control=True), end="")
    print(f"# gap {100 * result.gap:+.2f} points, localization ratio {result.localization:.3f}")
    return EXIT_OK


def cmd_visualize(args):
    from . import pnm
    from .visualize import attention_grids, make_artifact, write_artifact

    cfg = _load_config(args)
    checkpoint = args.checkpoint or os.path.join(cfg["run.out"], "checkpoint.bin")
    model, _ = _restore(cfg, checkpoint)
    image = pnm.read(args.image)
    grids = attention_grids(model, image, args.aggregate)
    out = os.path.join(cfg["run.out"], "heatmaps") if args.out is None else args.out
    stem = os.path.splitext(os.path.basename(args.image))[0]
    for k, grid in enumerate(grids):
        name = stem if args.aggregate == "mean" else f"{stem}_step{k:03d}"
        art = write_artifact(make_artifact(image, grid, model.grid), out, name)
        np.savetxt(os.path.join(out, f"{name}_grid.tsv"), grid, delimiter="\t", fmt="%.8f")
        if not args.quiet:
            print("\t".join(art.paths))
    return EXIT_OK


def cmd_synth(args):
    from .data import generate_synthetic, write_image_tree

    cfg = _load_config(args)
    out = cfg["run.out"]
    train_set, test_set = generate_synthetic(cfg.synthetic())
    rows = write_image_tree(out, {"train": train_set, "test": test_set})
    if not args.quiet:
        print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override run.seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override run.out (output directory)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="spattend", parents=[common],
                     description="Attention-driven spatially recurrent bilinear networks.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="default: <run.out>/checkpoint.bin")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--metrics", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", default="all", help="'all' or a comma-separated list of op names")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("ablate", parents=[common], help="baseline vs attention comparison")
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("visualize", parents=[common], help="attention heatmaps for one image")
    p.add_argument("--checkpoint", help="default: <run.out>/checkpoint.bin")
    p.add_argument("--image", required=True, help="PGM/PPM input image")
    p.add_argument("--aggregate", choices=("mean", "step"), default="mean")
    p.set_defaults(func=cmd_visualize)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as an image tree")
    p.set_defaults(func=cmd_synth)
    return parser


def _thread_limit():
    raw = os.environ.get("SPATTEND_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SPATTEND_THREADS must be an integer, got {raw!r}", key="SPATTEND_THREADS") from None
    if n < 1:
        raise ConfigError("SPATTEND_THREADS must be >= 1", key="SPATTEND_THREADS")
    return n


def main(argv=None, gradcheck_cases=None):
    """Run the CLI; returns the exit code.  ``gradcheck_cases`` replaces the op registry (tests)."""
    from threadpoolctl import threadpool_limits

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command")
        for name in ("config", "seed", "out"):
            if not hasattr(args, name):
                setattr(args, name, None)
        args.quiet = getattr(args, "quiet", False)
        if gradcheck_cases is not None:
            args.cases = gradcheck_cases
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"config error [{exc.key or '-'}]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DimensionError as exc:
        print(f"dimension error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as exc:
        print(f"diverged [{exc.parameter}]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SpattendError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
