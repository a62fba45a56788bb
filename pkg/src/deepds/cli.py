"""Command-line entry point.

Subcommands: ``gen-synthetic``, ``train``, ``evaluate``, ``predict``,
``report`` and ``run`` (train + evaluate). Exit codes: 0 success,
2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

logger = logging.getLogger("deepds")


def _load(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.training = replace(cfg.training, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def cmd_gen_synthetic(args) -> int:
    from .synthetic import gen_synthetic

    data = gen_synthetic(
        ny=args.ny, nx=args.nx, n_time=args.n_time, scale=args.scale, seed=args.seed or 0,
        perturb=not args.no_perturb, n_predictors=args.n_predictors, out_dir=args.out,
    )
    for name, path in sorted(data.files.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import pipeline

    cfg = _load(args)
    _, report, _ = pipeline.train(cfg, resume=args.resume)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import pipeline
    from .evaluation import summarize

    cfg = _load(args)
    report, baseline, _ = pipeline.evaluate(cfg, checkpoint=args.checkpoint)
    print(summarize([report, baseline]), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from . import pipeline

    from .config import ConfigError

    cfg = _load(args)
    if args.mc and not cfg.architecture.get("dropout_rate"):
        raise ConfigError("--mc: MC dropout requires architecture.dropout_rate > 0")
    checkpoint = args.checkpoint or Path(cfg.output_dir) / "checkpoints" / "last"
    path = pipeline.run_predict(cfg, checkpoint, args.output or Path(cfg.output_dir) / "predictions.nc", args.mc)
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    from . import evaluation, pipeline

    reports = []
    for run_dir in args.runs:
        eval_dir = Path(run_dir) / "eval"
        for csv_path in sorted(eval_dir.glob("per_sample_*.csv")):
            label = csv_path.stem[len("per_sample_"):]
            if label == "bicubic" and not args.include_bicubic:
                continue
            reports.append(pipeline.load_eval_report(eval_dir, label))
    if not reports:
        print("no evaluation reports found", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or "report")
    evaluation.write_report(reports, out)
    evaluation.emit_plots(reports, out, rmse_max=args.rmse_max)
    print(evaluation.summarize(reports), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    from . import pipeline
    from .evaluation import summarize

    cfg = _load(args)
    _, report, baseline = pipeline.run(cfg, resume=args.resume)
    print(summarize([report, baseline]), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepds", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, resume=False):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if resume:
            sp.add_argument("--resume", help="checkpoint directory to resume from")

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ny", type=int, default=32)
    g.add_argument("--nx", type=int, default=32)
    g.add_argument("--n-time", type=int, default=200)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--n-predictors", type=int, default=1)
    g.add_argument("--no-perturb", action="store_true", help="low-res field equals the exact coarsening")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="prepare data and train a model")
    with_config(t, resume=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a trained model on the holdout period")
    with_config(e)
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="write holdout predictions as NetCDF")
    with_config(pr)
    pr.add_argument("--checkpoint")
    pr.add_argument("--output", help="NetCDF file to write")
    pr.add_argument("--mc", type=int, default=0, help="number of MC-dropout members (0: deterministic)")
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", help="combine evaluated runs into one table and shared-scale figures")
    r.add_argument("runs", nargs="+", help="run output directories")
    r.add_argument("--out")
    r.add_argument("--rmse-max", type=float, help="fixed upper limit of the shared RMSE color scale")
    r.add_argument("--include-bicubic", action="store_true")
    r.set_defaults(func=cmd_report)

    rn = sub.add_parser("run", help="train then evaluate")
    with_config(rn, resume=True)
    rn.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .networks import SpecError
    from .training import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
