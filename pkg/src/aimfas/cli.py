"""``aimfas`` command line: synth, train, eval and gradcheck.

Every command accepts ``--config FILE`` (JSON) and any number of
``--set section.key=value`` overrides; values are parsed as JSON. Exit codes:

* 0  success
* 1  a verification check failed
* 2  invalid configuration or input data
* 3  training diverged (non-finite loss); the run state is dumped
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import RunConfig, desk_config, gradcheck_model, load_config
from .metalearner import DivergenceError
from .models import ConfigError, load_checkpoint, save_checkpoint
from .taskgen import ManifestError, TaskGenerationError, export_benchmark

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("aimfas")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. meta.beta=0.001 (repeatable)")
    p.add_argument("--preset", choices=("default", "desk"), default="default",
                   help="starting point when no --config is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--workers", type=int, help="parallel task evaluation (default 1, sequential)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimfas", description="Zero/few-shot face anti-spoofing meta-learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic benchmark as images plus manifests")
    _add_common(p)

    p = sub.add_parser("train", help="pre-train and meta-train (or train the baseline)")
    _add_common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--mode", choices=("aimfas", "baseline"), help="train_mode")
    for flag in ("without-aiu", "without-ft", "without-pd", "first-order"):
        p.add_argument(f"--{flag}", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on K-shot test tasks")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-K", "--K", type=int, dest="K")
    p.add_argument("-T", "--T", type=int, dest="T")
    p.add_argument("-u", "--u", type=int, dest="u", help="inner steps at test time (default: trained u)")
    p.add_argument("--mode", choices=("aimfas", "baseline"), help="eval.mode")
    p.add_argument("--report", help="report path (default <out>/report-K<K>.txt)")

    p = sub.add_parser("gradcheck", help="finite-difference checks of the meta-gradient")
    _add_common(p)
    p.add_argument("-u", "--u", type=int, dest="u")
    p.add_argument("--first-order", action="store_true")
    return parser


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    simple = {"seed": "seed", "out": "out_dir", "workers": "workers"}
    for attr, key in simple.items():
        if getattr(args, attr, None) is not None:
            out.append(f"{key}={json.dumps(getattr(args, attr))}")
    cmd = args.command
    if cmd == "train":
        if args.iterations is not None:
            out.append(f"meta.iterations={args.iterations}")
        if args.mode:
            out.append(f"train_mode={json.dumps(args.mode)}")
    if cmd == "eval":
        for attr in ("K", "T", "u"):
            if getattr(args, attr) is not None:
                out.append(f"eval.{attr}={getattr(args, attr)}")
        if args.mode:
            out.append(f"eval.mode={json.dumps(args.mode)}")
    if cmd == "gradcheck" and args.u is not None:
        out.append(f"meta.u={args.u}")
    for flag in ("without_aiu", "without_ft", "without_pd", "first_order"):
        if getattr(args, flag, False):
            out.append(f"ablation.{flag}=true")
    return out


def _base(args) -> dict | None:
    if args.command == "gradcheck":
        m = gradcheck_model()
        return {
            "model": m.to_dict(),
            "data": {"synthetic": {"image_side": m.input_side, "depth_side": m.depth_side, "samples_per_category": 30}},
            "meta": {"alpha": 0.05, "gamma": 0.9},
        }
    if args.preset == "desk":
        return desk_config()
    return None


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args), base=None if args.config else _base(args))
    return cfg.validate()


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    pools = pipeline.load_pools(replace(cfg, data=replace(cfg.data, manifest=None)))
    paths = export_benchmark(pools, out)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    log_path = out / "train.log"
    with open(log_path, "w") as fh:
        def log_fn(line):
            fh.write(line + "\n")
            fh.flush()
            log.debug(line)

        try:
            result = pipeline.train(cfg, log_fn=log_fn, checkpoint_dir=out)
        except DivergenceError as exc:
            (out / "divergence.json").write_text(json.dumps({"error": str(exc), "inner_step": exc.step}, indent=2) + "\n")
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    path = save_checkpoint(out / "model.npz", result.checkpoint)
    print(f"checkpoint {path}")
    print(f"alpha {result.learner.aiu.alpha:.8g} gamma {result.learner.aiu.gamma:.8g}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint_path: str, report_path: str | None) -> int:
    try:
        ckpt = load_checkpoint(checkpoint_path)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = pipeline.evaluate(cfg, ckpt)
    path = Path(report_path) if report_path else Path(cfg.out_dir) / f"report-K{cfg.eval.K}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text())
    print(f"K={cfg.eval.K} T={report.T} ACER={report.summary()} AUC={100 * report.auc_mean:.2f}")
    print(f"report {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = pipeline.gradcheck(cfg)
    for r in results:
        print(r.line())
    return EXIT_CHECK if any(r.status == "fail" for r in results) else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.report)
        return cmd_gradcheck(cfg)
    except ConfigError as exc:
        print("error: invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (TaskGenerationError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
