"""Command line entry point: ``run`` one experiment or ``sweep`` one parameter."""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

from .exceptions import SkyMaskError
from .harness import load_config, run_experiment, save_config, write_outputs

logger = logging.getLogger("skymask_fl")


def _run_one(cfg, out_dir: Path, quiet: bool) -> dict:
    def progress(rec):
        if not quiet:
            print(f"round {rec.round:3d}  acc={rec.accuracy:.4f}"
                  + (f"  fpr={rec.fpr:.3f}" if rec.fpr is not None else "")
                  + (f"  fnr={rec.fnr:.3f}" if rec.fnr is not None else ""), flush=True)

    result = run_experiment(cfg, progress)
    write_outputs(result.records, result.dumps, out_dir, cfg)
    save_config(cfg, out_dir / "config.ini")
    return result


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    out = Path(args.out or cfg.experiment.out_dir)
    cfg.experiment.out_dir = str(out)
    cfg.validate()
    result = _run_one(cfg, out, args.quiet)
    final = result.records[-1].accuracy
    print(f"wrote {out} (final accuracy {final:.4f})")
    return 0


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base.experiment.seed = args.seed
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise SkyMaskError("--values must list at least one value")
    root = Path(args.out or base.experiment.out_dir)
    # check every value before spending time on any run
    configs = []
    for v in values:
        cfg = copy.deepcopy(base)
        cfg.set(args.param, v)
        cfg.experiment.out_dir = str(root / f"{args.param}={v}")
        configs.append(cfg.validate())
    for v, cfg in zip(values, configs):
        out = Path(cfg.experiment.out_dir)
        result = _run_one(cfg, out, args.quiet)
        print(f"{args.param}={v}: final accuracy {result.records[-1].accuracy:.4f} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skymask-fl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, help="INI config file")
    run.add_argument("--seed", type=int, help="override experiment.seed")
    run.add_argument("--out", help="output directory (default: experiment.out_dir)")
    run.add_argument("-q", "--quiet", action="store_true", help="no per-round lines")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run one experiment per parameter value")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True, help="dotted key, e.g. attack.fraction")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out", help="parent directory for the per-value outputs")
    sw.add_argument("-q", "--quiet", action="store_true")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SkyMaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
