"""Command line entry point: ``ndhomog run|report|plotdata``."""

from __future__ import annotations

import os

# one BLAS thread per worker process; set before numpy is imported
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

log = logging.getLogger("ndhomog")


def _load(path, seed=None, max_cells=None):
    from .config import ExperimentConfig, load_config

    cfg = load_config(path)
    data = cfg.model_dump()
    if seed is not None:
        data["base_seed"] = seed
    if max_cells is not None:
        for key in ("eps", "R"):
            if data.get(key):
                data[key] = data[key][:max_cells]
    return ExperimentConfig(**data)


def cmd_run(args) -> int:
    from .runner import output_dir_for, run_to_dir

    cfg = _load(args.config, args.seed, args.max_cells)
    out = Path(args.out) if args.out else output_dir_for(cfg)
    rep = run_to_dir(cfg, out, workers=args.workers, log=log.info)
    print(f"{out}: {rep.failures} failed sample(s)")
    return 0


def cmd_report(args) -> int:
    from .runner import report

    rep = report(args.run_dir)
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_plotdata(args) -> int:
    from .runner import emit_plot_data

    for p in emit_plot_data(args.run_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ndhomog", description="Random-media homogenization experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML/JSON config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed", type=int, default=None, help="override base_seed")
    r.add_argument("--max-cells", type=int, default=None, help="keep only the first N eps or R values")
    r.add_argument("--out", default=None, help="run directory (default: $NDHOMOG_OUTPUT_ROOT/<experiment_id>)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="recompute summary.json from raw.csv")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)

    p = sub.add_parser("plotdata", help="write plotdata/*.dat tables")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # configuration, resume and input errors
        from pydantic import ValidationError

        if isinstance(exc, (ValidationError, ValueError, FileNotFoundError, RuntimeError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
