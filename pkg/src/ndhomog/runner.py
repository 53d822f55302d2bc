"""Experiment orchestration: parallel samples, resumable raw CSVs, summaries.

Layout of a run directory::

    config.resolved.json   every option, defaults materialized
    raw.csv                one row per (sample, cell), sorted by (cell, sample_index)
    failures.csv           samples whose computation raised (only if any)
    summary.json           statistics recomputed from raw.csv alone
    runinfo.json           wall clock, worker count, solver failures
    plotdata/*.dat         whitespace-delimited tables (``plotdata`` command)

While a run is in progress, rows are appended to ``raw.partial.csv`` and the
sample index is appended to ``done.log`` once all rows of the sample are on
disk; an interrupted run resumes from those two files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from .config import ExperimentConfig
from .stats import StatReport

OUTPUT_ROOT_ENV = "NDHOMOG_OUTPUT_ROOT"


def registry() -> dict:
    from .analysis import HomogRateExperiment, RegularityExperiment
    from .concentration import ConcentrationSuiteExperiment, SensitivityExperiment
    from .corrector import DirichletCheckerboardExperiment, ScalingExperiment
    from .green import BarrierAuditExperiment, GreenDecayExperiment

    exps = [
        ScalingExperiment(),
        DirichletCheckerboardExperiment(),
        GreenDecayExperiment(),
        BarrierAuditExperiment(),
        RegularityExperiment(),
        HomogRateExperiment(),
        SensitivityExperiment(),
        ConcentrationSuiteExperiment(),
    ]
    return {e.kind: e for e in exps}


def experiment_for(cfg: ExperimentConfig):
    return registry()[cfg.kind]


def n_tasks(cfg: ExperimentConfig) -> int:
    exp = experiment_for(cfg)
    return exp.n_tasks(cfg) if hasattr(exp, "n_tasks") else cfg.samples


def _run_task(cfg_json: str, index: int):
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    exp = experiment_for(cfg)
    try:
        return index, exp.sample(cfg, index), None
    except Exception as exc:  # recorded per sample, the run continues
        return index, [], f"{type(exc).__name__}: {exc}".replace("\n", " ") + " | " + \
            traceback.format_exc(limit=2).splitlines()[-1]


def _iter_results(cfg, indices, workers):
    cfg_json = cfg.model_dump_json()
    if workers <= 1 or len(indices) <= 1:
        for i in indices:
            yield _run_task(cfg_json, i)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_run_task, cfg_json, i) for i in indices]
        for f in as_completed(futs):
            yield f.result()


def _sort_key(exp, cfg):
    cells = exp.cells(cfg) if hasattr(exp, "cells") else []
    cell_col = getattr(exp, "cell_column", "eps")

    def key(row):
        c = row.get(cell_col)
        pos = cells.index(c) if c in cells else len(cells)
        rest = tuple(row.get(k) for k in getattr(exp, "order_columns", ()))
        return (pos, row["sample_index"]) + rest

    return key


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(s: str):
    if "_" in s:
        # int() and float() accept digit separators; site labels like 0_1_2 stay text
        return s
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(format_value(r[c]) for c in columns) + "\n")
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: parse_value(v) for k, v in row.items()} for row in reader]


def summarize_rows(cfg, rows, failures=0) -> StatReport:
    exp = experiment_for(cfg)
    rep = exp.summarize(cfg, rows)
    rep.failures += failures
    return rep


def run_in_memory(cfg: ExperimentConfig, workers: int = 1) -> StatReport:
    """Run every sample and summarize, without touching the disk."""
    exp = experiment_for(cfg)
    results = {}
    failures = 0
    for idx, rows, err in _iter_results(cfg, list(range(n_tasks(cfg))), workers):
        results[idx] = rows
        failures += err is not None
    rows = sorted((r for i in sorted(results) for r in results[i]), key=_sort_key(exp, cfg))
    # round-trip through the CSV text so in-memory and on-disk reports agree
    text = rows_to_csv(exp.columns, rows)
    parsed = [{k: parse_value(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]
    return summarize_rows(cfg, parsed, failures)


def output_dir_for(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / cfg.exp_id


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.resolved(), sort_keys=True).encode()).hexdigest()[:16]


class ResumeMismatch(RuntimeError):
    pass


def run_to_dir(cfg: ExperimentConfig, out: Path | None = None, workers: int = 1, log=None) -> StatReport:
    exp = experiment_for(cfg)
    out = Path(out) if out is not None else output_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    resolved = out / "config.resolved.json"
    if resolved.exists():
        old = json.loads(resolved.read_text())
        if old.get("_digest") != digest:
            raise ResumeMismatch(f"{out} holds a run with a different configuration")
    resolved.write_text(json.dumps({**cfg.resolved(), "_digest": digest}, indent=2, sort_keys=True) + "\n")

    partial = out / "raw.partial.csv"
    done_log = out / "done.log"
    fail_path = out / "failures.csv"
    raw = out / "raw.csv"
    total = n_tasks(cfg)
    t0 = time.time()

    if raw.exists() and not partial.exists():
        rows = read_csv(raw)
        failures = read_csv(fail_path) if fail_path.exists() else []
    else:
        done: set[int] = set()
        if done_log.exists():
            done = {int(x) for x in done_log.read_text().split()}
        failed: dict[int, str] = {}
        if fail_path.exists():
            failed = {int(r["sample_index"]): r["error"] for r in read_csv(fail_path)}
        if not partial.exists():
            partial.write_text(",".join(exp.columns) + "\n")
        todo = [i for i in range(total) if i not in done]
        with open(partial, "a", newline="") as ph, open(done_log, "a") as dh:
            for idx, rows_i, err in _iter_results(cfg, todo, workers):
                if err is not None:
                    failed[idx] = err
                text = rows_to_csv(exp.columns, rows_i).split("\n", 1)[1]
                ph.write(text)
                ph.flush()
                os.fsync(ph.fileno())
                dh.write(f"{idx}\n")
                dh.flush()
                if log:
                    log(f"sample {idx} done ({len(rows_i)} rows{', failed' if err else ''})")
        done = {int(x) for x in done_log.read_text().split()}
        rows, seen = [], set()
        for r in read_csv(partial):
            # a sample finished by two overlapping runs appears twice, with identical rows
            key = tuple(format_value(r[c]) for c in exp.columns)
            if r["sample_index"] in done and key not in seen:
                seen.add(key)
                rows.append(r)
        rows.sort(key=_sort_key(exp, cfg))
        raw.write_text(rows_to_csv(exp.columns, rows))
        failures = [{"sample_index": i, "error": failed[i]} for i in sorted(failed)]
        if failures:
            fail_path.write_text(rows_to_csv(("sample_index", "error"),
                                             [{"sample_index": f["sample_index"],
                                               "error": f["error"].replace(",", ";")} for f in failures]))
        partial.unlink()
        done_log.unlink()
        rows = read_csv(raw)

    rep = summarize_rows(cfg, rows, len(failures))
    (out / "summary.json").write_text(rep.to_json() + "\n")
    (out / "runinfo.json").write_text(json.dumps({
        "wall_clock_s": time.time() - t0,
        "workers": workers,
        "samples": total,
        "failures": len(failures),
    }, indent=2) + "\n")
    return rep


def report(run_dir) -> StatReport:
    """Recompute summary.json from raw.csv (bit-identical to the original)."""
    run_dir = Path(run_dir)
    cfg = load_resolved(run_dir)
    rows = read_csv(run_dir / "raw.csv")
    fail_path = run_dir / "failures.csv"
    nfail = len(read_csv(fail_path)) if fail_path.exists() else 0
    rep = summarize_rows(cfg, rows, nfail)
    (run_dir / "summary.json").write_text(rep.to_json() + "\n")
    return rep


def load_resolved(run_dir) -> ExperimentConfig:
    path = Path(run_dir) / "config.resolved.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    data = json.loads(path.read_text())
    data.pop("_digest", None)
    return ExperimentConfig(**data)


def emit_plot_data(run_dir) -> list[Path]:
    """Write one whitespace-delimited table per figure under ``plotdata/``."""
    run_dir = Path(run_dir)
    cfg = load_resolved(run_dir)
    raw = run_dir / "raw.csv"
    if not raw.exists():
        raise FileNotFoundError(f"{raw} not found")
    rows = read_csv(raw)
    exp = experiment_for(cfg)
    rep = summarize_rows(cfg, rows)
    tables = exp.plot_tables(cfg, rep)
    outdir = run_dir / "plotdata"
    outdir.mkdir(exist_ok=True)
    written = []
    for name, (header, trows) in sorted(tables.items()):
        lines = ["# " + " ".join(header)]
        for tr in trows:
            lines.append(" ".join(format_value(float(v)) if isinstance(v, (int, float)) else str(v) for v in tr))
        p = outdir / f"{name}.dat"
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
    return written
