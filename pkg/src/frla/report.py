"""Summaries over adaptation run directories: curves and a comparison table."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ReportError

RUNLOG = "runlog.jsonl"


@dataclass
class RunSummary:
    name: str
    iterations: list
    epochs: list

    @property
    def baseline(self) -> dict:
        return self.epochs[0]

    @property
    def final(self) -> dict:
        return self.epochs[-1]


def _check_epoch(rec: dict, where: str) -> None:
    for key in ("epoch", "iter", "per_class", "average"):
        if key not in rec:
            raise ReportError(f"{where}: epoch record lacks {key!r}")
    pc = rec["per_class"]
    if not isinstance(pc, list) or not pc or not all(isinstance(v, (int, float)) for v in pc):
        raise ReportError(f"{where}: per_class must be a non-empty list of numbers")


def read_runlog(path) -> RunSummary:
    """Parse a JSON-lines RunLog; any bad line raises ReportError naming file and line."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"no run log at {path}")
    iters, epochs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            where = f"{path}:{lineno}"
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{where}: not valid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ReportError(f"{where}: expected a JSON object")
            kind = rec.get("type")
            if kind == "iter":
                if "iter" not in rec:
                    raise ReportError(f"{where}: iteration record lacks 'iter'")
                iters.append(rec)
            elif kind == "epoch":
                _check_epoch(rec, where)
                epochs.append(rec)
            else:
                raise ReportError(f"{where}: unknown record type {kind!r}")
    if not epochs:
        raise ReportError(f"{path}: no epoch records")
    return RunSummary(path.parent.name, iters, epochs)


def load_runs(run_dirs) -> list[RunSummary]:
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = []
    for d in run_dirs:
        if not d.is_dir():
            raise ReportError(f"run directory not found: {d}")
        if not any(d.iterdir()):
            raise ReportError(f"run directory is empty: {d}")
        runs.append(read_runlog(d / RUNLOG))
    return runs


def write_curve(run: RunSummary, path) -> None:
    """Accuracy against iteration (one row per evaluated epoch)."""
    K = len(run.final["per_class"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "epoch", "average"] + [f"class_{k}" for k in range(K)])
        for rec in run.epochs:
            w.writerow([rec["iter"], rec["epoch"], repr(float(rec["average"]))]
                       + [repr(float(v)) for v in rec["per_class"]])


def comparison_rows(runs: list[RunSummary]) -> tuple[list[str], list[list]]:
    """Header and rows of the per-class comparison against the shared source baseline."""
    base = runs[0].baseline
    for r in runs[1:]:
        if r.baseline["per_class"] != base["per_class"]:
            raise ReportError(f"run {r.name!r} starts from a different source model than {runs[0].name!r}")
    src = np.asarray(base["per_class"], dtype=np.float64)
    K = src.size
    header = ["metric", "source"] + [r.name for r in runs]
    finals = []
    for r in runs:
        pc = np.asarray(r.final["per_class"], dtype=np.float64)
        if pc.size != K:
            raise ReportError(f"run {r.name!r} has {pc.size} classes, baseline has {K}")
        finals.append(pc)
    rows = [["average", float(src.mean())] + [float(pc.mean()) for pc in finals]]
    for k in range(K):
        rows.append([f"class_{k}", float(src[k])] + [float(pc[k]) for pc in finals])
    rows.append(["worst_class_delta", 0.0] + [float((pc - src).min()) for pc in finals])
    return header, rows


def write_comparison(runs: list[RunSummary], path) -> None:
    header, rows = comparison_rows(runs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [f"{v:.4f}" for v in row[1:]])


def report(run_dirs, out_dir) -> Path:
    """Write ``curve_<run>.csv`` per run and ``comparison.csv``; returns the table path."""
    runs = load_runs(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in runs:
        write_curve(r, out / f"curve_{r.name}.csv")
    table = out / "comparison.csv"
    write_comparison(runs, table)
    return table
