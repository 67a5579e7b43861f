"""``frla`` command line: data generation, pretraining, adaptation, evaluation,
ablation sweeps, CAM export and reports.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import ABLATIONS, Benchmark, build_benchmark
from .config import RunConfig, load_config
from .data import export_pgm, load_dataset, save_dataset
from .errors import ConfigError, FRLAError, UsageError
from .models import MockViL, TargetModel, load_checkpoint, save_checkpoint
from .report import RUNLOG, report
from .trainer import (adapt, cam_lesion_mass, evaluate, evaluate_teacher, export_cam, pretrain_source,
                      pretrain_teacher)

log = logging.getLogger("frla")

DATASETS = ("source_train", "source_val", "target", "teacher_corpus", "teacher_val")
EFFECTIVE_CONFIG = "effective_config.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable, wins over the file)")
    common.add_argument("--out", help="output directory (same as --set out_dir=...)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="frla", description="Source-free adaptation on the synthetic fundus benchmark.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate and save the synthetic benchmark")
    sub.add_parser("pretrain-source", parents=[common], help="train the source model")
    sub.add_parser("pretrain-teacher", parents=[common], help="train and freeze the mock teacher")
    sub.add_parser("adapt", parents=[common], help="adapt the source model on the target domain")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a labelled dataset")
    ev.add_argument("--model", help="checkpoint (default: source_ckpt)")
    ev.add_argument("--dataset", default="target", choices=DATASETS)
    sub.add_parser("ablate", parents=[common], help="source-only plus the four loss combinations")
    cam = sub.add_parser("cam", parents=[common], help="export a class activation map as PGM")
    cam.add_argument("--model", help="target-model checkpoint (default: source_ckpt)")
    cam.add_argument("--index", type=int, default=0, help="target image index")
    cam.add_argument("--class", dest="class_index", type=int, help="class (default: the image's label)")
    rep = sub.add_parser("report", parents=[common], help="curves and comparison table for run dirs")
    rep.add_argument("runs", nargs="*", help="run directories holding runlog.jsonl")
    return p


# plumbing -------------------------------------------------------------------

class _Data:
    """Datasets from ``data_dir`` when set, otherwise generated (once) from the seed."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._bench: Benchmark | None = None

    def __getitem__(self, name: str):
        if self.cfg.data_dir:
            return load_dataset(Path(self.cfg.data_dir) / name)
        if self._bench is None:
            self._bench = build_benchmark(self.cfg)
        return getattr(self._bench, name)


def _check_paths(cfg: RunConfig) -> None:
    if cfg.data_dir and not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data_dir not found: {cfg.data_dir}")
    for key in ("source_ckpt", "teacher_ckpt"):
        path = getattr(cfg, key)
        if path and not Path(path).is_file():
            raise ConfigError(f"{key} not found: {path}")


def _source(cfg: RunConfig, data: _Data) -> TargetModel:
    if cfg.source_ckpt:
        model = load_checkpoint(cfg.source_ckpt)
        if not isinstance(model, TargetModel):
            raise ConfigError(f"{cfg.source_ckpt} is not a target-model checkpoint")
        return model
    log.info("no source_ckpt given, pretraining the source model")
    return pretrain_source(cfg, data["source_train"], data["source_val"])[0]


def _teacher(cfg: RunConfig, data: _Data) -> MockViL:
    if cfg.teacher_ckpt:
        model = load_checkpoint(cfg.teacher_ckpt)
        if not isinstance(model, MockViL):
            raise ConfigError(f"{cfg.teacher_ckpt} is not a teacher checkpoint")
        return model
    log.info("no teacher_ckpt given, pretraining the teacher")
    return pretrain_teacher(cfg, data["teacher_corpus"], data["teacher_val"])[0]


def write_metrics(path, metrics, label: str = "model") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "average"] + [f"class_{k}" for k in range(len(metrics.per_class_accuracy))])
        w.writerow([label, f"{metrics.average:.4f}"] + [f"{v:.4f}" for v in metrics.per_class_accuracy])


def _write_history(path, history) -> None:
    keys = sorted({k for e in history for k in e})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


def _run_adapt(cfg: RunConfig, source, teacher, target, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    model, runlog = adapt(cfg, source, teacher, target.unlabeled(), target, out_dir=out)
    save_checkpoint(model, out / "model.ckpt")
    runlog.write_jsonl(out / RUNLOG)
    write_metrics(out / "metrics.csv", evaluate(model, target), "adapted")
    return model, runlog


# subcommands ------------------------------------------------------------------

def cmd_gen_data(cfg, args, out: Path) -> None:
    bench = build_benchmark(cfg)
    for name in DATASETS:
        save_dataset(getattr(bench, name), out / name)
    for k in range(cfg.num_classes):
        hits = np.flatnonzero(bench.target.labels == k)
        if hits.size:
            export_pgm(bench.target.images[hits[0]], out / f"target_example_class{k}.pgm")
    print(f"wrote {len(DATASETS)} datasets to {out}")


def cmd_pretrain_source(cfg, args, out: Path) -> None:
    data = _Data(cfg)
    model, history = pretrain_source(cfg, data["source_train"], data["source_val"])
    save_checkpoint(model, out / "source.ckpt")
    _write_history(out / "history.csv", history)
    m = evaluate(model, data["source_val"])
    write_metrics(out / "metrics.csv", m, "source_val")
    print(f"source model: held-out source average {m.average:.2f}; saved {out / 'source.ckpt'}")


def cmd_pretrain_teacher(cfg, args, out: Path) -> None:
    data = _Data(cfg)
    vil, history = pretrain_teacher(cfg, data["teacher_corpus"], data["teacher_val"])
    save_checkpoint(vil, out / "teacher.ckpt")
    _write_history(out / "history.csv", history)
    m = evaluate_teacher(vil, data["teacher_val"])
    write_metrics(out / "metrics.csv", m, "teacher_val")
    print(f"teacher: validation average {m.average:.2f}; saved {out / 'teacher.ckpt'}")


def cmd_adapt(cfg, args, out: Path) -> None:
    data = _Data(cfg)
    source, teacher = _source(cfg, data), _teacher(cfg, data)
    _, runlog = _run_adapt(cfg, source, teacher, data["target"], out)
    first, last = runlog.epochs[0], runlog.epochs[-1]
    print(f"target average {first['average']:.2f} -> {last['average']:.2f} after {cfg.epochs} epochs")


def cmd_eval(cfg, args, out: Path) -> None:
    path = args.model or cfg.source_ckpt
    if not path:
        raise ConfigError("eval needs --model or source_ckpt")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    ds = _Data(cfg)[args.dataset]
    m = evaluate_teacher(model, ds) if isinstance(model, MockViL) else evaluate(model, ds)
    write_metrics(out / "metrics.csv", m, Path(path).stem)
    print(f"{args.dataset}: average {m.average:.2f}  per class {np.round(m.per_class_accuracy, 2).tolist()}")


def cmd_ablate(cfg, args, out: Path) -> None:
    data = _Data(cfg)
    target = data["target"]
    source, teacher = _source(cfg, data), _teacher(cfg, data)
    (out / "source").mkdir(exist_ok=True)
    write_metrics(out / "source" / "metrics.csv", evaluate(source, target), "source")
    cam_rows = [("source", cam_lesion_mass(source, target))]
    dirs = []
    for name, flags in ABLATIONS.items():
        if flags is None:
            continue
        run_cfg = cfg.replace(enable_dis=flags[0], enable_fr=flags[1], enable_la=flags[2])
        log.info("ablation %s", name)
        model, _ = _run_adapt(run_cfg, source, teacher, target, out / name)
        cam_rows.append((name, cam_lesion_mass(model, target)))
        dirs.append(out / name)
    table = report(dirs, out)
    with open(out / "cam_lesion_mass.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "cam_lesion_mass"])
        w.writerows((n, f"{v:.6f}") for n, v in cam_rows)
    print(table.read_text(), end="")


def cmd_cam(cfg, args, out: Path) -> None:
    data = _Data(cfg)
    if args.model:
        if not Path(args.model).is_file():
            raise ConfigError(f"checkpoint not found: {args.model}")
        model = load_checkpoint(args.model)
    else:
        model = _source(cfg, data)
    if not isinstance(model, TargetModel):
        raise ConfigError("cam needs a target-model checkpoint")
    ds = data["target"]
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} outside 0..{len(ds) - 1}")
    k = int(ds.labels[args.index]) if args.class_index is None else args.class_index
    path = out / f"cam_{args.index}_class{k}.pgm"
    _, constant = export_cam(model, ds.images[args.index], k, path)
    export_pgm(ds.images[args.index], out / f"image_{args.index}.pgm")
    if constant:
        log.warning("constant activation map for image %d class %d; wrote zeros", args.index, k)
    print(f"wrote {path}")


def cmd_report(cfg, args, out: Path) -> None:
    table = report(args.runs, out)
    print(table.read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-source": cmd_pretrain_source,
    "pretrain-teacher": cmd_pretrain_teacher, "adapt": cmd_adapt, "eval": cmd_eval,
    "ablate": cmd_ablate, "cam": cmd_cam, "report": cmd_report,
}


def run(argv=None, env=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set) + ([f"out_dir={args.out}"] if args.out else [])
        cfg = load_config(args.config, overrides, env)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_paths(cfg)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / EFFECTIVE_CONFIG)
    except (UsageError, ConfigError) as exc:
        print(f"frla: error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args, out)
    except (UsageError, ConfigError) as exc:
        print(f"frla: error: {exc}", file=sys.stderr)
        return 1
    except (FRLAError, OSError, ValueError) as exc:
        print(f"frla: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
