"""
Loss ablation on the synthetic benchmark
========================================

Pretrains a source model and a mock teacher for one seed, then adapts with
each combination of loss terms and prints the comparison table.  The
teacher's labels file its mildest class-3 cases under class 1, so plain
distillation inherits that blind spot; watch the class_3 row and the worst
per-class change.

Takes a minute or two on one core.  Run with
``python3 demos/03_ablation.py [seed] [out_dir]``.
"""

import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from frla.benchmark import ABLATIONS, prepare, run_variant
from frla.config import RunConfig
from frla.report import RUNLOG, report
from frla.trainer import cam_lesion_mass

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="frla_ablation_"))
cfg = RunConfig(seed=seed)

prep = prepare(cfg)
print("source model, held-out source:", round(prep.source_val_metrics.average, 1))
print("source model, target domain:  ", round(prep.source_metrics.average, 1))
print("teacher, target domain:       ", round(prep.teacher_metrics.average, 1),
      np.round(prep.teacher_metrics.per_class_accuracy, 1))

###############################################################################
# Adapt once per loss combination and save each run log for the report
# step.  Every log starts with the unadapted model, which becomes the
# table's source column.

runs, cam = [], {"source": cam_lesion_mass(prep.source, prep.bench.target)}
for name in ABLATIONS:
    if name == "source":
        continue
    (out / name).mkdir(parents=True, exist_ok=True)
    model, log = run_variant(cfg, prep, name, out_dir=out / name)
    log.write_jsonl(out / name / RUNLOG)
    runs.append(out / name)
    cam[name] = cam_lesion_mass(model, prep.bench.target)
    print(f"{name:10s} final average {log.final_metrics['average']:.1f}")

###############################################################################
# Comparison table: final per-class accuracy of every run, and the worst
# per-class change against the source model.

table = report(runs, out / "report")
for row in csv.reader(table.open()):
    print(f"{row[0]:>17s}  " + "  ".join(f"{c:>10.10s}" for c in row[1:]))

###############################################################################
# Share of class-activation mass falling inside the lesion masks.

for name, v in cam.items():
    print(f"{name:10s} CAM lesion mass {v:.3f}")
print("\nrun logs and report in", out)
