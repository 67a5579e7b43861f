"""The synthetic source -> target benchmark and the loss-ablation sweep."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import (TARGET_SHIFT, DomainShift, LabeledDataset, SynthSpec, concat, generate,
                   generate_diverse)
from .trainer import Metrics, _derive, adapt, evaluate, evaluate_teacher, pretrain_source, pretrain_teacher

# (enable_dis, enable_fr, enable_la); "source" means no adaptation at all
ABLATIONS = {
    "source": None,
    "dis": (True, False, False),
    "dis+fr": (True, True, False),
    "dis+la": (True, False, True),
    "dis+fr+la": (True, True, True),
}


@dataclass
class Benchmark:
    source_train: LabeledDataset
    source_val: LabeledDataset
    target: LabeledDataset
    teacher_corpus: LabeledDataset
    teacher_val: LabeledDataset


def synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(num_classes=cfg.num_classes, image_size=cfg.image_size)


def target_shift(cfg: RunConfig) -> DomainShift:
    return TARGET_SHIFT.scaled(cfg.shift_strength)


def mislabel_mild(ds: LabeledDataset, cls: int, to: int, rate: float) -> LabeledDataset:
    """Relabel the ``rate`` fraction of class ``cls`` with the smallest lesion area as ``to``.

    Mild cases being filed under another class is a consistent annotation
    bias, so a model trained on these labels inherits it.
    """
    K = ds.num_classes
    if rate <= 0 or cls == to or not (0 <= cls < K and 0 <= to < K):
        return ds
    members = np.flatnonzero(ds.labels == cls)
    area = ds.masks[members].sum(axis=(1, 2))
    n_hit = int(round(rate * members.size))
    hit = members[np.argsort(area, kind="stable")[:n_hit]]
    labels = ds.labels.copy()
    labels[hit] = to
    return LabeledDataset(ds.images, labels, K, ds.domain, ds.split, ds.masks)


def _pooled(spec: SynthSpec, cfg: RunConfig, n: int, tags, split: str) -> LabeledDataset:
    # thirds: source camera, target camera, a random camera per image
    third = n // 3
    sizes = (n - 2 * third, third, third)
    return concat([
        generate(spec, DomainShift(), sizes[0], _derive(cfg.seed, tags[0]), domain="pooled", split=split),
        generate(spec, target_shift(cfg), sizes[1], _derive(cfg.seed, tags[1]), domain="pooled", split=split),
        generate_diverse(spec, sizes[2], _derive(cfg.seed, tags[2])),
    ], split=split)


def build_benchmark(cfg: RunConfig) -> Benchmark:
    """Generate every dataset from ``cfg.seed``.

    The teacher corpus pools images from the source camera, the target
    camera and many random cameras (never the evaluation images).  Its
    labels, and those of its validation split, carry a systematic blind
    spot (see :func:`mislabel_mild`).
    """
    spec = synth_spec(cfg)
    ident = DomainShift()
    src = generate(spec, ident, cfg.n_source, _derive(cfg.seed, 1), domain="source", split="train")
    val = generate(spec, ident, cfg.n_source_val, _derive(cfg.seed, 2), domain="source", split="val")
    tgt = generate(spec, target_shift(cfg), cfg.n_target, _derive(cfg.seed, 3), domain="target", split="test")
    pooled = _pooled(spec, cfg, cfg.n_teacher, (4, 5, 9), "train")
    tval = _pooled(spec, cfg, cfg.n_source_val, (7, 8, 10), "val")
    pooled, tval = (mislabel_mild(ds, cfg.teacher_noise_class, cfg.teacher_noise_to, cfg.teacher_noise_rate)
                    for ds in (pooled, tval))
    return Benchmark(src, val, tgt, pooled, tval)


@dataclass
class Prepared:
    bench: Benchmark
    source: object
    teacher: object
    source_metrics: Metrics      # on the target domain
    source_val_metrics: Metrics  # on held-out source data
    teacher_metrics: Metrics     # on the target domain


def prepare(cfg: RunConfig, bench: Benchmark | None = None) -> Prepared:
    bench = bench or build_benchmark(cfg)
    source, _ = pretrain_source(cfg, bench.source_train, bench.source_val)
    teacher, _ = pretrain_teacher(cfg, bench.teacher_corpus, bench.teacher_val)
    return Prepared(bench, source, teacher, evaluate(source, bench.target),
                    evaluate(source, bench.source_val), evaluate_teacher(teacher, bench.target))


def run_variant(cfg: RunConfig, prep: Prepared, name: str, out_dir=None):
    """Adapt with the loss switches of ablation ``name``; returns (model, RunLog)."""
    flags = ABLATIONS[name]
    if flags is None:
        run_cfg = cfg.replace(epochs=0)
    else:
        run_cfg = cfg.replace(enable_dis=flags[0], enable_fr=flags[1], enable_la=flags[2])
    return adapt(run_cfg, prep.source, prep.teacher, prep.bench.target.unlabeled(), prep.bench.target,
                 out_dir=out_dir)
