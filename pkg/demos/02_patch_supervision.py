"""
Memory bank and teacher patch supervision
=========================================

Walks one adaptation batch through the pseudo-label bank, the teacher patch
filter and the class-balance rectification, then shows the per-class
activation map of the source model.  Uses small datasets so it runs in
well under a minute.

Run with ``python3 demos/02_patch_supervision.py``.
"""

import numpy as np

from frla.benchmark import build_benchmark
from frla.config import RunConfig
from frla.memory import confident_subset, refresh
from frla.models import vil_forward_patches
from frla.patches import filter_inconsistent, rectify_class_balance
from frla.trainer import evaluate, evaluate_teacher, export_cam, pretrain_source, pretrain_teacher

cfg = RunConfig(n_source=120, n_source_val=30, n_target=60, n_teacher=120,
                source_epochs=25, teacher_epochs=25, tau=0.55)
bench = build_benchmark(cfg)
source, _ = pretrain_source(cfg, bench.source_train)
teacher, _ = pretrain_teacher(cfg, bench.teacher_corpus)
print("source model on target, per class:", np.round(evaluate(source, bench.target).per_class_accuracy, 1))
print("teacher on target, per class:     ", np.round(evaluate_teacher(teacher, bench.target).per_class_accuracy, 1))

###############################################################################
# The bank holds the source model's predictions for every target image.
# Only rows at or above the confidence threshold count as pseudo-labels.

bank = refresh(None, source, bench.target.unlabeled(), epoch=0)
ids = np.arange(8)
kept, rows = confident_subset(bank, ids, cfg.tau)
print("\nbatch confidence", np.round(bank.confidence[ids], 2))
print("confident ids   ", kept, "pseudo-labels", bank.pseudo_label[kept])

###############################################################################
# Each teacher patch votes for a class.  On a confidently labelled image,
# patches voting for a different class are dropped; other images keep all
# their patches.

patches = vil_forward_patches(teacher, bench.target.images[ids]).data
B, H, W, K = patches.shape
batch = filter_inconsistent(patches, bank, ids, cfg.tau)
print(f"\n{B * H * W} teacher patches, {batch.l} kept after filtering")

###############################################################################
# Rectification divides every kept row by how many kept rows share its
# argmax, so a dominant class cannot drown out a rare one.

rect = rectify_class_balance(batch)
votes = batch.probs.argmax(axis=1)
print("patches per class      ", np.bincount(votes, minlength=K))
print("mass per class before  ", np.round(np.bincount(votes, batch.probs.max(axis=1), minlength=K), 2))
print("mass per class after   ", np.round(np.bincount(votes, rect.probs.max(axis=1), minlength=K), 2))

###############################################################################
# Class activation map for the first image's true class, on the patch grid.

label = int(bench.target.labels[0])
heat, _ = export_cam(source, bench.target.images[0], label)
print(f"\nCAM for class {label} (lesion mask sum {int(bench.target.masks[0].sum())}):")
print(np.round(heat, 2))
