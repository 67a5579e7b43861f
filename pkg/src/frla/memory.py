"""Per-sample store of target-model predictions, refreshed once per epoch."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, UsageError
from .models import TargetModel, target_forward_image
from .tensor import no_grad

REFRESH_CHUNK = 256


@dataclass(frozen=True)
class MemoryBank:
    probs: np.ndarray        # n_t × K, detached copies
    epoch_stamp: int
    confidence: np.ndarray   # n_t
    pseudo_label: np.ndarray  # n_t

    @classmethod
    def from_probs(cls, probs, epoch: int) -> "MemoryBank":
        probs = np.array(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError(f"bank rows must be n×K, got {probs.shape}")
        probs.setflags(write=False)
        conf = probs.max(axis=1)
        label = probs.argmax(axis=1)
        conf.setflags(write=False)
        label.setflags(write=False)
        return cls(probs, int(epoch), conf, label)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError(f"sample id out of range for a bank of {len(self)}")
        return ids

    def dump_csv(self, path) -> None:
        K = self.probs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "confidence", "pseudo_label"] + [f"p_{k}" for k in range(K)])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.confidence[i])), int(self.pseudo_label[i])]
                           + [repr(float(v)) for v in self.probs[i]])


def infer_probs(model: TargetModel, images: np.ndarray, chunk: int = REFRESH_CHUNK) -> np.ndarray:
    """Image-level probabilities for every image, no augmentation, no graph."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, images.shape[0], chunk):
            out.append(target_forward_image(model, images[start:start + chunk]).data)
    return np.concatenate(out, axis=0)


def refresh(bank: MemoryBank | None, model: TargetModel, dataset, epoch: int | None = None) -> MemoryBank:
    """Re-run inference on the whole target set and stamp the epoch.

    ``dataset`` is anything with an ``images`` array of shape n×C×H×W.
    """
    images = getattr(dataset, "images", dataset)
    if bank is not None and len(bank) != len(images):
        raise ShapeError(f"dataset has {len(images)} samples but the bank holds {len(bank)}")
    if epoch is None:
        epoch = 0 if bank is None else bank.epoch_stamp + 1
    return MemoryBank.from_probs(infer_probs(model, images), epoch)


def confident_subset(bank: MemoryBank, batch_ids, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Batch members whose stored confidence is >= tau, in batch order, with their rows."""
    if not 0.0 <= tau <= 1.0:
        raise UsageError(f"tau must lie in [0, 1], got {tau}")
    ids = bank._check_ids(batch_ids)
    keep = bank.confidence[ids] >= tau
    sel = ids[keep]
    return sel, bank.probs[sel]


def confident_mask(bank: MemoryBank, batch_ids, tau: float) -> np.ndarray:
    ids = bank._check_ids(batch_ids)
    return bank.confidence[ids] >= tau


def image_label_for_patch_filter(bank: MemoryBank, sample_id: int, tau: float) -> int | None:
    (i,) = bank._check_ids([sample_id])
    if bank.confidence[i] >= tau:
        return int(bank.pseudo_label[i])
    return None


def write_bank(bank: MemoryBank, out_dir) -> Path:
    path = Path(out_dir) / f"bank_epoch{bank.epoch_stamp:03d}.csv"
    bank.dump_csv(path)
    return path
