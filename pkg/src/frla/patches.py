"""Teacher patch filtering and class-balance rectification."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyBatchError, ShapeError
from .memory import MemoryBank
from .tensor import Tensor


@dataclass(frozen=True)
class PatchBatch:
    probs: np.ndarray       # l × K
    provenance: np.ndarray  # l × 3 rows of (batch position, row, col)
    sample_ids: np.ndarray  # l, dataset id of each patch's image
    rectified: bool = False

    @property
    def l(self) -> int:
        return self.probs.shape[0]

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "row", "col", "argmax", "max_prob"])
            for sid, (_, r, c), p in zip(self.sample_ids, self.provenance, self.probs):
                w.writerow([int(sid), int(r), int(c), int(np.argmax(p)), repr(float(np.max(p)))])


def filter_inconsistent(vil_patches, bank: MemoryBank, batch_ids, tau: float,
                        drop_unconfident: bool = False) -> PatchBatch:
    """Drop teacher patches whose argmax disagrees with a confident bank label.

    Images without a confident bank label keep all their patches unless
    ``drop_unconfident`` is set.  Output order is (batch position, row, col).
    """
    probs = vil_patches.data if isinstance(vil_patches, Tensor) else np.asarray(vil_patches, dtype=np.float64)
    if probs.ndim != 4:
        raise ShapeError(f"patch probabilities must be B×H×W×K, got {probs.shape}")
    B, H, W, K = probs.shape
    ids = np.asarray(batch_ids, dtype=np.intp).reshape(-1)
    if ids.size != B:
        raise IndexError(f"{ids.size} batch ids for {B} images")
    if ids.size and (ids.min() < 0 or ids.max() >= len(bank)):
        raise IndexError(f"batch id out of range for a bank of {len(bank)}")

    confident = bank.confidence[ids] >= tau
    labels = bank.pseudo_label[ids]
    patch_label = probs.argmax(axis=-1)                        # B×H×W
    keep = np.where(confident[:, None, None], patch_label == labels[:, None, None],
                    not drop_unconfident)
    b, r, c = np.nonzero(keep)                                 # row-major = (b, r, c) order
    prov = np.stack([b, r, c], axis=1)
    return PatchBatch(probs[b, r, c].copy(), prov, ids[b])


def rectify_class_balance(patches: PatchBatch) -> PatchBatch:
    """Divide each retained row by the number of retained rows sharing its argmax."""
    if patches.l == 0:
        raise EmptyBatchError("no patches left to rectify")
    labels = patches.probs.argmax(axis=1)
    counts = np.bincount(labels, minlength=patches.probs.shape[1])
    rect = patches.probs / counts[labels][:, None]
    return PatchBatch(rect, patches.provenance, patches.sample_ids, rectified=True)


def target_patches_aligned(target_patches: Tensor, provenance) -> Tensor:
    """Gather target patch rows in provenance order (differentiable)."""
    B, H, W, K = target_patches.shape
    prov = np.asarray(provenance, dtype=np.intp).reshape(-1, 3)
    b, r, c = prov[:, 0], prov[:, 1], prov[:, 2]
    if np.any((b < 0) | (b >= B) | (r < 0) | (r >= H) | (c < 0) | (c >= W)):
        raise IndexError("provenance outside the target patch grid")
    flat = (b * H + r) * W + c
    return T.take(target_patches.reshape(B * H * W, K), flat)
