"""Pretraining, the adaptation loop, evaluation and CAM export."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import LabeledDataset, UnlabeledDataset, augment_batch, batch_iter, num_batches, write_pgm
from .errors import EvaluationError, ShapeError, TrainingError
from .losses import LossReport, lesion_weight, loss_dis, loss_fr, loss_la, total_loss
from .memory import confident_mask, infer_probs, refresh, write_bank
from .models import (Architecture, MockViL, TargetModel, target_forward_patches, target_heads,
                     vil_forward_image, vil_heads)
from .patches import filter_inconsistent, rectify_class_balance, target_patches_aligned
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

# pretraining only; the normalised teacher head otherwise produces rare huge steps
PRETRAIN_CLIP = 2.0


# optimiser ------------------------------------------------------------------

def sgd_momentum_step(params, grads, state: dict, lr: float, momentum: float) -> None:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p -= lr * v``.

    ``params`` and ``grads`` are parallel sequences (a ``None`` gradient
    counts as zero); ``state`` maps parameter index to its velocity and is
    filled lazily with zeros.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.get(i)
        if v is None:
            v = state[i] = np.zeros_like(p.data)
        if v.shape != p.data.shape:
            raise ShapeError(f"velocity {i} has shape {v.shape}, parameter has {p.data.shape}")
        if g is not None:
            g = np.asarray(g)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.data.shape}")
            v *= momentum
            v += g
        else:
            v *= momentum
        p.data = p.data - lr * v


class SGD:
    def __init__(self, params, lr: float, momentum: float):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.momentum)


# evaluation -----------------------------------------------------------------

@dataclass
class Metrics:
    per_class_accuracy: np.ndarray
    average: float
    n_per_class: np.ndarray

    def to_dict(self) -> dict:
        return {"per_class": [float(v) for v in self.per_class_accuracy], "average": float(self.average),
                "n_per_class": [int(v) for v in self.n_per_class]}


def metrics_from_predictions(pred, labels, num_classes: int) -> Metrics:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    n = np.bincount(labels, minlength=num_classes)
    empty = np.flatnonzero(n == 0)
    if empty.size:
        raise EvaluationError(f"class {int(empty[0])} has no evaluation samples")
    correct = np.bincount(labels[pred == labels], minlength=num_classes)
    acc = correct / n * 100.0
    return Metrics(acc, float(acc.mean()), n)


def evaluate(model: TargetModel, ds: LabeledDataset) -> Metrics:
    """Average (unweighted) per-class accuracy, in percent, without augmentation."""
    probs = infer_probs(model, ds.images)
    return metrics_from_predictions(probs.argmax(axis=1), ds.labels, ds.num_classes)


def evaluate_teacher(vil: MockViL, ds: LabeledDataset, chunk: int = 256) -> Metrics:
    with no_grad():
        probs = np.concatenate([vil_forward_image(vil, ds.images[s:s + chunk]).data
                                for s in range(0, len(ds), chunk)])
    return metrics_from_predictions(probs.argmax(axis=1), ds.labels, ds.num_classes)


# pretraining ----------------------------------------------------------------

def cross_entropy(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return (T.log_clamped(probs) * Tensor(onehot)).sum() * (-1.0 / labels.size)


def _derive(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def _supervised(params, forward, train: LabeledDataset, epochs: int, cfg: RunConfig, seed: int,
                val: LabeledDataset | None = None, eval_fn=None, what: str = "model"):
    opt = SGD(params, cfg.pretrain_lr, cfg.momentum)
    best, best_state, history = -1.0, None, []
    it = 0
    for epoch in range(epochs):
        total = 0.0
        for ids, x, y in batch_iter(train, cfg.batch_size, shuffle_seed=[seed, epoch]):
            if cfg.augment:
                x = augment_batch(x, [seed, epoch, it])
            loss = cross_entropy(forward(x), y)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"{what}: non-finite loss at iteration {it}")
            opt.zero_grad()
            backward(loss)
            clip_grad_norm(params, PRETRAIN_CLIP)
            opt.step()
            total += loss.item() * len(ids)
            it += 1
        entry = {"epoch": epoch, "loss": total / len(train)}
        if val is not None:
            m = eval_fn(val)
            entry["val_average"] = m.average
            if m.average > best:
                best, best_state = m.average, [p.data.copy() for p in params]
        history.append(entry)
        log.debug("%s epoch %d: %s", what, epoch, entry)
    if best_state is not None:
        for p, d in zip(params, best_state):
            p.data = d
    return history


def pretrain_source(cfg: RunConfig, source_train: LabeledDataset, source_val: LabeledDataset | None = None):
    """Cross-entropy training of the source model; keeps the best-validation weights.

    Returns ``(model, history)``.
    """
    arch = Architecture(kind="target", image_size=cfg.image_size, num_classes=cfg.num_classes,
                        logit_scale=cfg.target_logit_scale, bottleneck_relu=cfg.bottleneck_relu)
    model = TargetModel(arch, seed=_derive(cfg.seed, 11))
    history = _supervised(model.parameters(), lambda x: target_heads(model, x)[0], source_train,
                          cfg.source_epochs, cfg, _derive(cfg.seed, 12), source_val,
                          lambda ds: evaluate(model, ds), "source")
    return model, history


def pretrain_teacher(cfg: RunConfig, corpus: LabeledDataset, val: LabeledDataset | None = None):
    """Train encoder and projection against a fixed unit-norm text matrix, then freeze."""
    arch = Architecture(kind="vil", image_size=cfg.image_size, num_classes=cfg.num_classes,
                        logit_scale=cfg.teacher_logit_scale)
    vil = MockViL(arch, seed=_derive(cfg.seed, 21))
    vil.set_trainable(True)
    trainable = [p for p in vil.parameters() if p.requires_grad]
    history = _supervised(trainable, lambda x: vil_forward_image(vil, x), corpus, cfg.teacher_epochs,
                          cfg, _derive(cfg.seed, 22), val, lambda ds: evaluate_teacher(vil, ds), "teacher")
    vil.freeze()
    return vil, history


# adaptation -----------------------------------------------------------------

@dataclass
class RunLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def records(self):
        """Iteration and epoch records in chronological order."""
        out, ei = [], 0
        for rec in self.iterations:
            while ei < len(self.epochs) and self.epochs[ei]["iter"] <= rec["iter"]:
                out.append(self.epochs[ei])
                ei += 1
            out.append(rec)
        out.extend(self.epochs[ei:])
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @property
    def final_metrics(self) -> dict | None:
        return self.epochs[-1] if self.epochs else None


def _iteration_record(it: int, epoch: int, rep: LossReport) -> dict:
    d = {"type": "iter", "iter": it, "epoch": epoch}
    d.update(asdict(rep))
    return d


def _epoch_record(epoch: int, it: int, m: Metrics) -> dict:
    return {"type": "epoch", "epoch": epoch, "iter": it,
            "per_class": [float(v) for v in m.per_class_accuracy], "average": float(m.average)}


def frla_loss(cfg: RunConfig, model: TargetModel, teacher: MockViL, x, ids, bank, weight: float,
              patch_csv=None) -> tuple[Tensor, LossReport]:
    """Total adaptation loss of one batch, honouring the ablation switches.

    ``ids`` index the batch rows into ``bank``; ``weight`` is the current
    lesion-loss weight (0 skips the patch branch entirely).
    """
    t_img, t_patch = target_heads(model, x)
    with no_grad():
        v_img, v_patch = vil_heads(teacher, x)

    l_dis = loss_dis(t_img, v_img) if cfg.enable_dis else Tensor(0.0)

    b_prime = 0
    l_fr = Tensor(0.0)
    if cfg.enable_fr:
        mask = confident_mask(bank, ids, cfg.tau)
        b_prime = int(mask.sum())
        if b_prime:
            l_fr = loss_fr(T.take(t_img, np.flatnonzero(mask)), bank.probs[ids[mask]])

    l_la, n_patches = Tensor(0.0), 0
    if cfg.enable_la and weight > 0.0:
        kept = filter_inconsistent(v_patch, bank, ids, cfg.tau, cfg.drop_unconfident)
        n_patches = kept.l
        if n_patches:
            rect = rectify_class_balance(kept)
            aligned = target_patches_aligned(t_patch, rect.provenance)
            l_la = loss_la(aligned, rect.probs, weight)
            if patch_csv is not None:
                kept.dump_csv(patch_csv)
    return total_loss(l_dis, l_fr, l_la, b_prime=b_prime, l_patches=n_patches,
                      weight=weight if cfg.enable_la else 0.0)


def adapt(cfg: RunConfig, source: TargetModel, teacher: MockViL, target, target_eval: LabeledDataset | None = None,
          out_dir=None):
    """Source-free adaptation of a copy of ``source`` on unlabeled ``target`` images.

    ``target`` only needs an ``images`` array; labels, if present, are never
    read.  ``target_eval`` is used for per-epoch evaluation only.  Epoch
    record 0 is the unadapted model.  Returns ``(model, RunLog)``.
    """
    if any(p.requires_grad for p in teacher.parameters()):
        raise TrainingError("teacher must be frozen before adaptation")
    images = np.asarray(target.images, dtype=np.float64)
    a = source.arch
    if images.ndim != 4 or images.shape[1:] != (a.channels, a.image_size, a.image_size):
        raise ShapeError(f"target images {images.shape} do not match the model geometry")

    model = source.copy()
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum)
    runlog = RunLog()
    t0 = time.perf_counter()
    n = images.shape[0]
    per_epoch = num_batches(n, cfg.batch_size)
    i_max = cfg.epochs * per_epoch
    it = 0
    if target_eval is not None:
        runlog.epochs.append(_epoch_record(0, 0, evaluate(model, target_eval)))

    view = UnlabeledDataset(images)  # the loop never sees labels
    bank = None
    for epoch in range(cfg.epochs):
        if bank is None or not cfg.freeze_bank:
            bank = refresh(bank, model, view, epoch)
            if out_dir is not None and cfg.dump_bank:
                write_bank(bank, out_dir)
        for ids, x, _ in batch_iter(view, cfg.batch_size, shuffle_seed=[_derive(cfg.seed, 31), epoch]):
            if cfg.augment:
                x = augment_batch(x, [_derive(cfg.seed, 32), epoch, it])
            weight = lesion_weight(it, i_max, cfg.lambda_la) if cfg.enable_la else 0.0
            patch_csv = (Path(out_dir) / f"patches_iter{it:05d}.csv"
                         if out_dir is not None and cfg.dump_patches else None)
            total, rep = frla_loss(cfg, model, teacher, x, ids, bank, weight, patch_csv)
            if not np.isfinite(rep.total):
                raise TrainingError(f"non-finite loss at iteration {it}")
            opt.zero_grad()
            backward(total)
            opt.step()
            runlog.iterations.append(_iteration_record(it, epoch, rep))
            it += 1
        if target_eval is not None:
            runlog.epochs.append(_epoch_record(epoch + 1, it, evaluate(model, target_eval)))
    runlog.wall_clock = time.perf_counter() - t0
    return model, runlog


# CAM ------------------------------------------------------------------------

def export_cam(model: TargetModel, image: np.ndarray, class_index: int, path=None):
    """Min-max normalised per-patch probability map for ``class_index``.

    Returns ``(heatmap, constant)``; a constant map comes back as zeros with
    ``constant=True``.  When ``path`` is given the map is written as PGM,
    upscaled to the input resolution.
    """
    K = model.arch.num_classes
    if not 0 <= class_index < K:
        raise ValueError(f"class_index {class_index} outside 0..{K - 1}")
    with no_grad():
        p = target_forward_patches(model, np.asarray(image, dtype=np.float64)[None]).data[0, :, :, class_index]
    lo, hi = p.min(), p.max()
    constant = not hi > lo
    heat = np.zeros_like(p) if constant else (p - lo) / (hi - lo)
    if path is not None:
        write_pgm(path, heat, scale=max(1, model.arch.image_size // heat.shape[0]))
    return heat, constant


def upsample_nearest(heat: np.ndarray, size: int) -> np.ndarray:
    G = heat.shape[0]
    idx = np.minimum((np.arange(size) * G) // size, G - 1)
    return heat[np.ix_(idx, idx)]


def cam_lesion_mass(model: TargetModel, ds: LabeledDataset, ids=None) -> float:
    """Mean share of CAM mass (true class) that falls inside the planted lesion mask.

    Only images with a non-empty mask take part.
    """
    if ds.masks is None:
        raise EvaluationError("dataset carries no lesion masks")
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids)
    with no_grad():
        patches = np.concatenate([target_forward_patches(model, ds.images[ids[s:s + 256]]).data
                                  for s in range(0, ids.size, 256)])
    shares = []
    for j, i in enumerate(ids):
        mask = ds.masks[i]
        if not mask.any():
            continue
        p = patches[j, :, :, ds.labels[i]]
        lo, hi = p.min(), p.max()
        if not hi > lo:
            continue
        heat = upsample_nearest((p - lo) / (hi - lo), mask.shape[0])
        shares.append(float((heat * mask).sum() / heat.sum()))
    if not shares:
        raise EvaluationError("no lesion-bearing images with a non-constant CAM")
    return float(np.mean(shares))
