"""Batch mutual-information estimator and the adaptation loss terms.

The joint distribution of two categorical prediction streams is estimated
as the batch mean of outer products, symmetrised and renormalised, in the
style of invariant information clustering.  Renormalisation makes the
estimate invariant to a common rescaling of either stream, which is what
lets class-balance-rectified (non-normalised) rows enter the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, EmptyBatchError, ShapeError, UsageError
from .tensor import EPS_LOG, Tensor


@dataclass
class JointDistribution:
    joint: Tensor  # K×K, sums to 1, symmetric
    row: Tensor    # K
    col: Tensor    # K


def joint_distribution(p, q) -> JointDistribution:
    if _is_empty(p) or _is_empty(q):
        raise EmptyBatchError("joint distribution of an empty batch")
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.ndim != 2 or q.ndim != 2 or p.shape != q.shape:
        raise ShapeError(f"prediction streams must both be n×K, got {p.shape} and {q.shape}")
    n = p.shape[0]
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise DomainError("probability rows must be nonnegative")
    j0 = T.matmul(p.T, q) * (1.0 / n)
    j = (j0 + j0.T) * 0.5
    j = j / j.sum()
    return JointDistribution(j, j.sum(axis=1), j.sum(axis=0))


def mutual_information(jd: JointDistribution) -> Tensor:
    K = jd.joint.shape[0]
    outer = T.matmul(jd.row.reshape(K, 1), jd.col.reshape(1, K))
    return (jd.joint * (T.log_clamped(jd.joint, EPS_LOG) - T.log_clamped(outer, EPS_LOG))).sum()


def mi(p, q) -> Tensor:
    return mutual_information(joint_distribution(p, q))


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not match")


def loss_dis(target_probs: Tensor, vil_probs) -> Tensor:
    """Negative MI between target predictions and (constant) teacher predictions."""
    vil = _const(vil_probs)
    _check_pair(target_probs, vil, "loss_dis")
    return -mi(target_probs, vil)


def _is_empty(x) -> bool:
    return x is None or np.size(x.data if isinstance(x, Tensor) else x) == 0


def loss_fr(target_probs_subset: Tensor | None, stored_probs) -> Tensor:
    """Negative MI against stored confident predictions; exact 0 when the subset is empty."""
    if _is_empty(target_probs_subset) or _is_empty(stored_probs):
        if _is_empty(target_probs_subset) != _is_empty(stored_probs):
            raise ShapeError("loss_fr: subset and stored rows disagree on emptiness")
        return Tensor(0.0)
    stored = _const(stored_probs)
    _check_pair(target_probs_subset, stored, "loss_fr")
    return -mi(target_probs_subset, stored)


def loss_im(l_dis: Tensor, l_fr: Tensor) -> Tensor:
    return T.as_tensor(l_dis) + T.as_tensor(l_fr)


def lesion_weight(iteration: int, max_iterations: int, lambda_la: float) -> float:
    """Linearly decaying weight: lambda_la at step 0, zero from half-training on."""
    if max_iterations <= 0:
        raise UsageError("max_iterations must be positive")
    if iteration < 0:
        raise UsageError("iteration must be nonnegative")
    half = max_iterations / 2.0
    return lambda_la * max((half - iteration) / half, 0.0)


def loss_la(target_patch_probs: Tensor | None, rectified_vil_patch_probs, weight: float) -> Tensor:
    """Weighted negative MI over pooled patches; exact 0 for no patches or zero weight."""
    if _is_empty(target_patch_probs) or _is_empty(rectified_vil_patch_probs):
        if _is_empty(target_patch_probs) != _is_empty(rectified_vil_patch_probs):
            raise ShapeError("loss_la: patch sets disagree on emptiness")
        return Tensor(0.0)
    vil = _const(rectified_vil_patch_probs)
    _check_pair(target_patch_probs, vil, "loss_la")
    if weight == 0.0:
        return Tensor(0.0)
    return -mi(target_patch_probs, vil) * float(weight)


@dataclass
class LossReport:
    l_dis: float = 0.0
    l_fr: float = 0.0
    l_im: float = 0.0
    l_la: float = 0.0
    total: float = 0.0
    b_prime: int = 0
    l_patches: int = 0
    lesion_weight: float = 0.0


def total_loss(l_dis: Tensor, l_fr: Tensor, l_la: Tensor, *, b_prime: int = 0,
               l_patches: int = 0, weight: float = 0.0) -> tuple[Tensor, LossReport]:
    """Sum the image-level and patch-level terms and fill a :class:`LossReport`."""
    im = loss_im(l_dis, l_fr)
    total = im + T.as_tensor(l_la)
    report = LossReport(
        l_dis=T.as_tensor(l_dis).item(),
        l_fr=T.as_tensor(l_fr).item(),
        l_im=im.item(),
        l_la=T.as_tensor(l_la).item(),
        total=total.item(),
        b_prime=int(b_prime),
        l_patches=int(l_patches),
        lesion_weight=float(weight),
    )
    return total, report
