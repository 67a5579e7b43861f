"""Forgetting-resistant, lesion-aware source-free domain adaptation in numpy.

A small reverse-mode autodiff engine (:mod:`frla.tensor`) drives a target
classifier and a frozen mock vision-language teacher (:mod:`frla.models`).
Adaptation (:func:`frla.trainer.adapt`) combines a mutual-information
distillation loss, a memory-bank loss that keeps confident past
predictions, and a patch-level loss against filtered, class-balanced
teacher patch probabilities.
"""

from .config import RunConfig, load_config
from .errors import FRLAError
from .losses import loss_dis, loss_fr, loss_la, mi, total_loss
from .models import MockViL, TargetModel, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad
from .trainer import adapt, evaluate, pretrain_source, pretrain_teacher

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "FRLAError", "loss_dis", "loss_fr", "loss_la", "mi", "total_loss",
    "MockViL", "TargetModel", "load_checkpoint", "save_checkpoint", "Tensor", "backward", "no_grad",
    "adapt", "evaluate", "pretrain_source", "pretrain_teacher",
]
