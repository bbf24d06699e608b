"""Fraction-regression pretraining: pooling, head, losses, EMA teacher.

The student maps the stage-4 encoder output through global average
pooling and a single-hidden-layer MLP with a sigmoid to per-bin
fraction estimates. Supervision is an L1 loss against the tile's
land-cover fractions; a slowly updated teacher copy adds an L1
consistency term that regularizes the student against noisy targets.

Predicted fractions are *not* renormalized to sum to 1 — the sigmoid
constrains each bin to (0, 1) independently; only supervision targets
carry the sum-to-1 invariant.
"""

from __future__ import annotations

import copy
import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .backbone import MultiSourceEncoder
from .config import ModelConfig
from .structures import FRACTION_BINS

log = logging.getLogger(__name__)


def global_pool(x: torch.Tensor) -> torch.Tensor:
    """Spatiotemporal global average pooling.

    ``[B, T, H, W, C]`` -> ``[B, C]`` (or ``[T, H, W, C]`` -> ``[C]``):
    each channel is the mean over every (t, h, w) position.
    """
    if x.ndim == 5:
        return x.mean(dim=(1, 2, 3))
    if x.ndim == 4:
        return x.mean(dim=(0, 1, 2))
    raise ValueError(f"expected a 4-d or 5-d stage feature map, got shape {tuple(x.shape)}")


class FractionHead(nn.Module):
    """sigmoid(W2 . relu(W1 x + b1) + b2) -> 9 fraction estimates in (0, 1)."""

    def __init__(self, in_dim: int, hidden_dim: int, bins: int = FRACTION_BINS):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, bins)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x))))


def l1_fraction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample sum of absolute bin differences."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = (pred - target).abs().sum(dim=-1)
    return diff.mean()


def teacher_consistency_loss(teacher_pred: torch.Tensor, student_pred: torch.Tensor) -> torch.Tensor:
    """L1 consistency against the teacher's estimate.

    The teacher output is treated as a constant: gradients reach student
    parameters only.
    """
    return l1_fraction_loss(student_pred, teacher_pred.detach())


@torch.no_grad()
def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor], step: float) -> None:
    """In-place ``theta_t <- (1 - step) * theta_t + step * theta_s``.

    ``step`` is the student mixing weight (the "minimal step"); the
    default configuration uses 0.001, i.e. the teacher keeps 0.999 of
    its own state each update.
    """
    if not 0.0 < step < 1.0:
        raise ValueError(f"EMA step must be in (0, 1), got {step}")
    t_keys, s_keys = set(teacher), set(student)
    if t_keys != s_keys:
        raise ValueError(f"teacher/student key sets differ: {sorted(t_keys ^ s_keys)}")
    for name, t_param in teacher.items():
        s_param = student[name]
        if t_param.shape != s_param.shape:
            raise ValueError(f"teacher/student shape mismatch for {name!r}: {tuple(t_param.shape)} vs {tuple(s_param.shape)}")
        t_param.mul_(1.0 - step).add_(s_param, alpha=step)


class PretrainModel(nn.Module):
    """Encoder + fraction head; the student network of the mean-teacher pair."""

    def __init__(self, encoder: MultiSourceEncoder, cfg: ModelConfig):
        super().__init__()
        self.encoder = encoder
        self.head = FractionHead(cfg.stage_channels[3], cfg.fraction_hidden_dim, cfg.num_fraction_classes)

    def forward(self, x: torch.Tensor, source: str) -> torch.Tensor:
        stage4 = self.encoder(x, source)[-1]
        return self.head(global_pool(stage4))


def make_teacher(student: PretrainModel) -> PretrainModel:
    """Frozen deep copy of the student; never updated by gradient descent."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def pretrain_step(
    student: PretrainModel,
    teacher: Optional[PretrainModel],
    optimizer: torch.optim.Optimizer,
    batches: Mapping[str, Tuple[torch.Tensor, torch.Tensor]],
    *,
    teacher_step: float = 0.001,
    fraction_supervision: bool = True,
    mean_teacher: bool = True,
    consistency_weight: float = 1.0,
    grad_clip: float = 1.0,
    expected_sources: Optional[Sequence[str]] = None,
) -> Dict:
    """One optimization step over independent per-source batches.

    ``batches`` maps source name -> ``(clip [B, C, T, H, W], fractions
    [B, 9])``; batches need not be co-located or co-temporal. The total
    loss is the sum over sources of the supervised term plus the teacher
    consistency term; one gradient step updates the student, then one
    EMA step moves the teacher. Sources listed in ``expected_sources``
    but missing from ``batches`` are skipped with a warning.
    """
    if mean_teacher and teacher is None:
        raise ValueError("mean_teacher is enabled but no teacher model was given")
    report: Dict = {"sources": {}, "total": 0.0}
    if expected_sources:
        for name in expected_sources:
            if name not in batches:
                log.warning("source %r missing from this step's batches; skipped", name)
    total = None
    for name, (clip, target) in batches.items():
        student_pred = student(clip, name)
        terms = {}
        loss = None
        if fraction_supervision:
            lp = l1_fraction_loss(student_pred, target)
            terms["lp"] = float(lp.detach())
            loss = lp
        if mean_teacher:
            with torch.no_grad():
                teacher_pred = teacher(clip, name)
            lt = consistency_weight * teacher_consistency_loss(teacher_pred, student_pred)
            terms["lt"] = float(lt.detach())
            loss = lt if loss is None else loss + lt
        report["sources"][name] = terms
        total = loss if total is None else total + loss
    if total is None:
        raise ValueError("pretrain step received no batches")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(student.parameters(), grad_clip)
    optimizer.step()
    if mean_teacher:
        ema_update(dict(teacher.named_parameters()), dict(student.named_parameters()), teacher_step)
    report["total"] = float(total.detach())
    return report
