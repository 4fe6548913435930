"""Soft-Dice + cross-entropy objective over both views and all supervised heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import torch
import torch.nn.functional as F

from .exceptions import ValidationError

DICE_EPS = 1e-5


def _check(pred: torch.Tensor, target: torch.Tensor):
    if pred.ndim != 4 or target.ndim != 3:
        raise ValidationError(f"expected B x C x H x W predictions and B x H x W targets, "
                              f"got {tuple(pred.shape)} and {tuple(target.shape)}")
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} do not match")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= pred.shape[1]):
        raise ValidationError(f"target labels must lie in [0, {pred.shape[1] - 1}]")


def one_hot(target: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """B x H x W integer labels -> B x C x H x W."""
    return F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(dtype)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS,
                   include_background: bool = True) -> torch.Tensor:
    """``1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps)``, sums over batch and pixels."""
    _check(probs, target)
    t = one_hot(target, probs.shape[1], probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * t).sum(dims)
    denom = probs.sum(dims) + t.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    if not include_background:
        dice = dice[1:]
    return 1.0 - dice.mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``."""
    _check(logits, target)
    return F.cross_entropy(logits, target.long())


@dataclass
class LossBreakdown:
    """Per-branch, per-head loss terms; heads are ordered finest first."""

    dice: Dict[str, List[torch.Tensor]] = field(default_factory=dict)
    ce: Dict[str, List[torch.Tensor]] = field(default_factory=dict)
    total: torch.Tensor = None

    def branch_total(self, branch: str) -> torch.Tensor:
        terms = [d + c for d, c in zip(self.dice[branch], self.ce[branch])]
        return torch.stack(terms).mean()

    def recompute_total(self) -> torch.Tensor:
        return sum(self.branch_total(b) for b in self.dice)

    def as_floats(self) -> Dict[str, float]:
        out = {"total": float(self.total.detach())}
        for b in self.dice:
            out[f"{b}_dice"] = float(torch.stack(self.dice[b]).detach().mean())
            out[f"{b}_ce"] = float(torch.stack(self.ce[b]).detach().mean())
        return out


def total_loss(outputs, sa_target: torch.Tensor, la_target: torch.Tensor,
               include_background: bool = True) -> LossBreakdown:
    """Sum over branches of the equally weighted mean over heads of (Dice + CE).

    Every head is compared against the full-resolution target of its branch.
    """
    br = LossBreakdown()
    targets = {"sa": sa_target, "la": la_target}
    for branch, target in targets.items():
        heads = outputs[branch].heads
        br.dice[branch] = [soft_dice_loss(torch.softmax(h, dim=1), target, include_background=include_background)
                           for h in heads]
        br.ce[branch] = [cross_entropy_loss(h, target) for h in heads]
    br.total = br.recompute_total()
    return br
