"""Supervised segmentation losses and consistency terms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    lambda_dice: float = 1.0
    lambda_vcc: float = 1.0
    lambda_intra: float = 1.0

    def validate(self) -> "LossWeights":
        for name in ("lambda_dice", "lambda_vcc", "lambda_intra"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        return self


@dataclass
class InstanceBatch:
    """Softmax probabilities plus the instance/class maps they are scored against.

    ``instance_maps`` is a (B, H, W) integer tensor (or a list of (H, W) maps);
    ids within each image must run 1..K without gaps.
    """
    probs: torch.Tensor
    instance_maps: torch.Tensor
    class_labels: torch.Tensor


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.dim() != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are inconsistent")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels.long())


def soft_dice_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - soft Dice averaged over the non-background classes of a probability map."""
    _check_labels(probs, labels)
    num_classes = probs.shape[1]
    onehot = F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice[1:].mean()


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    return soft_dice_loss(torch.softmax(logits, dim=1), labels, eps)


def _as_tensor_maps(maps, like: torch.Tensor) -> torch.Tensor:
    if isinstance(maps, torch.Tensor):
        return maps.long().to(like.device)
    return torch.stack([torch.as_tensor(m).long() for m in maps]).to(like.device)


def vcc_loss(batch: InstanceBatch) -> torch.Tensor:
    """Variance-constrained cross loss.

    Mean over all instances in the minibatch of the within-instance variance of
    the correct-class probability. Returns 0 when there are no instances.
    """
    probs = batch.probs
    inst = _as_tensor_maps(batch.instance_maps, probs)
    labels = _as_tensor_maps(batch.class_labels, probs)
    if inst.shape != labels.shape or inst.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise ValueError("probs, instance_maps and class_labels shapes disagree")
    p_correct = probs.gather(1, labels.unsqueeze(1)).squeeze(1)

    per_instance = []
    for b in range(probs.shape[0]):
        ids = inst[b].flatten()
        n = int(ids.max()) if ids.numel() else 0
        if n == 0:
            continue
        p = p_correct[b].flatten()
        counts = torch.bincount(ids, minlength=n + 1)[1:]
        if bool((counts == 0).any()):
            missing = (torch.nonzero(counts == 0).flatten() + 1).tolist()
            raise ValueError(f"instance map of image {b} has ids with zero pixels: {missing}")
        fg = ids > 0
        idx = ids[fg] - 1
        pf = p[fg]
        sums = torch.zeros(n, dtype=p.dtype, device=p.device).index_add(0, idx, pf)
        mu = sums / counts.to(p.dtype)
        sq = torch.zeros(n, dtype=p.dtype, device=p.device).index_add(0, idx, (mu[idx] - pf) ** 2)
        per_instance.append(sq / counts.to(p.dtype))
    if not per_instance:
        return probs.sum() * 0
    return torch.cat(per_instance).mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, batch: Optional[InstanceBatch],
             w: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """L_ce + lambda_dice * L_dice + lambda_vcc * L_vcc with a float breakdown.

    ``batch=None`` drops the vcc term (used for intermediate stages).
    """
    ce = cross_entropy(logits, labels)
    total = ce
    dl = vl = None
    if w.lambda_dice:
        dl = dice_loss(logits, labels)
        total = total + w.lambda_dice * dl
    if batch is not None and w.lambda_vcc:
        vl = vcc_loss(batch)
        total = total + w.lambda_vcc * vl
    breakdown = {
        "ce": float(ce.detach()),
        "dice": float(dl.detach()) if dl is not None else 0.0,
        "vcc": float(vl.detach()) if vl is not None else 0.0,
    }
    return total, breakdown


def mse_consistency(a: torch.Tensor, b: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    if weight is not None:
        sq = weight * sq
        if sq.shape != a.shape:
            raise ValueError(f"weight {tuple(weight.shape)} does not broadcast to {tuple(a.shape)}")
    return sq.mean()


def intra_loss(output) -> torch.Tensor:
    """MSE between the student's first- and last-stage logits."""
    return mse_consistency(output.stage1_logits, output.stage2_logits)


def inter_loss(student: torch.Tensor, rectified_teacher: torch.Tensor,
               shape_weight: Optional[torch.Tensor] = None, tol: float = 1e-6) -> torch.Tensor:
    """Shape-weighted MSE between student predictions and rectified teacher targets.

    Both arguments live in the same space (the trainer passes softmax
    probabilities). The target is detached.
    """
    if shape_weight is not None:
        lo, hi = float(shape_weight.min()), float(shape_weight.max())
        if lo < 1 - tol or hi > 2 + tol:
            raise ValueError(f"shape weight must lie in [1, 2], got [{lo}, {hi}]")
        shape_weight = shape_weight.detach()
    return mse_consistency(student, rectified_teacher.detach(), shape_weight)
