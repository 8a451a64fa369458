"""Teacher uncertainty, rectified teacher targets and shape attention weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SHAPE_EPS = 1e-7


@dataclass
class UncertaintyMaps:
    teacher_entropy: torch.Tensor
    rectified_teacher: torch.Tensor
    shape_weight: torch.Tensor


def _check_distribution(probs: torch.Tensor, tol: float = 1e-4) -> None:
    if probs.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) probabilities, got {tuple(probs.shape)}")
    if bool((probs < 0).any()):
        raise ValueError("probabilities contain negative entries")
    err = float((probs.sum(dim=1) - 1).abs().max()) if probs.numel() else 0.0
    if err > tol:
        raise ValueError(f"probabilities do not sum to 1 (max deviation {err:.3g})")


def entropy_uncertainty(probs: torch.Tensor, scope: str = "pixel") -> torch.Tensor:
    """Per-pixel entropy normalised by log C, shape (B, 1, H, W), values in [0, 1].

    ``scope="image"`` replaces every pixel by its image's mean uncertainty.
    """
    _check_distribution(probs)
    num_classes = probs.shape[1]
    ent = -torch.special.xlogy(probs, probs).sum(dim=1, keepdim=True) / math.log(num_classes)
    ent = ent.clamp(0.0, 1.0)
    if scope == "image":
        ent = ent.mean(dim=(2, 3), keepdim=True).expand_as(ent)
    elif scope != "pixel":
        raise ValueError(f"unknown uncertainty scope {scope!r}")
    return ent


def rectify_teacher(q_tea: torch.Tensor, q_stu: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Blend teacher towards student where the teacher is uncertain."""
    if q_tea.shape != q_stu.shape:
        raise ValueError(f"shape mismatch: {tuple(q_tea.shape)} vs {tuple(q_stu.shape)}")
    if float(u.min()) < 0 or float(u.max()) > 1:
        raise ValueError("uncertainty must lie in [0, 1]")
    return (1 - u) * q_tea + u * q_stu


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    """Per-image min-max scaling to [0, 1]; constant images map to zeros."""
    if not bool(torch.isfinite(x).all()):
        raise ValueError("min-max normalisation needs finite input")
    flat = x.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.zeros_like(flat))
    return out.view_as(x)


def shape_attention(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """1 + minmax(-u log u) with u the scaled softmax disagreement; range [1, 2]."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    diff = torch.softmax(student_logits, dim=1) - torch.softmax(teacher_logits, dim=1)
    u = (diff.norm(dim=1, keepdim=True) / math.sqrt(2)).clamp(SHAPE_EPS, 1.0)
    big_u = -u * torch.log(u)
    return 1 + minmax_normalize(big_u)


def uncertainty_maps(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                     scope: str = "pixel") -> UncertaintyMaps:
    """All teacher-side targets for one consistency step, gradient-free."""
    with torch.no_grad():
        q_stu = torch.softmax(student_logits.detach(), dim=1)
        q_tea = torch.softmax(teacher_logits.detach(), dim=1)
        u = entropy_uncertainty(q_tea, scope)
        return UncertaintyMaps(
            teacher_entropy=u,
            rectified_teacher=rectify_teacher(q_tea, q_stu, u),
            shape_weight=shape_attention(student_logits.detach(), teacher_logits.detach()),
        )
