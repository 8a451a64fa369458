"""Central finite-difference check of every training loss in double precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import torch

from . import losses as L
from .model import ModelOutput
from .uncertainty import uncertainty_maps


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool


def finite_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                      h: float = 1e-6) -> torch.Tensor:
    """Central differences of a scalar function, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = fn(x).item()
            flat[i] = old - h
            fm = fn(x).item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| / max(max |n|, max |a|), guarded against all-zero gradients."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def check(name: str, fn, x: torch.Tensor, tol: float = 1e-4, h: float = 1e-6) -> GradCheckResult:
    xa = x.detach().clone().requires_grad_(True)
    (ga,) = torch.autograd.grad(fn(xa), xa)
    gn = finite_difference(fn, x, h)
    err = relative_error(ga, gn)
    return GradCheckResult(name, err, err < tol)


def _fixture(seed: int, b=2, c=2, h=8, w=8):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(b, c, h, w, generator=g, dtype=torch.float64)
    labels = torch.randint(0, c, (b, h, w), generator=g)
    inst = torch.zeros(b, h, w, dtype=torch.long)
    # two rectangular instances per image, labelled with their pixel class
    inst[:, 1:4, 1:5] = 1
    inst[:, 5:8, 3:7] = 2
    return g, logits, labels, inst


def run_all(seed: int = 0, tol: float = 1e-4) -> List[GradCheckResult]:
    g, logits, labels, inst = _fixture(seed)
    other = torch.randn(logits.shape, generator=g, dtype=torch.float64)
    teacher = torch.randn(logits.shape, generator=g, dtype=torch.float64)
    vcc_labels = torch.where(inst > 0, torch.ones_like(labels), labels)

    def vcc(x):
        return L.vcc_loss(L.InstanceBatch(torch.softmax(x, 1), inst, vcc_labels))

    def intra(x):
        return L.intra_loss(ModelOutput(stage1_logits=x, stage2_logits=other, final_logits=other))

    maps = uncertainty_maps(logits, teacher)

    def inter(x):
        return L.inter_loss(torch.softmax(x, 1), maps.rectified_teacher, maps.shape_weight)

    def seg(x):
        return L.seg_loss(x, vcc_labels, L.InstanceBatch(torch.softmax(x, 1), inst, vcc_labels),
                          L.LossWeights())[0]

    cases: Dict[str, Callable] = {
        "ce": lambda x: L.cross_entropy(x, labels),
        "dice": lambda x: L.dice_loss(x, labels),
        "vcc": vcc,
        "seg": seg,
        "intra": intra,
        "inter": inter,
    }
    return [check(name, fn, logits, tol) for name, fn in cases.items()]
