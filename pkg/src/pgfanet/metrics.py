"""Instance segmentation metrics for nuclei and gland evaluation.

Conventions that the standard protocols leave open:

* Hausdorff distances are measured between boundary pixels (mask minus its
  4-connected erosion) and the 95th percentile uses linear interpolation.
* A missing counterpart (empty mask, unmatched object) costs the image
  diagonal.
* AJI visits ground-truth instances in ascending id order and breaks IoU ties
  by the lowest prediction id.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.segmentation import expand_labels

NUCLEI_FIELDS = ("f1", "f1_pixel", "dice", "iou", "aji", "hd95")
GLAND_FIELDS = ("f1_obj", "dice_obj", "haus_obj", "hd95_obj")

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


class InstanceSet:
    """An instance label map with its positive ids and per-id areas."""

    def __init__(self, label_map):
        self.label_map = np.asarray(label_map)
        if self.label_map.ndim != 2:
            raise ValueError(f"instance map must be 2-D, got shape {self.label_map.shape}")
        ids, areas = np.unique(self.label_map, return_counts=True)
        keep = ids > 0
        self.instance_ids = [int(i) for i in ids[keep]]
        self.areas = areas[keep].astype(np.int64)

    @property
    def shape(self):
        return self.label_map.shape

    def __len__(self):
        return len(self.instance_ids)

    def mask(self, inst_id: int) -> np.ndarray:
        return self.label_map == inst_id


def _as_set(x) -> InstanceSet:
    return x if isinstance(x, InstanceSet) else InstanceSet(x)


def _diagonal(shape) -> float:
    return math.hypot(shape[0], shape[1])


def _overlaps(a: InstanceSet, b: InstanceSet) -> np.ndarray:
    """Pixel intersection counts, rows follow a.instance_ids, columns b.instance_ids."""
    out = np.zeros((len(a), len(b)), dtype=np.int64)
    if not len(a) or not len(b):
        return out
    la = a.label_map.ravel()
    lb = b.label_map.ravel()
    both = (la > 0) & (lb > 0)
    ia = np.searchsorted(a.instance_ids, la[both])
    ib = np.searchsorted(b.instance_ids, lb[both])
    np.add.at(out, (ia, ib), 1)
    return out


def _iou_matrix(a: InstanceSet, b: InstanceSet):
    inter = _overlaps(a, b)
    union = a.areas[:, None] + b.areas[None, :] - inter
    return inter / np.maximum(union, 1), inter, union


# -- semantic -> instance -------------------------------------------------

def instances_from_semantic(probs, mode: str = "boundary_aware", min_area: int = 0) -> np.ndarray:
    """Turn a (C, H, W) probability map into an instance label map.

    ``binary_cc`` labels 8-connected foreground (argmax != 0). ``boundary_aware``
    expects background/inside/boundary classes, labels 4-connected "inside"
    regions and grows them by one pixel into the predicted foreground.
    """
    probs = np.asarray(probs)
    cls = probs.argmax(axis=0)
    if mode == "binary_cc":
        labels, _ = ndimage.label(cls > 0, structure=_SQUARE)
    elif mode == "boundary_aware":
        if probs.shape[0] < 3:
            raise ValueError("boundary_aware mode needs at least 3 classes")
        inside, _ = ndimage.label(cls == 1, structure=_CROSS)
        grown = expand_labels(inside, distance=1)
        labels = np.where(cls > 0, grown, 0)
    else:
        raise ValueError(f"unknown instance mode {mode!r}")
    if min_area > 0:
        ids, counts = np.unique(labels, return_counts=True)
        small = ids[(ids > 0) & (counts < min_area)]
        labels[np.isin(labels, small)] = 0
    return relabel(labels)


def relabel(labels: np.ndarray) -> np.ndarray:
    """Map ids to 1..K in ascending order of the original ids."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[labels]


# -- pixel metrics ---------------------------------------------------------

def _masks(pred_mask, gt_mask):
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def pixel_dice(pred_mask, gt_mask) -> float:
    a, b = _masks(pred_mask, gt_mask)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def pixel_iou(pred_mask, gt_mask) -> float:
    a, b = _masks(pred_mask, gt_mask)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


# -- distances ---------------------------------------------------------------

def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every boundary pixel of src to the nearest boundary pixel of dst."""
    dist = ndimage.distance_transform_edt(~boundary(dst))
    return dist[boundary(src)]


def hausdorff(pred_mask, gt_mask, percentile: float = 95.0) -> float:
    """Symmetric (percentile) Hausdorff distance between mask boundaries."""
    a, b = _masks(pred_mask, gt_mask)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return _diagonal(a.shape)
    d_ab = np.percentile(_directed(a, b), percentile)
    d_ba = np.percentile(_directed(b, a), percentile)
    return float(max(d_ab, d_ba))


def hausdorff95(pred_mask, gt_mask) -> float:
    return hausdorff(pred_mask, gt_mask, 95.0)


# -- instance metrics ------------------------------------------------------------

def aji(gt, pred) -> float:
    """Aggregated Jaccard index with one-to-one use of predictions."""
    gt, pred = _as_set(gt), _as_set(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    if not len(gt):
        return 1.0 if not len(pred) else 0.0
    iou, inter, union = _iou_matrix(gt, pred)
    used = np.zeros(len(pred), dtype=bool)
    c = u = 0
    for g in range(len(gt)):
        best = -1
        if len(pred):
            cand = np.where(used, -1.0, iou[g])
            j = int(np.argmax(cand))  # first max -> lowest prediction id
            if cand[j] > 0:
                best = j
        if best < 0:
            u += int(gt.areas[g])
            continue
        used[best] = True
        c += int(inter[g, best])
        u += int(union[g, best])
    u += int(pred.areas[~used].sum())
    return c / u if u else 1.0


def detection_f1(gt, pred, iou_thresh: float = 0.5) -> float:
    """Object detection F1 with greedy one-to-one matching by descending IoU."""
    gt, pred = _as_set(gt), _as_set(pred)
    if not len(gt) and not len(pred):
        return 1.0
    tp = 0
    if len(gt) and len(pred):
        iou = _iou_matrix(gt, pred)[0]
        gi, pj = np.nonzero(iou > iou_thresh)
        order = np.lexsort((pj, gi, -iou[gi, pj]))
        used_g, used_p = set(), set()
        for k in order:
            g, p = int(gi[k]), int(pj[k])
            if g in used_g or p in used_p:
                continue
            used_g.add(g)
            used_p.add(p)
            tp += 1
    fp = len(pred) - tp
    fn = len(gt) - tp
    return 2 * tp / (2 * tp + fp + fn)


def pixel_f1(pred_mask, gt_mask) -> float:
    return pixel_dice(pred_mask, gt_mask)


def _max_overlap_partner(inter: np.ndarray) -> np.ndarray:
    """Index of the maximally overlapping column per row, -1 when no overlap."""
    if inter.shape[1] == 0:
        return np.full(inter.shape[0], -1)
    j = inter.argmax(axis=1)
    return np.where(inter[np.arange(inter.shape[0]), j] > 0, j, -1)


def object_dice(gt, pred) -> float:
    """Area-weighted object-level Dice, averaged over both matching directions."""
    gt, pred = _as_set(gt), _as_set(pred)
    if not len(gt) and not len(pred):
        return 1.0
    if not len(gt) or not len(pred):
        return 0.0
    inter = _overlaps(gt, pred)

    def side(areas_a, areas_b, ov):
        partner = _max_overlap_partner(ov)
        w = areas_a / areas_a.sum()
        total = 0.0
        for i, j in enumerate(partner):
            if j >= 0:
                total += w[i] * 2.0 * ov[i, j] / (areas_a[i] + areas_b[j])
        return total

    return 0.5 * (side(gt.areas, pred.areas, inter) + side(pred.areas, gt.areas, inter.T))


def object_hausdorff(gt, pred, percentile: float = 100.0) -> float:
    """Area-weighted object-level (percentile) Hausdorff distance."""
    gt, pred = _as_set(gt), _as_set(pred)
    if not len(gt) and not len(pred):
        return 0.0
    diag = _diagonal(gt.shape)
    if not len(gt) or not len(pred):
        return diag
    inter = _overlaps(gt, pred)

    def side(a: InstanceSet, b: InstanceSet, ov):
        partner = _max_overlap_partner(ov)
        w = a.areas / a.areas.sum()
        total = 0.0
        for i, j in enumerate(partner):
            d = diag if j < 0 else hausdorff(a.mask(a.instance_ids[i]), b.mask(b.instance_ids[j]), percentile)
            total += w[i] * d
        return total

    return 0.5 * (side(gt, pred, inter) + side(pred, gt, inter.T))


# -- reports ---------------------------------------------------------------

@dataclass
class MetricsReport:
    mode: str
    per_image: List[Dict[str, float]] = field(default_factory=list)
    mean: Dict[str, float] = field(default_factory=dict)

    @property
    def fields(self):
        return NUCLEI_FIELDS if self.mode == "nuclei" else GLAND_FIELDS

    def to_json(self, path=None) -> str:
        text = json.dumps({"mode": self.mode, "fields": list(self.fields),
                           "per_image": self.per_image, "mean": self.mean}, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image"] + list(self.fields))
            for i, row in enumerate(self.per_image):
                writer.writerow([row.get("image", i)] + [repr(row[k]) for k in self.fields])
            writer.writerow(["mean"] + [repr(self.mean[k]) for k in self.fields])


def evaluate_image(pred_map, gt_map, mode: str = "nuclei") -> Dict[str, float]:
    pred, gt = InstanceSet(pred_map), InstanceSet(gt_map)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pm, gm = pred.label_map > 0, gt.label_map > 0
    if mode == "nuclei":
        return {
            "f1": detection_f1(gt, pred),
            "f1_pixel": pixel_f1(pm, gm),
            "dice": pixel_dice(pm, gm),
            "iou": pixel_iou(pm, gm),
            "aji": aji(gt, pred),
            "hd95": hausdorff95(pm, gm),
        }
    if mode == "gland":
        return {
            "f1_obj": detection_f1(gt, pred),
            "dice_obj": object_dice(gt, pred),
            "haus_obj": object_hausdorff(gt, pred, 100.0),
            "hd95_obj": object_hausdorff(gt, pred, 95.0),
        }
    raise ValueError(f"unknown metric mode {mode!r}")


def evaluate(pred_maps: Sequence, gt_maps: Sequence, mode: str = "nuclei",
             names: Optional[Sequence[str]] = None) -> MetricsReport:
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"got {len(pred_maps)} predictions for {len(gt_maps)} ground truths")
    report = MetricsReport(mode=mode)
    for i, (p, g) in enumerate(zip(pred_maps, gt_maps)):
        row = evaluate_image(p, g, mode)
        if names is not None:
            row["image"] = names[i]
        report.per_image.append(row)
    for k in report.fields:
        vals = [r[k] for r in report.per_image]
        report.mean[k] = float(np.mean(vals)) if vals else float("nan")
    return report
