"""Brute-force reference implementations used only by the tests.

Everything here works on explicit Python sets of pixel coordinates and plain
loops so that it shares no code path with ``pgfanet.metrics`` or the torch
losses.
"""
import math
from itertools import product


def pixel_sets(label_map):
    h, w = len(label_map), len(label_map[0])
    sets = {}
    for y, x in product(range(h), range(w)):
        v = int(label_map[y][x])
        if v > 0:
            sets.setdefault(v, set()).add((y, x))
    return dict(sorted(sets.items()))


def boundary_pixels(pixels):
    out = set()
    for (y, x) in pixels:
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            if (y + dy, x + dx) not in pixels:
                out.add((y, x))
                break
    return out


def percentile_linear(values, q):
    vals = sorted(values)
    if len(vals) == 1:
        return vals[0]
    pos = (len(vals) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (vals[hi] - vals[lo]) * (pos - lo)


def directed_distances(src, dst):
    return [min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in dst) for a in src]


def hausdorff_sets(a, b, shape, q=95.0):
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.hypot(*shape)
    ba, bb = boundary_pixels(a), boundary_pixels(b)
    return max(percentile_linear(directed_distances(ba, bb), q),
               percentile_linear(directed_distances(bb, ba), q))


def hausdorff95(pred, gt):
    shape = (len(gt), len(gt[0]))
    a = {(y, x) for y, x in product(range(shape[0]), range(shape[1])) if pred[y][x]}
    b = {(y, x) for y, x in product(range(shape[0]), range(shape[1])) if gt[y][x]}
    return hausdorff_sets(a, b, shape)


def aji(gt, pred):
    g_sets, p_sets = pixel_sets(gt), pixel_sets(pred)
    if not g_sets:
        return 1.0 if not p_sets else 0.0
    used = set()
    c = u = 0
    for gid, g in g_sets.items():
        best, best_iou = None, 0.0
        for pid, p in p_sets.items():
            if pid in used:
                continue
            inter = len(g & p)
            iou = inter / len(g | p)
            if iou > best_iou:          # strict: keeps the lowest id on ties
                best, best_iou = pid, iou
        if best is None:
            u += len(g)
        else:
            used.add(best)
            c += len(g & p_sets[best])
            u += len(g | p_sets[best])
    for pid, p in p_sets.items():
        if pid not in used:
            u += len(p)
    return c / u


def detection_f1(gt, pred, thresh=0.5):
    g_sets, p_sets = pixel_sets(gt), pixel_sets(pred)
    if not g_sets and not p_sets:
        return 1.0
    pairs = []
    for gid, g in g_sets.items():
        for pid, p in p_sets.items():
            iou = len(g & p) / len(g | p)
            if iou > thresh:
                pairs.append((-iou, gid, pid))
    pairs.sort()
    mg, mp = set(), set()
    for _, gid, pid in pairs:
        if gid not in mg and pid not in mp:
            mg.add(gid)
            mp.add(pid)
    tp = len(mg)
    fp, fn = len(p_sets) - tp, len(g_sets) - tp
    return 2 * tp / (2 * tp + fp + fn)


def _partner(obj, others):
    best, best_ov = None, 0
    for oid, o in others.items():
        ov = len(obj & o)
        if ov > best_ov:
            best, best_ov = oid, ov
    return best


def object_dice(gt, pred):
    g_sets, p_sets = pixel_sets(gt), pixel_sets(pred)
    if not g_sets and not p_sets:
        return 1.0
    if not g_sets or not p_sets:
        return 0.0

    def side(a_sets, b_sets):
        total_area = sum(len(s) for s in a_sets.values())
        acc = 0.0
        for s in a_sets.values():
            j = _partner(s, b_sets)
            d = 0.0 if j is None else 2 * len(s & b_sets[j]) / (len(s) + len(b_sets[j]))
            acc += len(s) / total_area * d
        return acc

    return 0.5 * (side(g_sets, p_sets) + side(p_sets, g_sets))


def object_hausdorff(gt, pred, q=100.0):
    shape = (len(gt), len(gt[0]))
    diag = math.hypot(*shape)
    g_sets, p_sets = pixel_sets(gt), pixel_sets(pred)
    if not g_sets and not p_sets:
        return 0.0
    if not g_sets or not p_sets:
        return diag

    def side(a_sets, b_sets):
        total_area = sum(len(s) for s in a_sets.values())
        acc = 0.0
        for s in a_sets.values():
            j = _partner(s, b_sets)
            d = diag if j is None else hausdorff_sets(s, b_sets[j], shape, q)
            acc += len(s) / total_area * d
        return acc

    return 0.5 * (side(g_sets, p_sets) + side(p_sets, g_sets))


def vcc(probs, inst, labels):
    """Direct loop evaluation of the variance-constrained loss on nested lists."""
    groups = {}
    for b in range(len(inst)):
        for y in range(len(inst[b])):
            for x in range(len(inst[b][y])):
                k = int(inst[b][y][x])
                if k > 0:
                    groups.setdefault((b, k), []).append(float(probs[b][int(labels[b][y][x])][y][x]))
    if not groups:
        return 0.0
    total = 0.0
    for vals in groups.values():
        mu = sum(vals) / len(vals)
        total += sum((mu - p) ** 2 for p in vals) / len(vals)
    return total / len(groups)
