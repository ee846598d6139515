"""Independent reference implementations used by the tests.

Losses are evaluated term by term in 50-digit arithmetic (mpmath); metrics
by brute-force enumeration in plain Python.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import mpmath as mp

mp.mp.dps = 50


def _dot(a, b):
    return mp.fsum(mp.mpf(x) * mp.mpf(y) for x, y in zip(a, b))


def _softmax(logits):
    m = max(logits)
    ex = [mp.e ** (v - m) for v in logits]
    s = mp.fsum(ex)
    return [e / s for e in ex]


def rkd(x_old, x_new, refs, tau):
    """sum_i sum_k q_ik log(q_ik / p_ik) / (|F| |refs|)"""
    if not x_new or not refs:
        return mp.mpf(0)
    total = mp.mpf(0)
    for xo, xn in zip(x_old, x_new):
        q = _softmax([_dot(z, xo) / tau for z in refs])
        p = _softmax([_dot(z, xn) / tau for z in refs])
        total += mp.fsum(qk * mp.log(qk / pk) for qk, pk in zip(q, p))
    return total / (len(x_new) * len(refs))


def rkd_plus(x_old, x_new, protos, hard, tau):
    return rkd(x_old, x_new, list(protos) + list(hard), tau)


def matching_ce(x, labels, ids, protos, queue, tau):
    """-mean_i log softmax(<refs, x_i>/tau)[slot(label_i)] over labels found in ``ids``."""
    refs = list(protos) + list(queue)
    terms = []
    for xi, y in zip(x, labels):
        if y not in ids:
            continue
        rho = _softmax([_dot(z, xi) / tau for z in refs])
        terms.append(-mp.log(rho[ids.index(y)]))
    if not terms:
        return mp.mpf(0)
    return mp.fsum(terms) / len(terms)


def dkd(old_feats, new_feats, old_obj, new_obj):
    f = mp.fsum((mp.mpf(a) - mp.mpf(b)) ** 2 for a, b in zip(new_feats, old_feats)) / len(new_feats)
    o = mp.fsum((mp.mpf(a) - mp.mpf(b)) ** 2 for a, b in zip(new_obj, old_obj)) / len(new_obj)
    return f + o


def det(logits, labels, pred, target, beta):
    bce = []
    for z, y in zip(logits, labels):
        s = 1 / (1 + mp.e ** (-mp.mpf(z)))
        bce.append(-(y * mp.log(s) + (1 - y) * mp.log(1 - s)))
    cls = mp.fsum(bce) / len(bce)
    fg = [i for i, y in enumerate(labels) if y > 0]
    if not fg:
        return cls
    reg = mp.mpf(0)
    for i in fg:
        for a, b in zip(pred[i], target[i]):
            d = abs(mp.mpf(a) - mp.mpf(b))
            reg += 0.5 * d * d / beta if d < beta else d - 0.5 * mp.mpf(beta)
    return cls + reg / len(fg)


# -- metrics ------------------------------------------------------------------------


def box_iou(a, b) -> Fraction:
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def all_points_ap(flags, n_rel) -> Fraction:
    """Integrate the interpolated PR curve by enumerating every cutoff."""
    n = len(flags)
    prec, rec = [], []
    for k in range(1, n + 1):
        tp = sum(flags[:k])
        prec.append(Fraction(tp, k))
        rec.append(Fraction(tp, n_rel))
    ap = Fraction(0)
    prev = Fraction(0)
    for k in range(n):
        ap += (rec[k] - prev) * max(prec[k:])
        prev = rec[k]
    return ap


def greedy_flags(dets, gts, thr=Fraction(1, 2)):
    """dets: list of (score, scene, box) already in rank order."""
    taken = set()
    flags = []
    for _, si, box in dets:
        best, arg = Fraction(-1), None
        for j, g in enumerate(gts[si]):
            v = box_iou(box, g)
            if v > best:
                best, arg = v, j
        if arg is not None and best >= thr and (si, arg) not in taken:
            taken.add((si, arg))
            flags.append(True)
        else:
            flags.append(False)
    return flags


def detection_ap(results, gts) -> Fraction:
    dets = [(s, si, b) for si, (boxes, scores) in enumerate(results) for b, s in zip(boxes, scores)]
    # stable: equal scores keep (scene, index) order
    dets.sort(key=lambda t: -t[0])
    n_gt = sum(len(g) for g in gts)
    return all_points_ap(greedy_flags(dets, gts), n_gt)


def optimal_matches(results, gts, thr=Fraction(1, 2)) -> int:
    """Largest one-to-one detection/GT matching at IoU >= thr, by enumerating
    every assignment of detections to each scene's ground truth."""
    total = 0
    for si, (boxes, _) in enumerate(results):
        g = gts[si]
        best = 0
        for perm in itertools.permutations(range(len(boxes)), min(len(boxes), len(g))):
            best = max(best, sum(box_iou(boxes[d], g[j]) >= thr for j, d in enumerate(perm)))
        total += best
    return total


def reid_ap(query_feat, query_id, query_scene, gallery, thr=Fraction(1, 2)) -> Fraction | None:
    """Rank gallery detections by cosine similarity (own scene excluded) and
    average the precision at every relevant rank over all relevant GT boxes."""
    det_boxes, det_feats, gt_boxes, gt_ids = gallery
    qn = sum(v * v for v in query_feat) ** 0.5
    cands = []
    n_rel = 0
    for si in range(len(det_boxes)):
        if si == query_scene:
            continue
        n_rel += sum(1 for i in gt_ids[si] if i == query_id)
        for di, (b, f) in enumerate(zip(det_boxes[si], det_feats[si])):
            fn = sum(v * v for v in f) ** 0.5
            cands.append((sum(a * c for a, c in zip(f, query_feat)) / (fn * qn), si, di, b))
    if n_rel == 0:
        return None
    cands.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = set()
    flags = []
    for _, si, _, b in cands:
        rel = [j for j, i in enumerate(gt_ids[si]) if i == query_id]
        hit = False
        for j in sorted(rel, key=lambda j: -box_iou(b, gt_boxes[si][j])):
            if box_iou(b, gt_boxes[si][j]) >= thr and (si, j) not in taken:
                taken.add((si, j))
                hit = True
                break
        flags.append(hit)
    total = Fraction(0)
    for r in range(len(flags)):
        if flags[r]:
            total += Fraction(sum(flags[: r + 1]), r + 1)
    return total / n_rel
