"""Detection and re-ID metrics, per-domain evaluation and forgetting reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from lifelong_ps.synthgen import DomainDataset

METRICS = ("recall", "ap", "map", "top1")


class MetricError(ValueError):
    pass


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if not len(a) or not len(b):
        return np.zeros((len(a), len(b)))
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _ranked_detections(results) -> list[tuple[float, int, int, np.ndarray]]:
    dets = []
    for si, (boxes, scores) in enumerate(results):
        for di, (b, s) in enumerate(zip(np.asarray(boxes).reshape(-1, 4), np.asarray(scores).reshape(-1))):
            dets.append((float(s), si, di, b))
    # score-descending, ties by (scene, detection) order
    dets.sort(key=lambda t: (-t[0], t[1], t[2]))
    return dets


def match_detections(results, gts, iou_thr: float = 0.5) -> tuple[list[bool], int]:
    """Greedy score-descending one-to-one matching.

    Each detection claims its best-overlapping ground truth when that overlap
    reaches ``iou_thr`` and the ground truth is still free; otherwise it is a
    false positive. Returns the TP flags in rank order and the GT count.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts)
    claimed = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for g in gts]
    flags = []
    for _, si, _, box in _ranked_detections(results):
        g = np.asarray(gts[si]).reshape(-1, 4)
        if not len(g):
            flags.append(False)
            continue
        ov = iou_matrix(box[None], g)[0]
        j = int(np.argmax(ov))
        if ov[j] >= iou_thr and not claimed[si][j]:
            claimed[si][j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def detection_recall(results, gts, iou_thr: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched by some detection."""
    flags, n_gt = match_detections(results, gts, iou_thr)
    if n_gt == 0:
        raise MetricError("undefined recall: no ground-truth boxes")
    return sum(flags) / n_gt


def average_precision(tp_flags: Sequence[bool], n_relevant: int) -> float:
    """All-points interpolated AP of a ranked TP/FP list."""
    if n_relevant == 0:
        raise MetricError("no relevant items")
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    if not len(tp):
        return 0.0
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_relevant
    # monotone precision envelope, then sum precision over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def detection_ap(results, gts, iou_thr: float = 0.5) -> float:
    flags, n_gt = match_detections(results, gts, iou_thr)
    if n_gt == 0:
        raise MetricError("undefined AP: no ground-truth boxes")
    return average_precision(flags, n_gt)


@dataclass
class Gallery:
    """Per scene: detected boxes and their features, plus ground truth."""

    det_boxes: list[np.ndarray]
    det_feats: list[np.ndarray]
    gt_boxes: list[np.ndarray]
    gt_ids: list[np.ndarray]


@dataclass
class QueryResult:
    ap: float
    first_hit: int | None  # 1-based rank of the first true positive


def search_query(query_feat: np.ndarray, query_id: int, query_scene: int, gallery: Gallery, iou_thr: float = 0.5) -> QueryResult | None:
    """Rank every gallery detection (outside the query's own scene) by cosine
    similarity. Returns None when the identity has no gallery ground truth."""
    q = np.asarray(query_feat, dtype=np.float64)
    q = q / np.linalg.norm(q)
    cands = []
    n_rel = 0
    for si in range(len(gallery.det_boxes)):
        if si == query_scene:
            continue
        n_rel += int(np.sum(np.asarray(gallery.gt_ids[si]) == query_id))
        n = len(gallery.det_boxes[si])
        if not n:
            continue
        feats = np.asarray(gallery.det_feats[si], dtype=np.float64).reshape(n, -1)
        sims = feats @ q / np.linalg.norm(feats, axis=1)
        cands.extend((float(s), si, di) for di, s in enumerate(sims))
    if n_rel == 0:
        return None
    cands.sort(key=lambda t: (-t[0], t[1], t[2]))
    claimed: dict[tuple[int, int], bool] = {}
    flags = []
    for _, si, di in cands:
        ids = np.asarray(gallery.gt_ids[si])
        rel = np.nonzero(ids == query_id)[0]
        hit = False
        if len(rel):
            ov = iou_matrix(np.asarray(gallery.det_boxes[si])[di][None], np.asarray(gallery.gt_boxes[si])[rel])[0]
            for j in np.argsort(-ov, kind="stable"):
                if ov[j] >= iou_thr and not claimed.get((si, int(rel[j]))):
                    claimed[(si, int(rel[j]))] = True
                    hit = True
                    break
        flags.append(hit)
    first = next((r + 1 for r, f in enumerate(flags) if f), None)
    # uninterpolated AP over all relevant gallery boxes, missed ones count as 0
    tp = np.cumsum(flags)
    ap = float(sum(tp[r] / (r + 1) for r, f in enumerate(flags) if f) / n_rel)
    return QueryResult(ap, first)


def _search_all(queries, gallery: Gallery, iou_thr: float) -> tuple[list[QueryResult], int]:
    results, skipped = [], 0
    for feat, ident, scene in queries:
        r = search_query(np.asarray(feat), int(ident), int(scene), gallery, iou_thr)
        if r is None:
            skipped += 1
        else:
            results.append(r)
    return results, skipped


def reid_map(queries, gallery: Gallery, iou_thr: float = 0.5) -> float:
    """Mean AP over queries; ``queries`` holds (feature, identity, scene index)."""
    res, _ = _search_all(queries, gallery, iou_thr)
    if not res:
        raise MetricError("no query has gallery ground truth")
    return float(np.mean([r.ap for r in res]))


def topk(queries, gallery: Gallery, k: int = 1, iou_thr: float = 0.5) -> float:
    res, _ = _search_all(queries, gallery, iou_thr)
    if not res:
        raise MetricError("no query has gallery ground truth")
    return float(np.mean([r.first_hit is not None and r.first_hit <= k for r in res]))


@torch.no_grad()
def run_detector(model, dataset: DomainDataset, batch_size: int = 32):
    from lifelong_ps.perception import to_tensor

    out = []
    scenes = dataset.test_gallery
    for i in range(0, len(scenes), batch_size):
        images = to_tensor([s.image for s in scenes[i : i + batch_size]])
        for boxes, scores, feats in model.detect(images):
            out.append((boxes.numpy(), scores.numpy(), feats.numpy()))
    return out


@torch.no_grad()
def evaluate_model(model, dataset: DomainDataset, det_thresh: float = 0.5, iou_thr: float = 0.5) -> dict[str, float]:
    """Recall, AP, re-ID mAP and top-1 of ``model`` on a domain's test split.

    Recall and the re-ID gallery use detections scoring at least
    ``det_thresh``; AP ranks every detection.
    """
    from lifelong_ps.perception import to_tensor

    was = model.training
    model.eval()
    dets = run_detector(model, dataset)
    gts = [s.gt_boxes for s in dataset.test_gallery]
    kept = [(b[s >= det_thresh], s[s >= det_thresh], f[s >= det_thresh]) for b, s, f in dets]
    recall = detection_recall([(b, s) for b, s, _ in kept], gts, iou_thr)
    ap = detection_ap([(b, s) for b, s, _ in dets], gts, iou_thr)
    gallery = Gallery(
        [b for b, _, _ in kept],
        [f for _, _, f in kept],
        gts,
        [s.gt_identities for s in dataset.test_gallery],
    )
    queries = []
    for si, bi in dataset.test_queries:
        s = dataset.test_gallery[si]
        f, _ = model.embed(to_tensor([s.image]), [torch.from_numpy(s.gt_boxes[bi : bi + 1])])
        queries.append((f[0].numpy(), int(s.gt_identities[bi]), si))
    res, skipped = _search_all(queries, gallery, iou_thr)
    model.train(was)
    return {
        "recall": float(recall),
        "ap": float(ap),
        "map": float(np.mean([r.ap for r in res])) if res else 0.0,
        "top1": float(np.mean([r.first_hit == 1 for r in res])) if res else 0.0,
        "queries": len(res),
        "skipped_queries": skipped,
    }


# --------------------------------------------------------------------------
# reports


def _fmt(v: float) -> str:
    return f"{100.0 * v:.2f}"


def stage_table(history: list[dict]) -> list[dict]:
    """One row per (stage, evaluated domain) plus an Average row per stage."""
    rows = []
    for st in history:
        cells = st["metrics"]
        doms = sorted(cells, key=lambda d: int(d) if str(d).lstrip("-").isdigit() else str(d))
        for d in doms:
            rows.append({"stage": st["stage"], "trained": st["trained_domain"], "mode": st["mode"], "eval_domain": d, **{m: cells[d][m] for m in METRICS}})
        rows.append(
            {
                "stage": st["stage"],
                "trained": st["trained_domain"],
                "mode": st["mode"],
                "eval_domain": "Average",
                **{m: float(np.mean([cells[d][m] for d in doms])) for m in METRICS},
            }
        )
    return rows


def final_table(history: list[dict]) -> str:
    """Last-stage results laid out like a lifelong person-search results
    table: per domain Recall/AP (detection) and mAP/Top-1 (re-ID), then the
    average over domains. Values are percentages, tab-delimited."""
    st = history[-1]
    doms = sorted(st["metrics"], key=lambda d: int(d) if str(d).lstrip("-").isdigit() else str(d))
    head1 = ["mode"] + [f"domain {d}" for d in doms for _ in range(4)] + ["Average"] * 4
    head2 = [""] + ["Detection", "Detection", "Re-ID", "Re-ID"] * (len(doms) + 1)
    head3 = [""] + ["Recall", "AP", "mAP", "Top-1"] * (len(doms) + 1)
    vals = [st["mode"]]
    for d in doms:
        vals += [_fmt(st["metrics"][d][m]) for m in METRICS]
    vals += [_fmt(float(np.mean([st["metrics"][d][m] for d in doms]))) for m in METRICS]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    for r in (head1, head2, head3, vals):
        w.writerow(r)
    return buf.getvalue()


def forgetting_report(history: list[dict]) -> dict:
    """Tabulate metric trajectories per evaluated domain across stages.

    Returns ``{"rows": stage_table rows, "trajectories": {metric: {domain:
    [values per stage]}}, "plottable": bool}``; a single-stage history is not
    plottable as a trajectory.
    """
    if not history:
        raise MetricError("empty history")
    rows = stage_table(history)
    traj: dict[str, dict[str, list[float | None]]] = {m: {} for m in METRICS}
    domains = sorted({d for st in history for d in st["metrics"]}, key=lambda d: int(d) if str(d).lstrip("-").isdigit() else str(d))
    for m in METRICS:
        for d in domains:
            traj[m][d] = [st["metrics"][d][m] if d in st["metrics"] else None for st in history]
    return {"rows": rows, "trajectories": traj, "plottable": len(history) > 1, "stages": [st["trained_domain"] for st in history]}


def rows_to_tsv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["stage", "trained", "mode", "eval_domain", *METRICS]
    w = csv.DictWriter(buf, fieldnames=fields, delimiter="\t", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if k in METRICS else r[k]) for k in fields})
    return buf.getvalue()


def old_domain_average(history: list[dict], metric: str, exclude_last_trained: bool = True) -> float:
    """Mean of ``metric`` over the domains trained before the final one,
    read from the final stage."""
    st = history[-1]
    trained = [str(h["trained_domain"]) for h in history]
    old = trained[:-1] if exclude_last_trained else trained
    cells = [st["metrics"][d][metric] for d in old if d in st["metrics"]]
    if not cells:
        raise MetricError("history has no old domains")
    return float(np.mean(cells))
