"""Proposal and detection metrics: AR@AN, AUC, mAP@tIoU.

Recall counts a ground-truth action as found when some kept proposal matches
it under greedy one-to-one matching by descending score.  AN is a per-video
budget by default ("per_video": every video keeps its top ``floor(AN)``); a
dataset-global budget of ``floor(AN * n_videos)`` proposals ranked by score
is available as ``an_mode="global"``.

AUC integrates AR over AN = 1..100 with the trapezoid rule, divides by 100
and reports percent, so a constant AR of 1 scores 99.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import VideoRecord, tiou_matrix
from .errors import DataError

UNMATCHED = np.iinfo(np.int64).max


def proposal_thresholds(preset: str = "anet") -> list[float]:
    """tIoU grids: ``anet`` = 0.5..0.95, ``thumos`` = 0.5..1.0, step 0.05."""
    if preset == "anet":
        return [round(0.5 + 0.05 * i, 2) for i in range(10)]
    if preset == "thumos":
        return [round(0.5 + 0.05 * i, 2) for i in range(11)]
    raise DataError(f"unknown threshold preset {preset!r}")


def detection_thresholds(preset: str = "anet") -> list[float]:
    if preset == "anet":
        return [0.5, 0.75, 0.95]
    if preset == "thumos":
        return [0.3, 0.4, 0.5, 0.6, 0.7]
    raise DataError(f"unknown threshold preset {preset!r}")


def _check_gts(gts: dict) -> dict:
    clean = {}
    for vid in sorted(gts):
        arr = np.asarray(gts[vid], dtype=np.float64).reshape(-1, 2)
        if arr.shape[0] == 0:
            raise DataError(f"{vid}: recall is undefined for videos without ground truth")
        clean[vid] = arr
    return clean


def _sorted_props(props) -> list[tuple[float, float, float]]:
    rows = [(float(s), float(e), float(sc)) for s, e, sc in props]
    return sorted(rows, key=lambda r: -r[2])


def _match_times(gt: np.ndarray, props: list, threshold: float) -> np.ndarray:
    """1-based index of the proposal that claims each ground truth, greedily
    in list order; UNMATCHED when never claimed."""
    M = gt.shape[0]
    times = np.full(M, UNMATCHED, dtype=np.int64)
    if not props:
        return times
    iou = tiou_matrix(np.array([(s, e) for s, e, _ in props]), gt)  # (P, M)
    matched = np.zeros(M, dtype=bool)
    for j in range(iou.shape[0]):
        row = np.where(matched, -1.0, iou[j])
        best = int(np.argmax(row))
        if row[best] >= threshold and row[best] > 0.0:
            matched[best] = True
            times[best] = j + 1
    return times


def ar_curve(gts: dict, props: dict, an_values, thresholds,
             an_mode: str = "per_video") -> np.ndarray:
    """Average recall at each AN: mean over tIoU thresholds of the fraction of
    ground-truth actions matched within the AN budget."""
    gts = _check_gts(gts)
    an_values = np.asarray(an_values, dtype=np.float64)
    if an_values.size == 0 or an_values.min() < 1:
        raise DataError("AN values must be >= 1")
    thresholds = list(thresholds)
    total_gt = sum(g.shape[0] for g in gts.values())
    vids = sorted(gts)
    per_video = {v: _sorted_props(props.get(v, [])) for v in vids}

    if an_mode == "per_video":
        budgets = {v: np.floor(an_values).astype(np.int64) for v in vids}
        ranks = {v: np.arange(1, len(per_video[v]) + 1, dtype=np.int64) for v in vids}
    elif an_mode == "global":
        pool = []
        for vi, v in enumerate(vids):
            for j, row in enumerate(per_video[v]):
                pool.append((row[2], vi, j))
        order = sorted(range(len(pool)), key=lambda i: -pool[i][0])
        ranks = {v: np.zeros(len(per_video[v]), dtype=np.int64) for v in vids}
        for grank, i in enumerate(order, start=1):
            _, vi, j = pool[i]
            ranks[vids[vi]][j] = grank
        budgets = {v: np.floor(an_values * len(vids)).astype(np.int64) for v in vids}
    else:
        raise DataError(f"unknown an_mode {an_mode!r}")

    ar = np.zeros(an_values.shape[0], dtype=np.float64)
    for th in thresholds:
        matched_at = np.zeros(an_values.shape[0], dtype=np.int64)
        for v in vids:
            times = _match_times(gts[v], per_video[v], th)
            hit = times != UNMATCHED
            if not hit.any():
                continue
            # rank of the claiming proposal under the current budget ordering
            claim = ranks[v][times[hit] - 1]
            matched_at += (claim[None, :] <= budgets[v][:, None]).sum(axis=1)
        ar += matched_at / total_gt
    return ar / len(thresholds)


def average_recall(gts: dict, props: dict, an: float, thresholds,
                   an_mode: str = "per_video") -> float:
    """AR at a single AN budget."""
    if an < 1:
        raise DataError("AN must be >= 1")
    return float(ar_curve(gts, props, [an], thresholds, an_mode)[0])


def auc_from_curve(ar: np.ndarray, an: np.ndarray) -> float:
    """Trapezoid integral of AR over AN, divided by 100, as percent."""
    area = 0.0
    for i in range(len(an) - 1):
        area += 0.5 * (float(ar[i]) + float(ar[i + 1])) * (float(an[i + 1]) - float(an[i]))
    return area / 100.0 * 100.0


def auc_score(gts: dict, props: dict, thresholds=None,
              an_mode: str = "per_video") -> float:
    """Area under AR vs AN for AN = 1..100, percent convention (max 99.0)."""
    if thresholds is None:
        thresholds = proposal_thresholds("anet")
    an = np.arange(1, 101, dtype=np.float64)
    ar = ar_curve(gts, props, an, thresholds, an_mode)
    return auc_from_curve(ar, an)


# ---------------------------------------------------------------------------
# detection mAP
# ---------------------------------------------------------------------------

def _interp_ap(tp: np.ndarray, npos: int) -> float:
    """All-point interpolated area under precision-recall."""
    if tp.size == 0 or npos == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    prec = tp_cum / (tp_cum + fp_cum)
    rec = tp_cum / npos
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(((mrec[idx] - mrec[idx - 1]) * mpre[idx]).sum())


def map_at_tiou(gts_labeled: dict, detections: dict, thresholds) -> dict:
    """mAP over classes present in the ground truth, per tIoU threshold.

    ``gts_labeled``: ``video_id -> [(start, end, label), ...]``;
    ``detections``: ``video_id -> [(start, end, score, label), ...]``.
    """
    classes = sorted({int(lbl) for rows in gts_labeled.values() for _, _, lbl in rows})
    if not classes:
        raise DataError("mAP is undefined without labeled ground truth")
    thresholds = list(thresholds)
    out = {}

    by_class_gt = {c: {} for c in classes}
    for vid in sorted(gts_labeled):
        for s, e, lbl in gts_labeled[vid]:
            by_class_gt[int(lbl)].setdefault(vid, []).append((float(s), float(e)))

    by_class_det = {c: [] for c in classes}
    for vid in sorted(detections):
        for s, e, score, lbl in detections[vid]:
            if int(lbl) in by_class_det:
                by_class_det[int(lbl)].append((float(score), vid, float(s), float(e)))
    for c in classes:
        by_class_det[c].sort(key=lambda r: -r[0])

    for th in thresholds:
        aps = []
        for c in classes:
            gt_map = {v: np.asarray(rows) for v, rows in by_class_gt[c].items()}
            npos = sum(a.shape[0] for a in gt_map.values())
            matched = {v: np.zeros(a.shape[0], dtype=bool) for v, a in gt_map.items()}
            tp = np.zeros(len(by_class_det[c]), dtype=np.float64)
            for j, (_, vid, s, e) in enumerate(by_class_det[c]):
                if vid not in gt_map:
                    continue
                iou = tiou_matrix([[s, e]], gt_map[vid])[0]
                row = np.where(matched[vid], -1.0, iou)
                best = int(np.argmax(row))
                if row[best] >= th and row[best] > 0.0:
                    matched[vid][best] = True
                    tp[j] = 1.0
            aps.append(_interp_ap(tp, npos))
        out[th] = float(np.mean(aps))
    return out


# ---------------------------------------------------------------------------
# dataset-level report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    ar_at_an: dict
    auc: float
    map_at_tiou: dict
    average_map: Optional[float]

    def to_dict(self) -> dict:
        return {
            "ar_at_an": {str(k): v for k, v in self.ar_at_an.items()},
            "auc": self.auc,
            "map_at_tiou": {str(k): v for k, v in self.map_at_tiou.items()},
            "average_map": self.average_map,
        }


def video_top1_label(rec: VideoRecord) -> Optional[int]:
    """Most frequent action label of the video (ties to the smallest id)."""
    labels = [a.label for a in rec.actions if a.label is not None]
    if not labels:
        return None
    vals, counts = np.unique(np.asarray(labels, dtype=np.int64), return_counts=True)
    return int(vals[np.argmax(counts)])


def evaluate_proposals(records: list[VideoRecord], proposals: dict,
                       an_values=(1, 5, 10, 50, 100),
                       prop_thresholds=None, det_thresholds=None,
                       an_mode: str = "per_video") -> EvalReport:
    """Full report for a proposal file against annotated records.

    Detection metrics label every proposal of a video with that video's
    top-1 ground-truth class, standing in for an external classifier.
    """
    prop_thresholds = proposal_thresholds("anet") if prop_thresholds is None else prop_thresholds
    det_thresholds = detection_thresholds("anet") if det_thresholds is None else det_thresholds
    gts = {r.video_id: np.array([(a.start, a.end) for a in r.actions]) for r in records}
    ar_vals = ar_curve(gts, proposals, list(an_values), prop_thresholds, an_mode)
    ar_at_an = {int(an): float(v) for an, v in zip(an_values, ar_vals)}
    auc = auc_score(gts, proposals, prop_thresholds, an_mode)

    labeled = all(a.label is not None for r in records for a in r.actions)
    if labeled:
        gts_lab = {
            r.video_id: [(a.start, a.end, int(a.label)) for a in r.actions]
            for r in records
        }
        dets = {}
        for r in records:
            top = video_top1_label(r)
            dets[r.video_id] = [(s, e, sc, top) for s, e, sc in proposals.get(r.video_id, [])]
        mp = map_at_tiou(gts_lab, dets, det_thresholds)
        avg_map = float(np.mean(list(mp.values())))
    else:
        mp, avg_map = {}, None
    return EvalReport(ar_at_an=ar_at_an, auc=auc, map_at_tiou=mp, average_map=avg_map)
