"""Independent brute-force reference implementations.

Every function here follows the metric/label definitions with plain Python
loops and scalar arithmetic, sharing no code with the vectorized package
paths it cross-checks.
"""

import numpy as np


def tiou_scalar(a, b):
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# supervision labels
# ---------------------------------------------------------------------------

def boundary_labels_brute(actions, T, denominator="snippet", aggregate="max"):
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    out = []
    for col in (0, 1):
        labels = np.zeros(T)
        for n in range(T):
            ratios = []
            for row in actions:
                c = row[col]
                lo = max(n - 0.5, c - 1.5)
                hi = min(n + 0.5, c + 1.5)
                ov = max(hi - lo, 0.0)
                ratios.append(ov / (1.0 if denominator == "snippet" else 3.0))
            agg = max(ratios) if aggregate == "max" else sum(ratios)
            labels[n] = 1.0 if agg >= 0.5 else 0.0
        out.append(labels)
    return out[0], out[1]


def duration_labels_brute(actions, T, D):
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    g = np.zeros((D, T))
    valid = np.zeros((D, T), dtype=bool)
    for r in range(D):
        d = r + 1
        for t in range(T):
            if t + d > T:
                continue
            valid[r, t] = True
            best = 0.0
            for s, e in actions:
                v = tiou_scalar((float(t), float(t + d)), (s, e))
                best = max(best, v)
            g[r, t] = best
    l_bin = np.zeros((D, T))
    for r in range(D):
        for t in range(T):
            if not valid[r, t] or g[r, t] <= 0.0:
                continue
            ok = True
            for dr in (-1, 0, 1):
                for dt in (-1, 0, 1):
                    if dr == 0 and dt == 0:
                        continue
                    rr, tt = r + dr, t + dt
                    if 0 <= rr < D and 0 <= tt < T and valid[rr, tt]:
                        if g[rr, tt] > g[r, t]:
                            ok = False
            if ok:
                l_bin[r, t] = 1.0
    return l_bin, g, valid


# ---------------------------------------------------------------------------
# recall / AUC
# ---------------------------------------------------------------------------

def _greedy_matched_count(gt, kept, threshold):
    matched = [False] * len(gt)
    count = 0
    for s, e, _ in kept:
        best, best_iou = -1, -1.0
        for m in range(len(gt)):
            if matched[m]:
                continue
            v = tiou_scalar((s, e), (gt[m][0], gt[m][1]))
            if v > best_iou:
                best, best_iou = m, v
        if best >= 0 and best_iou >= threshold and best_iou > 0.0:
            matched[best] = True
            count += 1
    return count


def average_recall_brute(gts, props, an, thresholds, an_mode="per_video"):
    vids = sorted(gts)
    per_video = {v: sorted([(float(s), float(e), float(sc)) for s, e, sc in props.get(v, [])],
                           key=lambda r: -r[2]) for v in vids}
    total_gt = sum(len(gts[v]) for v in vids)
    if an_mode == "per_video":
        kept = {v: per_video[v][:int(np.floor(an))] for v in vids}
    else:
        pool = []
        for vi, v in enumerate(vids):
            for j, row in enumerate(per_video[v]):
                pool.append((row[2], vi, j))
        order = sorted(range(len(pool)), key=lambda i: -pool[i][0])
        budget = int(np.floor(an * len(vids)))
        chosen = set(order[:budget])
        kept = {}
        for v in vids:
            kept[v] = []
        for rank, i in enumerate(order):
            if i in chosen:
                _, vi, j = pool[i]
                kept[vids[vi]].append(j)
        kept = {v: [per_video[v][j] for j in sorted(idx)] for v, idx in kept.items()}
    recalls = []
    for th in thresholds:
        hit = sum(_greedy_matched_count(gts[v], kept[v], th) for v in vids)
        recalls.append(hit / total_gt)
    return sum(recalls) / len(recalls)


def auc_brute(gts, props, thresholds, an_mode="per_video"):
    ans = list(range(1, 101))
    ar = [average_recall_brute(gts, props, an, thresholds, an_mode) for an in ans]
    area = 0.0
    for i in range(len(ans) - 1):
        area += 0.5 * (ar[i] + ar[i + 1]) * (ans[i + 1] - ans[i])
    return area / 100.0 * 100.0


# ---------------------------------------------------------------------------
# detection mAP
# ---------------------------------------------------------------------------

def _ap_brute(hits, npos):
    """All-point interpolated AP from an ordered hit/miss list."""
    if npos == 0 or not hits:
        return 0.0
    recs, precs = [], []
    tp = 0
    for i, h in enumerate(hits):
        tp += h
        recs.append(tp / npos)
        precs.append(tp / (i + 1))
    ap = 0.0
    prev_r = 0.0
    for r in sorted(set(recs)):
        p_at = max(p for p, rr in zip(precs, recs) if rr >= r)
        ap += (r - prev_r) * p_at
        prev_r = r
    return ap


def map_brute(gts_labeled, detections, thresholds):
    classes = sorted({int(lbl) for rows in gts_labeled.values() for _, _, lbl in rows})
    result = {}
    for th in thresholds:
        aps = []
        for c in classes:
            gt_by_vid = {}
            for vid in sorted(gts_labeled):
                rows = [(s, e) for s, e, lbl in gts_labeled[vid] if int(lbl) == c]
                if rows:
                    gt_by_vid[vid] = rows
            npos = sum(len(v) for v in gt_by_vid.values())
            dets = []
            for vid in sorted(detections):
                for s, e, score, lbl in detections[vid]:
                    if int(lbl) == c:
                        dets.append((float(score), vid, float(s), float(e)))
            dets.sort(key=lambda r: -r[0])
            matched = {v: [False] * len(g) for v, g in gt_by_vid.items()}
            hits = []
            for score, vid, s, e in dets:
                if vid not in gt_by_vid:
                    hits.append(0)
                    continue
                best, best_iou = -1, -1.0
                for m, row in enumerate(gt_by_vid[vid]):
                    if matched[vid][m]:
                        continue
                    v = tiou_scalar((s, e), row)
                    if v > best_iou:
                        best, best_iou = m, v
                if best >= 0 and best_iou >= th and best_iou > 0.0:
                    matched[vid][best] = True
                    hits.append(1)
                else:
                    hits.append(0)
            aps.append(_ap_brute(hits, npos))
        result[th] = sum(aps) / len(aps)
    return result
