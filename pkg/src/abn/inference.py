"""Proposal decoding: peak picking, pairing, fused scoring, NMS variants.

A proposal pairs a start peak ``t_s`` with a later end peak ``t_e``
(``0 < t_e - t_s <= D``) and is scored by

    ``P_S[t_s] * P_E[t_e] * sqrt(P_cc[d, t_s] * P_cr[d, t_s])``, ``d = t_e - t_s``.

Soft-NMS decays overlapping scores by ``exp(-tIoU^2 / sigma)`` and drops
proposals falling under a floor; hard NMS removes overlaps greedily.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .boundary import BoundaryOutputs
from .data import FeatureBundle, ModelConfig, VideoRecord, snippets_to_seconds, tiou
from .errors import ConfigError, DataError
from .kernels import soft_nms_core


@dataclass(frozen=True)
class InferenceConfig:
    tau_rel: float = 0.5        # peak threshold relative to the sequence max
    nms: str = "soft"           # soft | hard | none
    sigma: float = 0.4          # Gaussian decay width
    score_floor: float = 0.001  # Soft-NMS survival floor
    iou_thresh: float = 0.65    # hard-NMS overlap cutoff
    top_k: int = 100

    def __post_init__(self):
        if self.nms not in ("soft", "hard", "none"):
            raise ConfigError(f"unknown nms mode {self.nms!r}")


@dataclass(frozen=True)
class ProposalCandidate:
    """A scored snippet-coordinate interval, optionally mapped to seconds."""

    t_start: int
    t_end: int
    score: float
    start_sec: Optional[float] = None
    end_sec: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.t_start < self.t_end:
            raise DataError(f"bad proposal bounds [{self.t_start}, {self.t_end}]")

    @property
    def interval(self) -> tuple[float, float]:
        return (float(self.t_start), float(self.t_end))


def pick_peaks(p: np.ndarray, tau_rel: float = 0.5) -> np.ndarray:
    """Indices that are strict local maxima (one-sided at the endpoints) or
    reach ``tau_rel`` times the sequence maximum."""
    p = np.asarray(p, dtype=np.float64)
    T = p.shape[0]
    if T == 0:
        raise DataError("pick_peaks: empty sequence")
    if T == 1:
        return np.array([0], dtype=np.int64)
    peak = np.zeros(T, dtype=bool)
    peak[0] = p[0] > p[1]
    peak[-1] = p[-1] > p[-2]
    peak[1:-1] = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
    peak |= p >= tau_rel * p.max()
    return np.flatnonzero(peak).astype(np.int64)


def pair_and_score(starts: np.ndarray, ends: np.ndarray, outputs: BoundaryOutputs,
                   D: Optional[int] = None) -> list[ProposalCandidate]:
    """Exhaustively pair start/end peaks within range and apply the fused score."""
    D = outputs.D if D is None else D
    cands = []
    for ts in np.sort(np.asarray(starts, dtype=np.int64)):
        for te in np.sort(np.asarray(ends, dtype=np.int64)):
            d = int(te - ts)
            if d <= 0 or d > D:
                continue
            score = float(
                outputs.p_start[ts] * outputs.p_end[te]
                * np.sqrt(outputs.p_cc[d - 1, ts] * outputs.p_cr[d - 1, ts])
            )
            cands.append(ProposalCandidate(int(ts), int(te), score))
    return cands


def _sorted_desc(props: list[ProposalCandidate]) -> list[ProposalCandidate]:
    return sorted(props, key=lambda c: -c.score)


def soft_nms(props: list[ProposalCandidate], sigma: float = 0.4,
             score_floor: float = 0.001,
             top_k: Optional[int] = None) -> list[ProposalCandidate]:
    """Gaussian score decay; never raises any score, keeps the argmax intact."""
    if not props:
        return []
    cap = len(props) if top_k is None else int(top_k)
    starts = np.array([c.t_start for c in props], dtype=np.float64)
    ends = np.array([c.t_end for c in props], dtype=np.float64)
    scores = np.array([c.score for c in props], dtype=np.float64)
    order, final = soft_nms_core(starts, ends, scores, sigma, score_floor, cap)
    return [replace(props[i], score=float(s)) for i, s in zip(order, final)]


def hard_nms(props: list[ProposalCandidate], iou_thresh: float = 0.65,
             top_k: Optional[int] = None) -> list[ProposalCandidate]:
    """Greedy suppression: drop anything overlapping a kept proposal at or
    above ``iou_thresh``."""
    cap = len(props) if top_k is None else int(top_k)
    kept: list[ProposalCandidate] = []
    for cand in _sorted_desc(props):
        if len(kept) >= cap:
            break
        if all(tiou(cand.interval, k.interval) < iou_thresh for k in kept):
            kept.append(cand)
    return kept


def with_seconds(props: list[ProposalCandidate], rec: VideoRecord,
                 T: int) -> list[ProposalCandidate]:
    return [
        replace(c,
                start_sec=snippets_to_seconds(c.t_start, rec, T),
                end_sec=snippets_to_seconds(c.t_end, rec, T))
        for c in props
    ]


def video_proposals(params: dict, bundle: FeatureBundle, rec: VideoRecord,
                    cfg: ModelConfig, icfg: InferenceConfig = InferenceConfig(),
                    sampler=None) -> list[ProposalCandidate]:
    """Full per-video decode: forward pass, peaks, pairing, NMS, seconds."""
    from .model import forward_video

    outputs = forward_video(params, bundle, cfg, sampler=sampler)
    starts = pick_peaks(outputs.p_start, icfg.tau_rel)
    ends = pick_peaks(outputs.p_end, icfg.tau_rel)
    cands = pair_and_score(starts, ends, outputs, cfg.D)
    if icfg.nms == "soft":
        cands = soft_nms(cands, icfg.sigma, icfg.score_floor, icfg.top_k)
    elif icfg.nms == "hard":
        cands = hard_nms(cands, icfg.iou_thresh, icfg.top_k)
    else:
        cands = _sorted_desc(cands)[:icfg.top_k]
    return with_seconds(cands, rec, cfg.T)


# ---------------------------------------------------------------------------
# proposal file format
# ---------------------------------------------------------------------------

def write_proposals(path, proposals: dict[str, list[ProposalCandidate]]) -> None:
    """JSON: ``{video_id: [{"segment": [start_sec, end_sec], "score": s}, ...]}``
    sorted by descending score."""
    doc = {}
    for vid in sorted(proposals):
        rows = _sorted_desc(proposals[vid])
        doc[vid] = [
            {"segment": [c.start_sec, c.end_sec], "score": c.score} for c in rows
        ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def read_proposals(path) -> dict[str, list[tuple[float, float, float]]]:
    """Inverse of :func:`write_proposals`: ``video_id -> [(s, e, score), ...]``."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = {}
    for vid, rows in doc.items():
        out[vid] = [(float(r["segment"][0]), float(r["segment"][1]), float(r["score"]))
                    for r in rows]
    return out
