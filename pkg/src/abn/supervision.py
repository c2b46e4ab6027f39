"""Training-target generation.

Boundary labels: snippet ``n`` covers ``r_n = [n - 1/2, n + 1/2]``; every
action boundary ``x`` (in snippet units) spawns a region ``[x - 3/2, x + 3/2]``.
A snippet is positive when its overlap with some boundary region, divided by
the snippet width, reaches 0.5.  The divisor and the across-action
aggregation are configurable (``denominator="snippet"|"region"``,
``aggregate="max"|"sum"``); the defaults (snippet, max) are the only
combination under which the 0.5 threshold is reachable while two distant
actions cannot jointly promote a non-boundary snippet.

Duration labels: cell ``(r, t)`` scores the interval ``[t, t + r + 1]``.
``g_iou`` holds the dense max-IoU against the ground truth; the binary label
marks cells whose IoU is positive and not exceeded by any valid
8-neighborhood cell (ties all marked).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary import valid_cell_mask
from .data import ModelConfig, VideoRecord, seconds_to_snippets
from .errors import DataError

BOUNDARY_REGION_HALF_WIDTH = 1.5
POSITIVE_THRESHOLD = 0.5


@dataclass(frozen=True)
class SupervisionTargets:
    """Per-video label pack for one ``(T, D)`` grid."""

    l_start: np.ndarray    # (T,) in {0, 1}
    l_end: np.ndarray      # (T,)
    l_dur_bin: np.ndarray  # (D, T) in {0, 1}
    g_iou: np.ndarray      # (D, T) dense max-IoU in [0, 1]
    valid_mask: np.ndarray  # (D, T) bool


def _region_labels(coords: np.ndarray, T: int, denominator: str, aggregate: str) -> np.ndarray:
    half = BOUNDARY_REGION_HALF_WIDTH
    n = np.arange(T, dtype=np.float64)
    lo = np.maximum(n[None, :] - 0.5, coords[:, None] - half)
    hi = np.minimum(n[None, :] + 0.5, coords[:, None] + half)
    overlap = np.maximum(hi - lo, 0.0)
    denom = 1.0 if denominator == "snippet" else 2.0 * half
    ratio = overlap / denom
    agg = ratio.max(axis=0) if aggregate == "max" else ratio.sum(axis=0)
    return (agg >= POSITIVE_THRESHOLD).astype(np.float64)


def boundary_labels(actions_snip: np.ndarray, T: int, *,
                    denominator: str = "snippet",
                    aggregate: str = "max") -> tuple[np.ndarray, np.ndarray]:
    """Binary start/end label vectors for actions in snippet coordinates."""
    actions = np.asarray(actions_snip, dtype=np.float64).reshape(-1, 2)
    if actions.shape[0] == 0:
        raise DataError("boundary_labels: empty action list is rejected for training")
    if denominator not in ("snippet", "region"):
        raise DataError(f"unknown denominator mode {denominator!r}")
    if aggregate not in ("max", "sum"):
        raise DataError(f"unknown aggregate mode {aggregate!r}")
    l_start = _region_labels(actions[:, 0], T, denominator, aggregate)
    l_end = _region_labels(actions[:, 1], T, denominator, aggregate)
    return l_start, l_end


def duration_labels(actions_snip: np.ndarray, T: int, D: int):
    """Dense IoU map, binary local-maximum labels and validity mask.

    Returns ``(l_dur_bin, g_iou, valid_mask)``, each ``(D, T)``.
    """
    actions = np.asarray(actions_snip, dtype=np.float64).reshape(-1, 2)
    if actions.shape[0] == 0:
        raise DataError("duration_labels: empty action list is rejected for training")
    if not 1 <= D <= T:
        raise DataError(f"require 1 <= D <= T, got D={D}, T={T}")
    valid = valid_cell_mask(T, D)
    lo = np.arange(T, dtype=np.float64)[None, :]
    hi = lo + np.arange(1, D + 1, dtype=np.float64)[:, None]

    g = np.zeros((D, T), dtype=np.float64)
    for s, e in actions:
        inter = np.minimum(hi, e) - np.maximum(lo, s)
        inter = np.maximum(inter, 0.0)
        union = (hi - lo) + (e - s) - inter
        iou = np.where(inter > 0.0, inter / union, 0.0)
        g = np.maximum(g, iou)
    g[~valid] = 0.0

    # strict 8-neighborhood maximality on the valid grid; ties all marked
    padded = np.full((D + 2, T + 2), -np.inf)
    padded[1:D + 1, 1:T + 1] = np.where(valid, g, -np.inf)
    is_max = np.ones((D, T), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= g >= padded[1 + dy:1 + dy + D, 1 + dx:1 + dx + T]
    l_bin = ((g > 0.0) & valid & is_max).astype(np.float64)
    return l_bin, g, valid


def targets_for_video(rec: VideoRecord, cfg: ModelConfig) -> SupervisionTargets:
    """Rescale a video's actions to the ``[0, T]`` range and build all labels."""
    if not rec.actions:
        raise DataError(f"{rec.video_id}: videos without actions are rejected for training")
    snip = np.array([seconds_to_snippets(a, rec, cfg.T) for a in rec.actions])
    l_start, l_end = boundary_labels(snip, cfg.T)
    l_bin, g_iou, valid = duration_labels(snip, cfg.T, cfg.D)
    return SupervisionTargets(l_start, l_end, l_bin, g_iou, valid)
