"""Core domain types and coordinate conventions.

Two coordinate systems are used throughout:

* seconds -- annotations, proposals handed to metrics, everything user-facing;
* continuous snippet units in ``[0, T]`` -- labels and network outputs.

Snippet index ``n`` (an integer in ``0..T-1``) covers the temporal region
``[n - 1/2, n + 1/2]``.  A duration/start cell with row ``r`` and column ``t``
scores the interval ``[t, t + d]`` with ``d = r + 1`` snippets and is valid
iff ``t + d <= T``.

All types are immutable value objects after construction and safe to share
across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

VALID_FEATURE_MODES = ("agent_env", "env_only", "agent_only")
VALID_DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class ActionInstance:
    """A temporal segment in seconds, optionally labeled and scored."""

    start: float
    end: float
    label: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.start >= 0.0 and self.end > self.start):
            raise DataError(
                f"action must satisfy 0 <= start < end, got [{self.start}, {self.end}]"
            )
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise DataError(f"action score outside [0, 1]: {self.score}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class VideoRecord:
    """An untrimmed video: duration, frame geometry and ground-truth actions."""

    video_id: str
    duration_seconds: float
    fps: float
    frame_count: int
    actions: tuple[ActionInstance, ...] = ()

    def __post_init__(self):
        if self.duration_seconds <= 0 or self.fps <= 0 or self.frame_count <= 0:
            raise DataError(
                f"{self.video_id}: duration, fps and frame_count must be positive"
            )
        period = 1.0 / self.fps
        if abs(self.duration_seconds - self.frame_count / self.fps) > period + 1e-9:
            raise DataError(
                f"{self.video_id}: duration {self.duration_seconds}s does not match "
                f"{self.frame_count} frames at {self.fps} fps"
            )
        object.__setattr__(self, "actions", tuple(self.actions))
        for a in self.actions:
            if a.end > self.duration_seconds + 1e-9:
                raise DataError(
                    f"{self.video_id}: action [{a.start}, {a.end}] exceeds "
                    f"duration {self.duration_seconds}"
                )


@dataclass(frozen=True)
class FeatureBundle:
    """Per-video snippet features: one global row and a ragged agent set per snippet.

    ``global_feats`` is ``(T, C)``; ``agent_feats[t]`` is ``(A_t, C)`` with
    ``A_t >= 0``.  All arrays are float32, finite, and frozen read-only.
    """

    video_id: str
    global_feats: np.ndarray
    agent_feats: tuple[np.ndarray, ...]

    def __post_init__(self):
        g = np.ascontiguousarray(self.global_feats, dtype=np.float32)
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise DataError(f"{self.video_id}: global feature matrix must be (T, C) with T, C >= 1")
        agents = []
        for t, a in enumerate(self.agent_feats):
            a = np.ascontiguousarray(a, dtype=np.float32).reshape(-1, g.shape[1])
            if not np.all(np.isfinite(a)):
                raise DataError(f"{self.video_id}: non-finite agent feature at snippet {t}")
            a.setflags(write=False)
            agents.append(a)
        if len(agents) != g.shape[0]:
            raise DataError(
                f"{self.video_id}: {len(agents)} agent sets for {g.shape[0]} snippets"
            )
        if not np.all(np.isfinite(g)):
            raise DataError(f"{self.video_id}: non-finite global features")
        g.setflags(write=False)
        object.__setattr__(self, "global_feats", g)
        object.__setattr__(self, "agent_feats", tuple(agents))

    @property
    def T(self) -> int:
        return self.global_feats.shape[0]

    @property
    def C(self) -> int:
        return self.global_feats.shape[1]

    @property
    def agent_counts(self) -> np.ndarray:
        return np.array([a.shape[0] for a in self.agent_feats], dtype=np.int64)


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters shared by fusion, boundary network, training and inference."""

    C: int
    T: int = 100
    D: Optional[int] = None          # max proposal duration in snippets; None -> T
    n_samples: int = 32              # interpolation samples per proposal
    heads: int = 4
    layers: int = 1
    lambda1: float = 1.0             # boundary-head loss weight
    lambda2: float = 1.0             # confidence-head loss weight
    lambda_reg: float = 10.0         # regression term weight inside the confidence loss
    lr: float = 1e-4
    epochs: int = 10
    tau_upper: float = 0.98
    tau_lower: float = 0.3
    seed: int = 0
    # implementation knobs
    rho_ext: float = 0.25            # per-side proposal extension ratio for sampling
    dtype: str = "float64"           # compute dtype; parameters are stored float32
    batch_size: int = 16
    encoder_residual: bool = True    # residual + layer-norm around attention/FFN
    encoder_ffn: bool = True
    feature_mode: str = "agent_env"  # agent_env | env_only | agent_only
    regress_binary: bool = False     # regression target: binary labels instead of dense IoU

    def __post_init__(self):
        if self.D is None:
            object.__setattr__(self, "D", self.T)
        if not (1 <= self.D <= self.T):
            raise ConfigError(f"require 1 <= D <= T, got D={self.D}, T={self.T}")
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if min(self.lambda1, self.lambda2, self.lambda_reg) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.C < 1 or self.heads < 1 or self.C % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide C ({self.C})")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if not (0.0 <= self.tau_lower < self.tau_upper):
            raise ConfigError("require 0 <= tau_lower < tau_upper")
        if self.feature_mode not in VALID_FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {VALID_FEATURE_MODES}")
        if self.dtype not in VALID_DTYPES:
            raise ConfigError(f"dtype must be one of {VALID_DTYPES}")
        if self.rho_ext < 0:
            raise ConfigError("rho_ext must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def seconds_to_snippets(action: ActionInstance, rec: VideoRecord, T: int) -> tuple[float, float]:
    """Rescale an action from seconds to the continuous ``[0, T]`` snippet range.

    Both boundaries map through ``x * fps * T / frame_count``.  The mapping is
    linear and order-preserving; results are clipped to ``[0, T]`` to absorb
    the one-frame tolerance allowed on ``duration_seconds``.
    """
    if rec.frame_count <= 0 or rec.fps <= 0:
        raise DataError(f"{rec.video_id}: non-positive frame_count or fps")
    if action.start < 0 or action.end > rec.duration_seconds + 1e-9:
        raise DataError(
            f"{rec.video_id}: action [{action.start}, {action.end}] outside video extent"
        )
    scale = rec.fps * T / rec.frame_count
    lo = min(max(action.start * scale, 0.0), float(T))
    hi = min(max(action.end * scale, 0.0), float(T))
    return lo, hi


def snippets_to_seconds(x: float, rec: VideoRecord, T: int) -> float:
    """Inverse of :func:`seconds_to_snippets` for a single coordinate."""
    return x * rec.frame_count / (rec.fps * T)


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    """Temporal intersection-over-union of two ``(start, end)`` intervals.

    Symmetric, bounded in ``[0, 1]``; degenerate zero-length intervals give 0.
    """
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between interval sets ``a: (N, 2)`` and ``b: (M, 2)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(hi - lo, 0.0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)
    return np.where(inter > 0.0, out, 0.0)
