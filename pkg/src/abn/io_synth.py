"""Bit-exact feature-bundle files, annotation JSON, and synthetic videos.

Bundle container layout (single file):

* 8-byte magic ``ABNFBv1\\0``
* uint32 little-endian manifest length
* UTF-8 JSON manifest: format version, video id, ``T``, ``C``, per-snippet
  agent counts, and byte offsets of every payload section
* raw payload: the global ``(T, C)`` matrix followed by each snippet's agent
  block, all row-major float32 little-endian.

Synthetic videos: each video packs a few non-overlapping actions into ``T``
snippets.  In-action snippets carry an attenuated copy of the action's class
pattern in the global stream and one full-strength "acting agent" among
noise-only distractor agents, so agent-aware fusion has signal the
environment stream alone lacks.  Everything is deterministic per seed, with
per-video child seeds.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ActionInstance, FeatureBundle, VideoRecord
from .errors import (AnnotationError, BundleError, BundleInconsistentError,
                     BundleTruncatedError, BundleVersionError, DataError,
                     PackingError)

BUNDLE_MAGIC = b"ABNFBv1\x00"
BUNDLE_VERSION = 1

# synthetic-video frame geometry: 16-frame snippets at 8 fps -> 2 s per snippet
SYNTH_SNIPPET_FRAMES = 16
SYNTH_FPS = 8.0
PATTERN_AMPLITUDE = 3.0  # overall feature scale; keeps conv pre-activations healthy
ENV_PATTERN_GAIN = 0.5   # the global stream sees a diluted copy of the pattern
MIN_ACTION_SNIPPETS = 3.0
MIN_GAP_SNIPPETS = 2.0


# ---------------------------------------------------------------------------
# bundle files
# ---------------------------------------------------------------------------

def write_bundle(bundle: FeatureBundle, path) -> None:
    """Serialize a bundle; ``read_bundle(write_bundle(x)) == x`` bit-exactly."""
    if bundle.T < 1:
        raise DataError(f"{bundle.video_id}: refusing to write an empty bundle")
    counts = [int(a.shape[0]) for a in bundle.agent_feats]
    item = 4 * bundle.C
    offsets = {"global": 0}
    cursor = bundle.T * item
    agent_offsets = []
    for c in counts:
        agent_offsets.append(cursor)
        cursor += c * item
    offsets["agents"] = agent_offsets
    manifest = {
        "format_version": BUNDLE_VERSION,
        "video_id": bundle.video_id,
        "T": bundle.T,
        "C": bundle.C,
        "agent_counts": counts,
        "offsets": offsets,
        "payload_nbytes": cursor,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(bundle.global_feats, dtype="<f4").tobytes())
        for a in bundle.agent_feats:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_bundle(path) -> FeatureBundle:
    with open(path, "rb") as fh:
        magic = fh.read(len(BUNDLE_MAGIC))
        if magic != BUNDLE_MAGIC:
            raise BundleError(f"{path}: not a feature-bundle file")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise BundleTruncatedError(f"{path}: truncated manifest length")
        (mlen,) = struct.unpack("<I", raw_len)
        mraw = fh.read(mlen)
        if len(mraw) != mlen:
            raise BundleTruncatedError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(mraw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BundleError(f"{path}: unreadable manifest: {exc}") from exc
        if manifest.get("format_version") != BUNDLE_VERSION:
            raise BundleVersionError(
                f"{path}: unsupported bundle version {manifest.get('format_version')}"
            )
        payload = fh.read()

    T, C = manifest["T"], manifest["C"]
    counts = manifest["agent_counts"]
    item = 4 * C
    expected = item * (T + sum(counts))
    if manifest.get("payload_nbytes") != expected or len(manifest["offsets"]["agents"]) != T:
        raise BundleInconsistentError(f"{path}: manifest disagrees with its own geometry")
    if len(payload) < expected:
        raise BundleTruncatedError(
            f"{path}: payload has {len(payload)} bytes, manifest declares {expected}"
        )
    if len(payload) > expected:
        raise BundleInconsistentError(
            f"{path}: payload has {len(payload)} bytes, manifest declares {expected}"
        )
    if manifest["offsets"]["global"] != 0:
        raise BundleInconsistentError(f"{path}: global section must start at offset 0")
    g = np.frombuffer(payload, dtype="<f4", count=T * C, offset=0).reshape(T, C)
    agents = []
    cursor = item * T
    for t, (cnt, off) in enumerate(zip(counts, manifest["offsets"]["agents"])):
        if off != cursor:
            raise BundleInconsistentError(f"{path}: bad agent offset at snippet {t}")
        agents.append(np.frombuffer(payload, dtype="<f4", count=cnt * C,
                                    offset=off).reshape(cnt, C))
        cursor += cnt * item
    return FeatureBundle(manifest["video_id"], g.copy(), tuple(a.copy() for a in agents))


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def write_annotations(records: list[VideoRecord], path) -> None:
    doc = {}
    for rec in sorted(records, key=lambda r: r.video_id):
        doc[rec.video_id] = {
            "duration_seconds": rec.duration_seconds,
            "fps": rec.fps,
            "frame_count": rec.frame_count,
            "annotations": [
                {"label": a.label, "segment": [a.start, a.end]} for a in rec.actions
            ],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def parse_annotations(path) -> list[VideoRecord]:
    """Validated records from ``{video_id: {duration_seconds, fps, annotations}}``.

    Segment ends may exceed the duration by at most one frame period (they are
    clamped); anything further out is rejected.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise AnnotationError(f"{path}: top level must be an object")
    records = []
    for vid in sorted(doc):
        entry = doc[vid]
        try:
            duration = float(entry["duration_seconds"])
            fps = float(entry["fps"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: {vid}: missing duration_seconds/fps") from exc
        frame_count = int(entry.get("frame_count", round(duration * fps)))
        actions = []
        for i, ann in enumerate(entry.get("annotations", [])):
            seg = ann.get("segment")
            if not isinstance(seg, (list, tuple)) or len(seg) != 2:
                raise AnnotationError(f"{path}: {vid}: annotation {i} lacks a segment pair")
            s, e = float(seg[0]), float(seg[1])
            if e <= s:
                raise AnnotationError(
                    f"{path}: {vid}: segment [{s}, {e}] has end <= start"
                )
            if s < 0 or e > duration + 1.0 / fps:
                raise AnnotationError(
                    f"{path}: {vid}: segment [{s}, {e}] outside duration {duration}"
                )
            actions.append(ActionInstance(s, min(e, duration), label=ann.get("label")))
        try:
            records.append(VideoRecord(vid, duration, fps, frame_count, tuple(actions)))
        except DataError as exc:
            raise AnnotationError(f"{path}: {vid}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic untrimmed-video generator."""

    n_videos: int
    T: int = 50
    C: int = 32
    n_classes: int = 5
    actions_min: int = 1
    actions_max: int = 3
    agent_rate: float = 1.5   # mean distractor agents per snippet
    snr: float = 2.5          # class-pattern amplitude over noise amplitude
    seed: int = 0
    id_prefix: str = "synth"

    def __post_init__(self):
        if self.n_videos < 1 or self.T < 4 or self.C < 2:
            raise DataError("SynthSpec: n_videos, T, C too small")
        if not 0 <= self.actions_min <= self.actions_max:
            raise DataError("SynthSpec: need 0 <= actions_min <= actions_max")
        if self.n_classes < 1 or self.n_classes > self.C:
            raise DataError("SynthSpec: need 1 <= n_classes <= C")
        if self.agent_rate < 0 or self.snr <= 0:
            raise DataError("SynthSpec: agent_rate >= 0 and snr > 0 required")


def class_patterns(spec: SynthSpec) -> np.ndarray:
    """Fixed orthonormal class pattern vectors, ``(n_classes, C)``, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    q, _ = np.linalg.qr(rng.normal(0, 1, (spec.C, spec.C)))
    return np.ascontiguousarray(q[: spec.n_classes])


def _pack_actions(rng, T: int, m: int) -> np.ndarray:
    """m disjoint snippet-aligned intervals with >= 2-snippet margins.

    Boundaries land on the snippet grid so a snippet-indexed proposal can
    reach tIoU 1 against every ground-truth action; recall at tight
    thresholds then measures the model, not grid quantization.
    """
    if m == 0:
        return np.zeros((0, 2))
    len_lo = int(MIN_ACTION_SNIPPETS)
    len_hi = max(len_lo + 1, int(round(0.3 * T)))
    gap = int(MIN_GAP_SNIPPETS)
    fixed = m * len_lo + gap * (m + 1)
    if fixed > T:
        raise PackingError(f"cannot fit {m} actions of >= {len_lo} snippets into T={T}")
    for _ in range(200):
        lengths = rng.integers(len_lo, len_hi + 1, size=m)
        slack = int(T - lengths.sum() - gap * (m + 1))
        if slack >= 0:
            extra = rng.multinomial(slack, np.full(m + 1, 1.0 / (m + 1)))
            gaps = extra + gap
            starts = np.cumsum(gaps)[:m] + np.concatenate([[0], np.cumsum(lengths)[:-1]])
            return np.stack([starts, starts + lengths], axis=1).astype(np.float64)
    raise PackingError(f"failed to pack {m} actions into T={T} after 200 draws")


def _noise(rng, shape, sigma):
    if sigma == 0.0:
        return np.zeros(shape)
    return rng.normal(0.0, sigma, shape)


def generate(spec: SynthSpec) -> tuple[list[FeatureBundle], list[VideoRecord]]:
    """Synthesize feature bundles plus exactly matching ground truth."""
    patterns = class_patterns(spec) * PATTERN_AMPLITUDE
    sigma = 0.0 if math.isinf(spec.snr) else PATTERN_AMPLITUDE / (spec.snr * math.sqrt(spec.C))
    seconds_per_snippet = SYNTH_SNIPPET_FRAMES / SYNTH_FPS
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_videos + 1)[1:]

    bundles, records = [], []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        m = int(rng.integers(spec.actions_min, spec.actions_max + 1))
        intervals = _pack_actions(rng, spec.T, m)
        labels = rng.integers(0, spec.n_classes, size=m)

        centers = np.arange(spec.T) + 0.5
        owner = np.full(spec.T, -1, dtype=np.int64)
        for j, (s, e) in enumerate(intervals):
            owner[(centers >= s) & (centers <= e)] = j

        g = _noise(rng, (spec.T, spec.C), sigma)
        agent_sets = []
        for t in range(spec.T):
            n_extra = int(rng.poisson(spec.agent_rate))
            rows = _noise(rng, (n_extra, spec.C), sigma)
            if owner[t] >= 0:
                u = patterns[labels[owner[t]]]
                g[t] += ENV_PATTERN_GAIN * u
                actor = u + _noise(rng, (spec.C,), sigma)
                slot = int(rng.integers(0, n_extra + 1))
                rows = np.insert(rows, slot, actor, axis=0)
            agent_sets.append(rows.astype(np.float32))

        vid = f"{spec.id_prefix}_{i:04d}"
        bundles.append(FeatureBundle(vid, g.astype(np.float32), tuple(agent_sets)))
        actions = tuple(
            ActionInstance(s * seconds_per_snippet, e * seconds_per_snippet, int(lbl))
            for (s, e), lbl in zip(intervals, labels)
        )
        records.append(VideoRecord(
            vid,
            duration_seconds=spec.T * seconds_per_snippet,
            fps=SYNTH_FPS,
            frame_count=spec.T * SYNTH_SNIPPET_FRAMES,
            actions=actions,
        ))
    return bundles, records


def write_dataset(bundles: list[FeatureBundle], records: list[VideoRecord],
                  out_dir) -> None:
    """Write ``annotations.json`` plus one ``bundles/<video_id>.fb`` per video."""
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    write_annotations(records, out / "annotations.json")
    for b in bundles:
        write_bundle(b, out / "bundles" / f"{b.video_id}.fb")


def read_dataset(data_dir) -> list[tuple[VideoRecord, FeatureBundle]]:
    """Load a dataset directory into (record, bundle) pairs sorted by id."""
    data = Path(data_dir)
    records = parse_annotations(data / "annotations.json")
    pairs = []
    for rec in records:
        bundle = read_bundle(data / "bundles" / f"{rec.video_id}.fb")
        pairs.append((rec, bundle))
    return pairs
