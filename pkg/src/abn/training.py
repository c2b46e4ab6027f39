"""Dataset augmentation, the optimization loop, checkpoints and gradient checks.

Determinism contract: given identical seed, config and data, two runs produce
bit-identical parameters.  Parameters are stored float32 (matching the
checkpoint payload), gradients are computed in the configured dtype, and the
adaptive-moment update runs in float64 before truncating back to float32 --
so a saved/loaded checkpoint reproduces the in-memory parameters exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import ActionInstance, FeatureBundle, ModelConfig, VideoRecord
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import batch_loss_and_grads, cast_params, init_params
from .boundary import make_sampler
from .supervision import targets_for_video

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"ABNCKPT1"
CKPT_VERSION = 1


def augment_dataset(videos: list[VideoRecord], tau_upper: float = 0.98,
                    tau_lower: float = 0.3) -> list[VideoRecord]:
    """Length-ratio augmentation: drop near-full-length videos, duplicate
    short-action ones.

    ``rho`` is the mean action length over the video length; ``rho >
    tau_upper`` discards the video, ``rho < tau_lower`` includes it twice.
    Records are shared, never copied or modified.
    """
    if not tau_lower < tau_upper:
        raise ConfigError(f"require tau_lower < tau_upper, got {tau_lower} >= {tau_upper}")
    out = []
    for rec in videos:
        if rec.actions:
            rho = float(np.mean([a.length for a in rec.actions])) / rec.duration_seconds
        else:
            rho = 0.0
        if rho > tau_upper:
            continue
        out.append(rec)
        if rho < tau_lower:
            out.append(rec)
    return out


class Adam:
    """First-order adaptive-moment optimizer over a flat parameter dict."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - ADAM_BETA1 ** self.t
        b2c = 1.0 - ADAM_BETA2 ** self.t
        for name in sorted(params):
            if name not in grads:
                continue
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
            params[name] = (params[name].astype(np.float64) - update).astype(np.float32)


@dataclass
class TrainState:
    """Everything the loop accumulates; ``best_params`` tracks validation AUC."""

    params: dict
    cfg: ModelConfig
    epoch: int = 0
    best_params: Optional[dict] = None
    best_auc: Optional[float] = None
    best_epoch: int = 0
    history: list = field(default_factory=list)


def _sorted_pairs(data):
    return sorted(data, key=lambda pair: pair[0].video_id)


def _validation_auc(params, val_data, cfg) -> float:
    from .evaluation import auc_score
    from .inference import InferenceConfig, video_proposals

    icfg = InferenceConfig()
    sampler = make_sampler(cfg)
    gts, props = {}, {}
    for rec, bundle in val_data:
        cands = video_proposals(params, bundle, rec, cfg, icfg, sampler=sampler)
        props[rec.video_id] = [(c.start_sec, c.end_sec, c.score) for c in cands]
        gts[rec.video_id] = np.array([(a.start, a.end) for a in rec.actions])
    return auc_score(gts, props)


def train(train_data: list[tuple[VideoRecord, FeatureBundle]],
          val_data: list[tuple[VideoRecord, FeatureBundle]],
          cfg: ModelConfig, *, progress=None) -> TrainState:
    """Run the optimization loop and keep the best-on-validation snapshot.

    ``train_data``/``val_data`` are (record, bundle) pairs; records must carry
    at least one action each.  Deterministic given ``cfg.seed``.
    """
    if not train_data:
        raise DataError("train: empty training set")
    train_data = _sorted_pairs(train_data)
    val_data = _sorted_pairs(val_data)
    targets = [targets_for_video(rec, cfg) for rec, _ in train_data]

    params = init_params(cfg)
    state = TrainState(params=params, cfg=cfg)
    state.best_params = {k: v.copy() for k, v in params.items()}
    sampler = make_sampler(cfg)
    opt = Adam()
    order_rng = np.random.default_rng([cfg.seed, 0xDA7A])
    dtype = cfg.np_dtype
    n = len(train_data)

    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            bundles = [train_data[i][1] for i in idx]
            tgts = [targets[i] for i in idx]
            p_cast = cast_params(params, dtype)
            try:
                terms, grads = batch_loss_and_grads(p_cast, bundles, tgts, cfg, sampler, dtype)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(terms["l_total"]):
                raise DivergenceError(f"epoch {epoch}: non-finite batch loss {terms}")
            opt.step(params, grads, cfg.lr)
            epoch_loss += terms["l_total"] * len(idx) / n
        state.epoch = epoch

        val_auc = None
        if val_data:
            val_auc = _validation_auc(params, val_data, cfg)
            if state.best_auc is None or val_auc > state.best_auc:
                state.best_auc = val_auc
                state.best_epoch = epoch
                state.best_params = {k: v.copy() for k, v in params.items()}
        else:
            state.best_params = {k: v.copy() for k, v in params.items()}
            state.best_epoch = epoch
        state.history.append({"epoch": epoch, "loss": epoch_loss, "val_auc": val_auc})
        if progress is not None:
            progress(state.history[-1])
    return state


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + raw float32 little-endian payload
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: ModelConfig, *, epoch: int = 0,
                    best_auc: Optional[float] = None) -> None:
    names = sorted(params)
    entries = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "epoch": epoch,
        "best_auc": best_auc,
        "params": entries,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns ``(params, header)``; params are float32 exactly as written."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}"
            )
        payload = fh.read()
    params = {}
    for ent in header["params"]:
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload at {ent['name']}")
        params[ent["name"]] = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).copy()
    return params, header


def config_from_header(header: dict) -> ModelConfig:
    return ModelConfig(**header["config"])


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def _gradcheck_problem(cfg: ModelConfig, seed: int):
    """Tiny deterministic batch: two videos with features and actions."""
    rng = np.random.default_rng(seed)
    T, C = cfg.T, cfg.C
    bundles, records = [], []
    specs = [((2.0, 7.0),), ((1.0, 3.5), (6.0, 10.5))]
    for i, actions in enumerate(specs):
        g = rng.normal(0, 1, (T, C))
        agents = [rng.normal(0, 1, (int(rng.integers(0, 4)), C)) for _ in range(T)]
        bundles.append(FeatureBundle(f"gc_{i}", g, tuple(agents)))
        records.append(VideoRecord(
            f"gc_{i}", duration_seconds=float(T), fps=1.0, frame_count=T,
            actions=tuple(ActionInstance(s, e) for s, e in actions),
        ))
    targets = [targets_for_video(r, cfg) for r in records]
    return bundles, targets


def grad_check(cfg: Optional[ModelConfig] = None, *, h: float = 1e-4,
               coords_per_group: int = 6, seed: int = 202) -> dict:
    """Analytic vs central finite-difference gradients of the total loss.

    For every parameter group, the largest-gradient coordinates are probed
    one at a time with central differences at step ``h``.  The loss is only
    piecewise smooth: with ~1e5 ReLU units, some pre-activation always sits
    within ``h`` of its kink for upstream parameters, where a raw central
    difference estimates no derivative at all.  Each probe therefore checks
    whether any ReLU flips between the two evaluations; if so, the probe is
    re-evaluated with every activation pinned to the base point's on/off
    branch -- the smooth piece whose gradient the analytic backward computes.
    Kink-free probes (the common case for downstream groups) take the raw
    path, which also exercises the mask selection itself.

    Per group, probes are compared as vectors:
    ``|fd - analytic|_2 / max(|fd|_2, |analytic|_2)``.  Deterministic, float64.
    Returns per-group errors, the overall max, and the frozen-probe count.
    """
    if cfg is None:
        cfg = ModelConfig(C=8, T=12, D=6, n_samples=4, heads=4, dtype="float64", seed=11)
    if cfg.dtype != "float64":
        raise ConfigError("grad_check requires dtype='float64'")
    bundles, targets = _gradcheck_problem(cfg, seed)
    sampler = make_sampler(cfg)
    params = cast_params(init_params(cfg), np.float64)
    _, grads = batch_loss_and_grads(params, bundles, targets, cfg, sampler, np.float64)

    from .boundary import extract_relu_masks
    from .fusion import extract_ffn_masks
    from .losses import total_loss_with_grads
    from .model import _HeadView, batch_forward

    def run(p, frozen=None):
        outs, (fuse_cache, bnd_cache) = batch_forward(p, bundles, cfg, sampler,
                                                      np.float64, frozen=frozen)
        total = 0.0
        for b in range(len(bundles)):
            report, _ = total_loss_with_grads(_HeadView(outs, b), targets[b], cfg)
            total += report.l_total / len(bundles)
        signature = (extract_ffn_masks(fuse_cache), extract_relu_masks(bnd_cache))
        return total, signature

    def same_branch(sig_a, sig_b):
        fa, ba = sig_a
        fb, bb = sig_b
        for key in ba:
            if not np.array_equal(ba[key], bb[key]):
                return False
        if fa is None:
            return fb is None
        for a_count in fa["agent"]:
            for ma, mb in zip(fa["agent"][a_count], fb["agent"][a_count]):
                if ma is not None and not np.array_equal(ma, mb):
                    return False
        if fa["pair"] is not None:
            for ma, mb in zip(fa["pair"], fb["pair"]):
                if ma is not None and not np.array_equal(ma, mb):
                    return False
        return True

    _, base_sig = run(params)
    frozen = {"fusion": base_sig[0], "boundary": base_sig[1]}

    per_group = {}
    frozen_probes = 0
    for name in sorted(params):
        base = params[name]
        flat = np.asarray(grads.get(name, np.zeros_like(base)), dtype=np.float64).reshape(-1)
        k = min(coords_per_group, flat.size)
        coords = np.argsort(-np.abs(flat))[:k]
        fd_vec = np.empty(k)
        an_vec = flat[coords].astype(np.float64)
        for j, ci in enumerate(coords):
            delta = np.zeros(flat.size)
            delta[ci] = h
            delta = delta.reshape(base.shape)
            plus = dict(params)
            plus[name] = base + delta
            minus = dict(params)
            minus[name] = base - delta
            lp, sig_p = run(plus)
            lm, sig_m = run(minus)
            if not same_branch(sig_p, sig_m):
                frozen_probes += 1
                lp, _ = run(plus, frozen=frozen)
                lm, _ = run(minus, frozen=frozen)
            fd_vec[j] = (lp - lm) / (2.0 * h)
        denom = max(float(np.linalg.norm(fd_vec)), float(np.linalg.norm(an_vec)), 1e-6)
        per_group[name] = float(np.linalg.norm(fd_vec - an_vec) / denom)
    return {
        "h": h,
        "per_group": per_group,
        "max_rel_err": float(max(per_group.values())),
        "frozen_probes": frozen_probes,
    }
