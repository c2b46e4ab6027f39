"""End-to-end wiring: fusion -> boundary network -> losses.

Parameters for the whole model live in one flat ``name -> float32 array``
dict, created in a fixed order from the config seed.  Compute dtype is a
config knob (float32 for speed, float64 for gradient checks); parameters are
cast once per step.
"""

from __future__ import annotations

import numpy as np

from .boundary import (BoundaryOutputs, boundary_backward, boundary_forward,
                       init_boundary_params, make_sampler, valid_cell_mask)
from .data import FeatureBundle, ModelConfig
from .errors import DataError
from .fusion import fuse_batch_backward, fuse_batch_forward, init_fusion_params
from .losses import total_loss_with_grads


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded float32 parameter dict; identical across feature modes."""
    rng = np.random.default_rng(cfg.seed)
    params = init_fusion_params(cfg, rng)
    params.update(init_boundary_params(cfg, rng))
    return params


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _check_bundle(bundle: FeatureBundle, cfg: ModelConfig) -> None:
    if bundle.T != cfg.T:
        raise DataError(
            f"{bundle.video_id}: bundle has T={bundle.T} but the model expects "
            f"T={cfg.T}; regenerate features at the configured snippet count"
        )
    if bundle.C != cfg.C:
        raise DataError(f"{bundle.video_id}: bundle C={bundle.C} != config C={cfg.C}")


def batch_forward(params: dict, bundles: list[FeatureBundle], cfg: ModelConfig,
                  sampler, dtype=None, frozen=None):
    """Forward a batch of bundles; returns output dict (B, ...) plus caches.

    ``frozen`` optionally carries ReLU masks (``{"fusion": ..., "boundary":
    ...}``) pinning every activation to a fixed branch; used by gradient
    checks only.
    """
    dtype = cfg.np_dtype if dtype is None else dtype
    for b in bundles:
        _check_bundle(b, cfg)
    B, T, C = len(bundles), cfg.T, cfg.C
    globals_flat = np.concatenate([b.global_feats for b in bundles]).astype(dtype)
    agent_lists = [a for b in bundles for a in b.agent_feats]
    fused_flat, fuse_cache = fuse_batch_forward(
        globals_flat, agent_lists, params, cfg, dtype,
        frozen=None if frozen is None else frozen["fusion"])
    outs, bnd_cache = boundary_forward(
        params, fused_flat.reshape(B, T, C), sampler, cfg,
        relu_masks=None if frozen is None else frozen["boundary"])
    return outs, (fuse_cache, bnd_cache)


def forward_video(params: dict, bundle: FeatureBundle, cfg: ModelConfig,
                  sampler=None) -> BoundaryOutputs:
    """Single-video inference pass producing a :class:`BoundaryOutputs`."""
    if sampler is None:
        sampler = make_sampler(cfg)
    p64 = cast_params(params, cfg.np_dtype)
    outs, _ = batch_forward(p64, [bundle], cfg, sampler)
    return BoundaryOutputs(
        p_start=np.asarray(outs["p_start"][0], dtype=np.float64),
        p_end=np.asarray(outs["p_end"][0], dtype=np.float64),
        p_cc=np.asarray(outs["p_cc"][0], dtype=np.float64),
        p_cr=np.asarray(outs["p_cr"][0], dtype=np.float64),
        valid_mask=valid_cell_mask(cfg.T, cfg.D),
    )


class _HeadView:
    """Single-video view into batched head outputs, for the loss functions."""

    def __init__(self, outs, b):
        self.p_start = outs["p_start"][b]
        self.p_end = outs["p_end"][b]
        self.p_cc = outs["p_cc"][b]
        self.p_cr = outs["p_cr"][b]


def batch_loss_and_grads(params: dict, bundles: list[FeatureBundle], targets: list,
                         cfg: ModelConfig, sampler, dtype=None):
    """Mean loss over the batch and gradients for every parameter.

    Returns ``(loss_terms, grads)`` where ``loss_terms`` is a dict with the
    batch-mean ``l_total``, ``l_tam`` and ``l_pam``.
    """
    dtype = cfg.np_dtype if dtype is None else dtype
    outs, (fuse_cache, bnd_cache) = batch_forward(params, bundles, cfg, sampler, dtype)
    B, T, C = len(bundles), cfg.T, cfg.C

    douts = {k: np.zeros_like(np.asarray(outs[k], dtype=np.float64)) for k in outs}
    tot = {"l_total": 0.0, "l_tam": 0.0, "l_pam": 0.0}
    for b in range(B):
        report, head_grads = total_loss_with_grads(_HeadView(outs, b), targets[b], cfg)
        if not np.isfinite(report.l_total):
            raise FloatingPointError(
                f"non-finite loss for {bundles[b].video_id}: "
                f"tam={report.l_tam} pam={report.l_pam}"
            )
        tot["l_total"] += report.l_total / B
        tot["l_tam"] += report.l_tam / B
        tot["l_pam"] += report.l_pam / B
        for k in douts:
            douts[k][b] = head_grads[k] / B

    grads: dict[str, np.ndarray] = {}
    douts = {k: v.astype(dtype) for k, v in douts.items()}
    dfused = boundary_backward(douts, bnd_cache, params, grads)
    fuse_batch_backward(dfused.reshape(B * T, C), fuse_cache, params, cfg, grads)
    return tot, grads
