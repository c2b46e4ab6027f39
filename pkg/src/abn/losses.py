"""Training objective: weighted binary log-likelihood plus L2 regression.

The classification term re-weights positives and negatives by ``N / N+`` and
``N / N-`` so sparse boundary labels still carry gradient; the sign is chosen
so the returned value is a loss (non-negative, minimized).  Predictions are
clamped to ``[1e-7, 1 - 1e-7]`` before logs.  Masked-out cells contribute to
neither the loss nor the class counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ModelConfig
from .errors import DataError
from .supervision import SupervisionTargets

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossReport:
    """Composite loss breakdown for one video (or a batch mean)."""

    l_tam: float
    l_pam: float
    l_total: float
    counts: dict  # term -> (n_pos, n_neg), valid elements only


def _bll_core(pred: np.ndarray, target: np.ndarray, mask, class_balance: bool = True):
    """Shared loss+gradient kernel; returns (loss, dloss/dpred, n_pos, n_neg)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise DataError(f"mask shape {mask.shape} does not match {pred.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DataError("weighted_bll: mask selects no elements")
    pos = (target > 0.5) & mask
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    if class_balance and (n_pos == 0 or n_neg == 0):
        warnings.warn(
            "weighted_bll: single-class targets; clamping class count to 1",
            RuntimeWarning, stacklevel=3,
        )
    if class_balance:
        alpha_pos = n / max(n_pos, 1)
        alpha_neg = n / max(n_neg, 1)
    else:
        alpha_pos = alpha_neg = 1.0
    p = np.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = target
    per = alpha_pos * y * np.log(p) + alpha_neg * (1.0 - y) * np.log(1.0 - p)
    loss = -per[mask].sum() / n
    grad = np.zeros_like(p)
    inside = mask & (pred > CLAMP_EPS) & (pred < 1.0 - CLAMP_EPS)
    grad[inside] = -(alpha_pos * y[inside] / p[inside]
                     - alpha_neg * (1.0 - y[inside]) / (1.0 - p[inside])) / n
    return float(loss), grad, n_pos, n_neg


def weighted_bll(pred: np.ndarray, target: np.ndarray, mask=None,
                 class_balance: bool = True) -> float:
    """Class-balanced binary cross-entropy over the valid elements.

    With ``class_balance=False`` both class weights are 1 and this is exactly
    the plain binary cross-entropy mean.
    """
    loss, _, _, _ = _bll_core(pred, target, mask, class_balance)
    return loss


def _l2_core(pred: np.ndarray, target: np.ndarray, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DataError("l2_loss: mask selects no elements")
    diff = np.where(mask, pred - target, 0.0)
    loss = float((diff * diff).sum() / n)
    grad = 2.0 * diff / n
    return loss, grad


def l2_loss(pred: np.ndarray, target: np.ndarray, mask=None) -> float:
    """Mean squared error over the valid cells."""
    loss, _ = _l2_core(pred, target, mask)
    return loss


def total_loss(outputs, targets: SupervisionTargets, cfg: ModelConfig) -> LossReport:
    """Composite objective for one video's outputs against its targets."""
    report, _ = total_loss_with_grads(outputs, targets, cfg)
    return report


def total_loss_with_grads(outputs, targets: SupervisionTargets, cfg: ModelConfig):
    """Loss report plus gradients w.r.t. each of the four output heads.

    ``outputs`` may be a :class:`~abn.boundary.BoundaryOutputs` or any object
    with ``p_start``, ``p_end``, ``p_cc``, ``p_cr`` arrays.
    """
    mask = targets.valid_mask
    ls, gs, ps_pos, ps_neg = _bll_core(outputs.p_start, targets.l_start, None)
    le, ge, pe_pos, pe_neg = _bll_core(outputs.p_end, targets.l_end, None)
    lcc, gcc, cc_pos, cc_neg = _bll_core(outputs.p_cc, targets.l_dur_bin, mask)
    reg_target = targets.l_dur_bin if cfg.regress_binary else targets.g_iou
    lcr, gcr = _l2_core(outputs.p_cr, reg_target, mask)

    l_tam = ls + le
    l_pam = lcc + cfg.lambda_reg * lcr
    l_total = cfg.lambda1 * l_tam + cfg.lambda2 * l_pam
    report = LossReport(
        l_tam=float(l_tam), l_pam=float(l_pam), l_total=float(l_total),
        counts={
            "start": (ps_pos, ps_neg),
            "end": (pe_pos, pe_neg),
            "conf_cls": (cc_pos, cc_neg),
            "conf_reg": (int(mask.sum()), 0),
        },
    )
    grads = {
        "p_start": cfg.lambda1 * gs,
        "p_end": cfg.lambda1 * ge,
        "p_cc": cfg.lambda2 * gcc,
        "p_cr": cfg.lambda2 * cfg.lambda_reg * gcr,
    }
    return report, grads
