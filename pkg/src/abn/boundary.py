"""Boundary generation network.

Three stages over a fused ``(T, C)`` snippet sequence:

* base module -- three same-padded 1-D convolutions (256, 128, 256 filters,
  kernel 3, stride 1, ReLU).  The 128-filter output ``O2`` feeds the
  confidence head, the final 256-filter output ``O3`` feeds the boundary head;
* boundary head (TAM) -- one 1-D convolution (2 filters, kernel 3, sigmoid)
  giving per-snippet start/end probabilities ``P_S``, ``P_E``;
* confidence head (PAM) -- a matching layer samples ``N`` interpolated
  snippet features per duration/start cell, a (128*N -> 512) contraction
  collapses the sample axis, then 1x1 / 3x3 / 1x1 2-D convolutions end in two
  sigmoid maps ``P_cc``, ``P_cr`` of shape ``(D, T)``.

Cell convention: row ``r`` holds duration ``d = r + 1``; cell ``(r, t)``
scores the interval ``[t, t + d]`` and is valid iff ``t + d <= T``.

Everything is expressed as matmuls over im2col-style column matrices so the
batched forward/backward pair stays BLAS-bound; the sampling gather/scatter
is the numba-or-numpy kernel from :mod:`abn.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ModelConfig
from .errors import DataError
from .kernels import ProposalSampler

BASE_WIDTHS = (256, 128, 256)
SAMPLE_FILTERS = 512
CONF_WIDTH = 128


@dataclass(frozen=True)
class BoundaryOutputs:
    """Per-video network outputs: boundary probabilities and confidence maps."""

    p_start: np.ndarray   # (T,) in [0, 1]
    p_end: np.ndarray     # (T,)
    p_cc: np.ndarray      # (D, T) classification-trained confidence
    p_cr: np.ndarray      # (D, T) regression-trained confidence
    valid_mask: np.ndarray  # (D, T) bool, True iff t + d <= T

    @property
    def T(self) -> int:
        return self.p_start.shape[0]

    @property
    def D(self) -> int:
        return self.p_cc.shape[0]


def valid_cell_mask(T: int, D: int) -> np.ndarray:
    """(D, T) validity: row r, column t is a real proposal iff t + r + 1 <= T."""
    d = np.arange(1, D + 1)[:, None]
    t = np.arange(T)[None, :]
    return (t + d) <= T


# ---------------------------------------------------------------------------
# sampling mask
# ---------------------------------------------------------------------------

def _sample_positions(T: int, D: int, n_samples: int, rho_ext: float):
    """Continuous sample positions, (D, T, N), plus the validity mask."""
    d = np.arange(1, D + 1, dtype=np.float64)[:, None, None]
    t = np.arange(T, dtype=np.float64)[None, :, None]
    k = np.arange(n_samples, dtype=np.float64)[None, None, :]
    step = d * (1.0 + 2.0 * rho_ext) / (n_samples - 1)
    pos = (t - rho_ext * d) + k * step
    return pos, valid_cell_mask(T, D)


def build_sample_table(T: int, D: int, n_samples: int, rho_ext: float):
    """Flat interpolation table: for each (cell, sample), two snippet indices
    and blend weights.  Invalid cells carry zero weights."""
    if n_samples < 2:
        raise DataError(f"n_samples must be >= 2, got {n_samples}")
    pos, valid = _sample_positions(T, D, n_samples, rho_ext)
    base = np.floor(pos)
    frac = pos - base
    i0 = np.clip(base.astype(np.int64), 0, T - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, T - 1)
    w0 = 1.0 - frac
    w1 = frac.copy()
    w0[~valid] = 0.0
    w1[~valid] = 0.0
    i0[~valid] = 0
    i1[~valid] = 0
    return i0.ravel(), i1.ravel(), w0.ravel(), w1.ravel(), valid


def build_sampling_mask(T: int, D: int, n_samples: int, rho_ext: float = 0.25) -> np.ndarray:
    """Dense sampling-weight tensor ``W: (T, n_samples, D, T)``.

    ``W[tau, k, r, t]`` is the weight of snippet ``tau`` in sample ``k`` of
    cell ``(r, t)``.  Dense storage is quartic in size -- meant for contracts
    and small oracles; the forward path uses the flat table instead.
    """
    i0, i1, w0, w1, _ = build_sample_table(T, D, n_samples, rho_ext)
    W = np.zeros((T, n_samples, D, T), dtype=np.float64)
    # flat entry v enumerates (r, t, k) row-major
    r, t, k = np.unravel_index(np.arange(i0.shape[0]), (D, T, n_samples))
    np.add.at(W, (i0, k, r, t), w0)
    np.add.at(W, (i1, k, r, t), w1)
    return W


def make_sampler(cfg: ModelConfig, T: int | None = None, backend=None) -> ProposalSampler:
    T = cfg.T if T is None else T
    i0, i1, w0, w1, _ = build_sample_table(T, cfg.D, cfg.n_samples, cfg.rho_ext)
    return ProposalSampler(i0, i1, w0, w1, T, cfg.D * T, cfg.n_samples, backend=backend)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_boundary_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}

    def conv(name, fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        params[name + ".w"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)
        params[name + ".b"] = rng.uniform(-bound, bound, (fan_out,)).astype(np.float32)

    w1, w2, w3 = BASE_WIDTHS
    conv("base.c1", 3 * cfg.C, w1)
    conv("base.c2", 3 * w1, w2)
    conv("base.c3", 3 * w2, w3)
    conv("tam", 3 * w3, 2)
    conv("pam.sample", cfg.n_samples * w2, SAMPLE_FILTERS)
    conv("pam.c1", SAMPLE_FILTERS, CONF_WIDTH)
    conv("pam.c2", 9 * CONF_WIDTH, CONF_WIDTH)
    conv("pam.c3", CONF_WIDTH, 2)
    return params


# ---------------------------------------------------------------------------
# conv primitives (channels-last, im2col + matmul)
# ---------------------------------------------------------------------------

def _im2col_1d(x):
    """(B, T, C) -> (B, T, 3C) with taps ordered [t-1, t, t+1], zero padded."""
    B, T, C = x.shape
    xp = np.zeros((B, T + 2, C), dtype=x.dtype)
    xp[:, 1:T + 1] = x
    return np.concatenate([xp[:, 0:T], xp[:, 1:T + 1], xp[:, 2:T + 2]], axis=2)


def _im2col_1d_adj(dcols, T, C):
    B = dcols.shape[0]
    dxp = np.zeros((B, T + 2, C), dtype=dcols.dtype)
    for i in range(3):
        dxp[:, i:i + T] += dcols[:, :, i * C:(i + 1) * C]
    return dxp[:, 1:T + 1]


def _im2col_2d(x):
    """(B, D, T, C) -> (B, D, T, 9C), 3x3 neighborhood row-major, zero padded."""
    B, D, T, C = x.shape
    xp = np.zeros((B, D + 2, T + 2, C), dtype=x.dtype)
    xp[:, 1:D + 1, 1:T + 1] = x
    blocks = [xp[:, dy:dy + D, dx:dx + T] for dy in range(3) for dx in range(3)]
    return np.concatenate(blocks, axis=3)


def _im2col_2d_adj(dcols, D, T, C):
    B = dcols.shape[0]
    dxp = np.zeros((B, D + 2, T + 2, C), dtype=dcols.dtype)
    q = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + D, dx:dx + T] += dcols[..., q * C:(q + 1) * C]
            q += 1
    return dxp[:, 1:D + 1, 1:T + 1]


def _matmul_bwd(dy, cols, w, grads, wname, bname):
    flat_x = cols.reshape(-1, cols.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    grads[wname] = grads.get(wname, 0) + flat_x.T @ flat_dy
    grads[bname] = grads.get(bname, 0) + flat_dy.sum(axis=0)
    return dy @ w.T


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _relu(z, masks, key):
    if masks is not None:
        return z * masks[key]
    return np.maximum(z, 0.0)


def _base_fwd(params, F, masks=None):
    cols1 = _im2col_1d(F)
    a1 = _relu(cols1 @ params["base.c1.w"] + params["base.c1.b"], masks, "a1")
    cols2 = _im2col_1d(a1)
    o2 = _relu(cols2 @ params["base.c2.w"] + params["base.c2.b"], masks, "o2")
    cols3 = _im2col_1d(o2)
    o3 = _relu(cols3 @ params["base.c3.w"] + params["base.c3.b"], masks, "o3")
    return o2, o3, (cols1, a1, cols2, cols3)


def _tam_fwd(params, o3):
    cols = _im2col_1d(o3)
    probs = _sigmoid(cols @ params["tam.w"] + params["tam.b"])
    return probs, cols


def _pam_fwd(params, o2, sampler, D, masks=None):
    B, T, C2 = o2.shape
    matched = sampler.forward(np.ascontiguousarray(o2))        # (B, D*T, N*C2)
    s = _relu(matched @ params["pam.sample.w"] + params["pam.sample.b"], masks, "s")
    h1 = _relu(s @ params["pam.c1.w"] + params["pam.c1.b"], masks, "h1")
    grid = h1.reshape(B, D, T, CONF_WIDTH)
    cols2 = _im2col_2d(grid)
    h2 = _relu(cols2.reshape(B, D * T, -1) @ params["pam.c2.w"] + params["pam.c2.b"],
               masks, "h2")
    maps = _sigmoid(h2 @ params["pam.c3.w"] + params["pam.c3.b"])  # (B, D*T, 2)
    cache = (matched, s, h1, cols2, h2, maps)
    return maps.reshape(B, D, T, 2), cache


def extract_relu_masks(cache) -> dict:
    """Activation masks of a boundary forward, for branch-frozen re-evaluation."""
    _, base_cache, o2, o3, _, _, pam_cache, _, _ = cache
    _, a1, _, _ = base_cache
    _, s, h1, _, h2, _ = pam_cache
    return {"a1": a1 > 0, "o2": o2 > 0, "o3": o3 > 0,
            "s": s > 0, "h1": h1 > 0, "h2": h2 > 0}


def boundary_forward(params: dict, F: np.ndarray, sampler: ProposalSampler,
                     cfg: ModelConfig, relu_masks=None):
    """Batched forward pass: ``F (B, T, C)`` to all four output heads."""
    B, T, C = F.shape
    if T < 3:
        raise DataError(f"temporal length {T} too small for kernel size 3")
    o2, o3, base_cache = _base_fwd(params, F, masks=relu_masks)
    tam, tam_cols = _tam_fwd(params, o3)
    maps, pam_cache = _pam_fwd(params, o2, sampler, cfg.D, masks=relu_masks)
    out = {
        "p_start": tam[:, :, 0],
        "p_end": tam[:, :, 1],
        "p_cc": maps[:, :, :, 0],
        "p_cr": maps[:, :, :, 1],
    }
    cache = (F, base_cache, o2, o3, tam, tam_cols, pam_cache, sampler, cfg.D)
    return out, cache


def boundary_backward(douts: dict, cache, params: dict, grads: dict) -> np.ndarray:
    """Backward through the network; returns gradient w.r.t. the fused input."""
    F, base_cache, o2, o3, tam, tam_cols, pam_cache, sampler, D = cache
    cols1, a1, cols2, cols3 = base_cache
    matched, s, h1, cols2d, h2, maps = pam_cache
    B, T, C = F.shape
    C2 = BASE_WIDTHS[1]

    # confidence head
    dmaps = np.stack([douts["p_cc"], douts["p_cr"]], axis=-1).reshape(B, D * T, 2)
    dz = dmaps * maps * (1.0 - maps)
    dh2 = _matmul_bwd(dz, h2, params["pam.c3.w"], grads, "pam.c3.w", "pam.c3.b")
    dh2 *= h2 > 0
    dcols2d = _matmul_bwd(dh2, cols2d.reshape(B, D * T, -1), params["pam.c2.w"],
                          grads, "pam.c2.w", "pam.c2.b")
    dgrid = _im2col_2d_adj(dcols2d.reshape(B, D, T, 9 * CONF_WIDTH), D, T, CONF_WIDTH)
    dh1 = dgrid.reshape(B, D * T, CONF_WIDTH)
    dh1 = dh1 * (h1 > 0)
    ds = _matmul_bwd(dh1, s, params["pam.c1.w"], grads, "pam.c1.w", "pam.c1.b")
    ds *= s > 0
    dmatched = _matmul_bwd(ds, matched, params["pam.sample.w"], grads,
                           "pam.sample.w", "pam.sample.b")
    do2 = sampler.backward(dmatched, C2)

    # boundary head
    dtam = np.stack([douts["p_start"], douts["p_end"]], axis=-1)
    dz = dtam * tam * (1.0 - tam)
    dcols = _matmul_bwd(dz, tam_cols, params["tam.w"], grads, "tam.w", "tam.b")
    do3 = _im2col_1d_adj(dcols, T, BASE_WIDTHS[2])

    # base module
    do3 *= o3 > 0
    dcols3 = _matmul_bwd(do3, cols3, params["base.c3.w"], grads, "base.c3.w", "base.c3.b")
    do2 = do2 + _im2col_1d_adj(dcols3, T, C2)
    do2 *= o2 > 0
    dcols2 = _matmul_bwd(do2, cols2, params["base.c2.w"], grads, "base.c2.w", "base.c2.b")
    da1 = _im2col_1d_adj(dcols2, T, BASE_WIDTHS[0])
    da1 *= a1 > 0
    dcols1 = _matmul_bwd(da1, cols1, params["base.c1.w"], grads, "base.c1.w", "base.c1.b")
    return _im2col_1d_adj(dcols1, T, C)


# ---------------------------------------------------------------------------
# public single-video operations
# ---------------------------------------------------------------------------

def base_forward(F: np.ndarray, params: dict) -> tuple[np.ndarray, np.ndarray]:
    """(T, C) -> (O2: (T, 128), O3: (T, 256)); temporal length preserved."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 3:
        raise DataError(f"base_forward expects (T>=3, C), got {F.shape}")
    o2, o3, _ = _base_fwd(params, F[None])
    return o2[0], o3[0]


def tam_forward(O3: np.ndarray, params: dict) -> tuple[np.ndarray, np.ndarray]:
    """(T, 256) -> start/end probability vectors, each (T,), strictly in (0, 1)."""
    probs, _ = _tam_fwd(params, np.asarray(O3, dtype=np.float64)[None])
    return probs[0, :, 0], probs[0, :, 1]


def pam_forward(O2: np.ndarray, W, params: dict, cfg: ModelConfig):
    """Confidence maps from the 128-channel base output of one video.

    ``W`` is either a :class:`~abn.kernels.ProposalSampler` (fast path) or the
    dense ``(T, N, D, T)`` tensor from :func:`build_sampling_mask` (reference
    path); both produce identical map layouts.
    Returns ``(P_cc, P_cr, valid_mask)`` with maps of shape ``(D, T)``.
    """
    O2 = np.asarray(O2, dtype=np.float64)
    T = O2.shape[0]
    if isinstance(W, ProposalSampler):
        if W.T != T:
            raise DataError(f"sampler built for T={W.T}, input has T={T}")
        maps, _ = _pam_fwd(params, O2[None], W, cfg.D)
    else:
        W = np.asarray(W)
        if W.shape != (T, cfg.n_samples, cfg.D, T):
            raise DataError(
                f"dense mask shape {W.shape} inconsistent with "
                f"(T={T}, N={cfg.n_samples}, D={cfg.D})"
            )
        matched = matched_features(O2, W)
        fake = _DenseSampler(matched[None])
        maps, _ = _pam_fwd(params, O2[None], fake, cfg.D)
    return maps[0, :, :, 0], maps[0, :, :, 1], valid_cell_mask(T, cfg.D)


def matched_features(O2: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Reference matching layer: contract ``(T, C2)`` features with the dense
    mask into ``(D*T, N*C2)`` sample stacks (linear in ``O2``)."""
    T, C2 = O2.shape
    Tw, N, D, T2 = W.shape
    out = np.einsum("Tc,Tkrt->rtkc", np.asarray(O2, dtype=np.float64), W)
    return out.reshape(D * T2, N * C2)


class _DenseSampler:
    """Adapter feeding precomputed matched features through the PAM stack."""

    def __init__(self, matched):
        self._matched = matched

    def forward(self, feats):
        return self._matched
