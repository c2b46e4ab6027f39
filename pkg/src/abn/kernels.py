"""Hot numeric kernels: proposal-feature sampling and Soft-NMS decay.

Each kernel has a numba build and a numpy/scipy fallback; see
:mod:`abn.backend` for how one is selected.  Explicit constructors
(``backend="numba"`` / ``backend="numpy"``) are available so the benchmark
and the parity tests can pit the two against each other regardless of the
environment flag.

Sampling layout
---------------
The matching step gathers, for every duration/start cell, ``N`` linearly
interpolated snippet features.  The sample table is flat over
``V = D * T * N`` entries ordered cell-major (row ``r``, column ``t``, then
sample ``k``); entry ``v`` blends snippet ``i0[v]`` with weight ``w0[v]`` and
snippet ``i1[v]`` with weight ``w1[v]``.  Invalid cells carry zero weights.

``matched = sample_forward(feats)`` maps ``(B, T, C) -> (B, D*T, N*C)`` and
``sample_backward`` is its exact adjoint.
"""

from __future__ import annotations

import numpy as np

from .backend import HAS_NUMBA, USE_NUMBA

if HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap


# ---------------------------------------------------------------------------
# proposal-feature sampling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _sample_fwd_nb(feats, i0, i1, w0, w1, out):
    B, T, C = feats.shape
    V = i0.shape[0]
    for b in range(B):
        for v in range(V):
            a = i0[v]
            c = i1[v]
            wa = w0[v]
            wc = w1[v]
            for ch in range(C):
                out[b, v, ch] = wa * feats[b, a, ch] + wc * feats[b, c, ch]
    return out


@njit(cache=True)
def _sample_bwd_nb(dmatched, i0, i1, w0, w1, dfeats):
    B, V, C = dmatched.shape
    for b in range(B):
        for v in range(V):
            a = i0[v]
            c = i1[v]
            wa = w0[v]
            wc = w1[v]
            for ch in range(C):
                g = dmatched[b, v, ch]
                dfeats[b, a, ch] += wa * g
                dfeats[b, c, ch] += wc * g
    return dfeats


class ProposalSampler:
    """Gather/scatter between snippet features and per-proposal sample stacks.

    Parameters are the flat sample table described in the module docstring.
    ``n_cells = D * T`` and ``n_samples = N`` fix the output reshape.
    """

    def __init__(self, i0, i1, w0, w1, T, n_cells, n_samples, backend=None):
        if backend is None:
            backend = "numba" if USE_NUMBA else "numpy"
        if backend == "numba" and not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        self.backend = backend
        self.T = int(T)
        self.n_cells = int(n_cells)
        self.n_samples = int(n_samples)
        self.i0 = np.ascontiguousarray(i0, dtype=np.int64)
        self.i1 = np.ascontiguousarray(i1, dtype=np.int64)
        self.w0 = np.ascontiguousarray(w0, dtype=np.float64)
        self.w1 = np.ascontiguousarray(w1, dtype=np.float64)
        self._w_cache = {}
        self._csr_cache = {}

    def _weights(self, dtype):
        dt = np.dtype(dtype)
        if dt not in self._w_cache:
            self._w_cache[dt] = (self.w0.astype(dt), self.w1.astype(dt))
        return self._w_cache[dt]

    def _csr(self, dtype):
        # (V, T) sparse blend matrix, two entries per valid sample row
        dt = np.dtype(dtype)
        if dt not in self._csr_cache:
            from scipy import sparse

            V = self.i0.shape[0]
            rows = np.repeat(np.arange(V, dtype=np.int64), 2)
            cols = np.stack([self.i0, self.i1], axis=1).ravel()
            vals = np.stack([self.w0, self.w1], axis=1).ravel().astype(dt)
            mat = sparse.csr_matrix((vals, (rows, cols)), shape=(V, self.T))
            self._csr_cache[dt] = mat
        return self._csr_cache[dt]

    def forward(self, feats: np.ndarray) -> np.ndarray:
        """``(B, T, C) -> (B, D*T, N*C)`` matched sample stacks."""
        B, T, C = feats.shape
        if T != self.T:
            raise ValueError(f"sampler built for T={self.T}, got {T}")
        V = self.i0.shape[0]
        if self.backend == "numba":
            w0, w1 = self._weights(feats.dtype)
            out = np.empty((B, V, C), dtype=feats.dtype)
            _sample_fwd_nb(feats, self.i0, self.i1, w0, w1, out)
        else:
            mat = self._csr(feats.dtype)
            out = np.empty((B, V, C), dtype=feats.dtype)
            for b in range(B):
                out[b] = mat @ feats[b]
        return out.reshape(B, self.n_cells, self.n_samples * C)

    def backward(self, dmatched: np.ndarray, C: int) -> np.ndarray:
        """Adjoint of :meth:`forward`: ``(B, D*T, N*C) -> (B, T, C)``."""
        B = dmatched.shape[0]
        V = self.i0.shape[0]
        g = dmatched.reshape(B, V, C)
        if self.backend == "numba":
            w0, w1 = self._weights(g.dtype)
            dfeats = np.zeros((B, self.T, C), dtype=g.dtype)
            _sample_bwd_nb(np.ascontiguousarray(g), self.i0, self.i1, w0, w1, dfeats)
        else:
            mat = self._csr(g.dtype)
            dfeats = np.empty((B, self.T, C), dtype=g.dtype)
            for b in range(B):
                dfeats[b] = mat.T @ g[b]
        return dfeats


# ---------------------------------------------------------------------------
# Soft-NMS score decay
# ---------------------------------------------------------------------------

@njit(cache=True)
def _soft_nms_nb(starts, ends, scores, sigma, floor, max_keep):
    n = scores.shape[0]
    current = scores.copy()
    alive = np.ones(n, dtype=np.bool_)
    order = np.empty(min(n, max_keep), dtype=np.int64)
    kept = np.empty(min(n, max_keep), dtype=np.float64)
    m = 0
    while m < order.shape[0]:
        best = -1
        best_s = -1.0
        for j in range(n):
            if alive[j] and current[j] > best_s:
                best = j
                best_s = current[j]
        if best < 0:
            break
        order[m] = best
        kept[m] = best_s
        alive[best] = False
        m += 1
        bs, be = starts[best], ends[best]
        blen = be - bs
        for j in range(n):
            if not alive[j]:
                continue
            inter = min(be, ends[j]) - max(bs, starts[j])
            if inter <= 0.0:
                continue
            union = blen + (ends[j] - starts[j]) - inter
            if union <= 0.0:
                continue
            iou = inter / union
            current[j] *= np.exp(-(iou * iou) / sigma)
            if current[j] < floor:
                alive[j] = False
    return order[:m], kept[:m]


def _soft_nms_np(starts, ends, scores, sigma, floor, max_keep):
    n = scores.shape[0]
    current = scores.copy()
    alive = np.ones(n, dtype=bool)
    order, kept = [], []
    lengths = ends - starts
    while len(order) < max_keep and alive.any():
        masked = np.where(alive, current, -np.inf)
        best = int(np.argmax(masked))
        order.append(best)
        kept.append(current[best])
        alive[best] = False
        inter = np.minimum(ends[best], ends) - np.maximum(starts[best], starts)
        union = lengths[best] + lengths - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where((inter > 0) & (union > 0), inter / union, 0.0)
        decay = np.where(alive & (iou > 0), np.exp(-(iou * iou) / sigma), 1.0)
        current = current * decay
        alive &= current >= floor
    return (np.asarray(order, dtype=np.int64),
            np.asarray(kept, dtype=np.float64))


def soft_nms_core(starts, ends, scores, sigma, floor, max_keep, backend=None):
    """Greedy Gaussian score decay.

    Returns ``(order, final_scores)``: indices of the surviving proposals in
    selection order (non-increasing final score) and their decayed scores.
    """
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    ends = np.ascontiguousarray(ends, dtype=np.float64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _soft_nms_nb(starts, ends, scores, float(sigma), float(floor), int(max_keep))
    return _soft_nms_np(starts, ends, scores, float(sigma), float(floor), int(max_keep))
