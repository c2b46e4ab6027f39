"""Agent/environment feature fusion via self-attention.

Per snippet, the ragged set of agent feature vectors is attention-pooled into
one agent-aware vector, which is then fused with the snippet's global
(environment) vector by attending over the unordered pair.  No positional
encodings are used anywhere, so both stages are permutation-invariant by
construction.

The attention core (:func:`attend`) is a bare multi-head self-attention:
``softmax(q K^T / sqrt(d)) V`` per head, heads concatenated, then an output
projection.  The trained model wraps it in a standard encoder block
(residual + layer norm + 2C feed-forward); both extras can be switched off
through :class:`~abn.data.ModelConfig` to recover the bare core.

Forward functions return ``(value, cache)`` pairs; the matching backward
functions consume the cache and accumulate parameter gradients into a flat
``name -> array`` dict.  Forward evaluation is pure given parameters.
"""

from __future__ import annotations

import numpy as np

from .data import FeatureBundle, ModelConfig
from .errors import DataError

LN_EPS = 1e-5

_AFFINE_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
_BLOCK_NAMES = ("ln1g", "ln1b", "fw1", "fb1", "fw2", "fb2", "ln2g", "ln2b")


def encoder_prefixes(cfg: ModelConfig) -> list[str]:
    pres = []
    if cfg.feature_mode in ("agent_env", "agent_only"):
        pres.append("agent_enc")
    if cfg.feature_mode == "agent_env":
        pres.append("pair_enc")
    return pres


def init_fusion_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded uniform(+-sqrt(1/fan_in)) init; layer-norm gains 1, biases 0."""
    C = cfg.C
    params: dict[str, np.ndarray] = {}

    def affine(fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        return w.astype(np.float32), b.astype(np.float32)

    for prefix in ("agent_enc", "pair_enc"):
        for layer in range(cfg.layers):
            p = f"{prefix}.l{layer}."
            for nm in ("wq", "wk", "wv", "wo"):
                params[p + nm], params[p + "b" + nm[1]] = affine(C, C)
            params[p + "ln1g"] = np.ones(C, dtype=np.float32)
            params[p + "ln1b"] = np.zeros(C, dtype=np.float32)
            params[p + "fw1"], params[p + "fb1"] = affine(C, 2 * C)
            params[p + "fw2"], params[p + "fb2"] = affine(2 * C, C)
            params[p + "ln2g"] = np.ones(C, dtype=np.float32)
            params[p + "ln2b"] = np.zeros(C, dtype=np.float32)
    params["no_agent"] = np.zeros(C, dtype=np.float32)
    return params


# ---------------------------------------------------------------------------
# primitive layers
# ---------------------------------------------------------------------------

def _affine_fwd(x, w, b):
    return x @ w + b


def _affine_bwd(dy, x, w, grads, wname, bname):
    lead = x.reshape(-1, x.shape[-1])
    dl = dy.reshape(-1, dy.shape[-1])
    grads[wname] = grads.get(wname, 0) + lead.T @ dl
    grads[bname] = grads.get(bname, 0) + dl.sum(axis=0)
    return dy @ w.T


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    iv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * iv
    return xhat * g + b, (xhat, iv)


def _ln_bwd(dy, cache, g, grads, gname, bname):
    xhat, iv = cache
    red = tuple(range(dy.ndim - 1))
    grads[gname] = grads.get(gname, 0) + (dy * xhat).sum(axis=red)
    grads[bname] = grads.get(bname, 0) + dy.sum(axis=red)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return iv * (dxhat - m1 - xhat * m2)


def _mha_fwd(x, p, prefix, heads):
    """Bare multi-head self-attention over sets ``x: (M, g, C)``."""
    M, g, C = x.shape
    d = C // heads
    q = _affine_fwd(x, p[prefix + "wq"], p[prefix + "bq"])
    k = _affine_fwd(x, p[prefix + "wk"], p[prefix + "bk"])
    v = _affine_fwd(x, p[prefix + "wv"], p[prefix + "bv"])
    q4 = q.reshape(M, g, heads, d)
    k4 = k.reshape(M, g, heads, d)
    v4 = v.reshape(M, g, heads, d)
    scale = 1.0 / float(np.sqrt(d))  # python float: keeps float32 inputs float32
    scores = np.einsum("mqhd,mkhd->mhqk", q4, k4) * scale
    att = _softmax(scores)
    ctx = np.einsum("mhqk,mkhd->mqhd", att, v4).reshape(M, g, C)
    out = _affine_fwd(ctx, p[prefix + "wo"], p[prefix + "bo"])
    cache = (x, q4, k4, v4, att, ctx, scale)
    return out, cache


def _mha_bwd(dout, cache, p, prefix, heads, grads):
    x, q4, k4, v4, att, ctx, scale = cache
    M, g, C = x.shape
    d = C // heads
    dctx = _affine_bwd(dout, ctx, p[prefix + "wo"], grads, prefix + "wo", prefix + "bo")
    dctx4 = dctx.reshape(M, g, heads, d)
    datt = np.einsum("mqhd,mkhd->mhqk", dctx4, v4)
    dv4 = np.einsum("mhqk,mqhd->mkhd", att, dctx4)
    dscore = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dq4 = np.einsum("mhqk,mkhd->mqhd", dscore, k4) * scale
    dk4 = np.einsum("mhqk,mqhd->mkhd", dscore, q4) * scale
    dx = _affine_bwd(dq4.reshape(M, g, C), x, p[prefix + "wq"], grads, prefix + "wq", prefix + "bq")
    dx = dx + _affine_bwd(dk4.reshape(M, g, C), x, p[prefix + "wk"], grads, prefix + "wk", prefix + "bk")
    dx = dx + _affine_bwd(dv4.reshape(M, g, C), x, p[prefix + "wv"], grads, prefix + "wv", prefix + "bv")
    return dx


def _encoder_fwd(x, p, prefix, cfg, frozen=None):
    """Encoder stack: per layer, attention plus the configured extras.

    ``frozen`` optionally pins each layer's FFN ReLU to a fixed on/off mask so
    gradient checks can probe the smooth branch selected at the base point.
    """
    caches = []
    h = x
    for layer in range(cfg.layers):
        lp = f"{prefix}.l{layer}."
        att, att_cache = _mha_fwd(h, p, lp, cfg.heads)
        if cfg.encoder_residual:
            r1 = h + att
            h1, ln1_cache = _ln_fwd(r1, p[lp + "ln1g"], p[lp + "ln1b"])
        else:
            h1, ln1_cache = att, None
        if cfg.encoder_ffn:
            z = _affine_fwd(h1, p[lp + "fw1"], p[lp + "fb1"])
            if frozen is not None:
                a = z * frozen[layer]
            else:
                a = np.maximum(z, 0.0)
            f = _affine_fwd(a, p[lp + "fw2"], p[lp + "fb2"])
            if cfg.encoder_residual:
                r2 = h1 + f
                out, ln2_cache = _ln_fwd(r2, p[lp + "ln2g"], p[lp + "ln2b"])
            else:
                out, ln2_cache = f, None
            ffn_cache = (h1, z, a)
        else:
            out, ln2_cache, ffn_cache = h1, None, None
        caches.append((att_cache, ln1_cache, ffn_cache, ln2_cache))
        h = out
    return h, caches


def _encoder_bwd(dout, caches, p, prefix, cfg, grads):
    dh = dout
    for layer in reversed(range(cfg.layers)):
        lp = f"{prefix}.l{layer}."
        att_cache, ln1_cache, ffn_cache, ln2_cache = caches[layer]
        if cfg.encoder_ffn:
            h1, z, a = ffn_cache
            if cfg.encoder_residual:
                dr2 = _ln_bwd(dh, ln2_cache, p[lp + "ln2g"], grads, lp + "ln2g", lp + "ln2b")
                dh1, df = dr2, dr2
            else:
                dh1, df = 0.0, dh
            da = _affine_bwd(df, a, p[lp + "fw2"], grads, lp + "fw2", lp + "fb2")
            dz = da * (z > 0)
            dh1 = dh1 + _affine_bwd(dz, h1, p[lp + "fw1"], grads, lp + "fw1", lp + "fb1")
        else:
            dh1 = dh
        if cfg.encoder_residual:
            dr1 = _ln_bwd(dh1, ln1_cache, p[lp + "ln1g"], grads, lp + "ln1g", lp + "ln1b")
            datt, dx_res = dr1, dr1
        else:
            datt, dx_res = dh1, 0.0
        dh = dx_res + _mha_bwd(datt, att_cache, p, lp, cfg.heads, grads)
    return dh


# ---------------------------------------------------------------------------
# public per-snippet operations
# ---------------------------------------------------------------------------

def attend(inputs: np.ndarray, params: dict, cfg: ModelConfig,
           which: str = "agent", layer: int = 0) -> np.ndarray:
    """Bare multi-head self-attention over a feature set ``(g, C)``.

    Every output row is a convex combination of value projections; with a
    single input row the output is exactly the value/output projection of it.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError(f"attend expects a (g, C) matrix with g >= 1, got {x.shape}")
    if x.shape[1] != cfg.C:
        raise DataError(f"attend: feature dim {x.shape[1]} != C={cfg.C}")
    out, _ = _mha_fwd(x[None], params, f"{which}_enc.l{layer}.", cfg.heads)
    return out[0]


def attention_weights(inputs: np.ndarray, params: dict, cfg: ModelConfig,
                      which: str = "agent", layer: int = 0) -> np.ndarray:
    """Per-head attention weight matrix ``(heads, g, g)`` for inspection/tests."""
    x = np.asarray(inputs, dtype=np.float64)
    _, cache = _mha_fwd(x[None], params, f"{which}_enc.l{layer}.", cfg.heads)
    return cache[4][0]


def pool_agents(agents: np.ndarray, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Pool a snippet's agent set ``(A_t, C)`` into one agent-aware vector.

    The set runs through the agent encoder stack and is mean-pooled over rows.
    An empty set returns the learned no-agent embedding itself (the stored
    parameter, not a copy).
    """
    agents = np.asarray(agents)
    if agents.size == 0:
        return params["no_agent"]
    if agents.ndim != 2 or agents.shape[1] != cfg.C:
        raise DataError(f"pool_agents expects (A_t, C={cfg.C}), got {agents.shape}")
    x = agents.astype(np.float64, copy=False)[None]
    y, _ = _encoder_fwd(x, params, "agent_enc", cfg)
    return y[0].mean(axis=0)


def fuse_snippet(phi_e: np.ndarray, phi_a: np.ndarray, params: dict,
                 cfg: ModelConfig) -> np.ndarray:
    """Fuse environment and agent-aware vectors by attending over the 2-set."""
    phi_e = np.asarray(phi_e, dtype=np.float64)
    phi_a = np.asarray(phi_a, dtype=np.float64)
    if phi_e.shape != (cfg.C,) or phi_a.shape != (cfg.C,):
        raise DataError(
            f"fuse_snippet expects two C={cfg.C} vectors, got {phi_e.shape}, {phi_a.shape}"
        )
    x = np.stack([phi_e, phi_a])[None]
    y, _ = _encoder_fwd(x, params, "pair_enc", cfg)
    return y[0].mean(axis=0)


def fuse_sequence(bundle: FeatureBundle, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Fused ``(T, C)`` representation of a bundle, snippet by snippet."""
    if bundle.C != cfg.C:
        raise DataError(f"{bundle.video_id}: bundle C={bundle.C} != config C={cfg.C}")
    f, _ = fuse_batch_forward(
        bundle.global_feats.astype(np.float64),
        list(bundle.agent_feats),
        params, cfg, dtype=np.float64,
    )
    return f


# ---------------------------------------------------------------------------
# batched training path (snippets bucketed by agent count)
# ---------------------------------------------------------------------------

def fuse_batch_forward(globals_flat: np.ndarray, agent_lists: list, params: dict,
                       cfg: ModelConfig, dtype=np.float64, frozen=None):
    """Fuse a flat batch of snippets ``(Btot, C)`` with per-snippet agent sets.

    Snippets are grouped by agent count so each group runs the encoder as one
    batched call; results are identical to the per-snippet path.
    """
    Btot, C = globals_flat.shape
    phi_e = np.ascontiguousarray(globals_flat, dtype=dtype)
    if cfg.feature_mode == "env_only":
        return phi_e.copy(), ("env_only", None, None, None)

    counts = np.array([a.shape[0] for a in agent_lists], dtype=np.int64)
    phi_a = np.empty((Btot, C), dtype=dtype)
    zero_idx = np.flatnonzero(counts == 0)
    if zero_idx.size:
        phi_a[zero_idx] = params["no_agent"].astype(dtype)
    buckets = []
    for a in np.unique(counts[counts > 0]):
        idx = np.flatnonzero(counts == a)
        x = np.stack([agent_lists[i] for i in idx]).astype(dtype)
        fz = frozen["agent"][int(a)] if frozen is not None else None
        y, caches = _encoder_fwd(x, params, "agent_enc", cfg, frozen=fz)
        phi_a[idx] = y.mean(axis=1)
        buckets.append((int(a), idx, caches))

    if cfg.feature_mode == "agent_only":
        return phi_a.copy(), ("agent_only", zero_idx, buckets, None)

    x2 = np.stack([phi_e, phi_a], axis=1)
    fz = frozen["pair"] if frozen is not None else None
    y2, pair_caches = _encoder_fwd(x2, params, "pair_enc", cfg, frozen=fz)
    fused = y2.mean(axis=1)
    return fused, ("agent_env", zero_idx, buckets, pair_caches)


def extract_ffn_masks(cache) -> dict | None:
    """Per-bucket FFN activation masks of a fusion forward, for branch-frozen
    re-evaluation.  ``None`` when the config has no FFN (or env_only mode)."""
    mode, _, buckets, pair_caches = cache
    if mode == "env_only":
        return None
    out = {"agent": {}, "pair": None}
    for a, _, caches in buckets:
        out["agent"][int(a)] = [
            (ffn[1] > 0) if ffn is not None else None
            for _, _, ffn, _ in caches
        ]
    if pair_caches is not None:
        out["pair"] = [
            (ffn[1] > 0) if ffn is not None else None
            for _, _, ffn, _ in pair_caches
        ]
    return out


def fuse_batch_backward(dfused: np.ndarray, cache, params: dict, cfg: ModelConfig,
                        grads: dict) -> None:
    """Accumulate fusion parameter gradients for a batch; inputs get none."""
    mode, zero_idx, buckets, pair_caches = cache
    if mode == "env_only":
        return
    if mode == "agent_env":
        dy2 = np.repeat(dfused[:, None, :] / 2.0, 2, axis=1)
        dx2 = _encoder_bwd(dy2, pair_caches, params, "pair_enc", cfg, grads)
        dphi_a = dx2[:, 1, :]
    else:
        dphi_a = dfused
    if zero_idx.size:
        g = dphi_a[zero_idx].sum(axis=0)
        grads["no_agent"] = grads.get("no_agent", 0) + g
    for a, idx, caches in buckets:
        dy = np.repeat(dphi_a[idx][:, None, :] / a, a, axis=1)
        _encoder_bwd(dy, caches, params, "agent_enc", cfg, grads)
