"""Vectorized numpy implementations of the hot kernels.

Reference semantics for the numba loop kernels; selected when
UNIPERT_BACKEND=numpy or numba is unavailable.
"""

import numpy as np


def forward_stack(patches, we, wq, wk, wv, wo):
    """Single-head softmax self-attention over patch embeddings for a stack
    of encoders sharing one input.

    patches: (L, P); weight stacks: we (t, P, d), the rest (t, d, d).
    Returns tokens (t, L, d), global means (t, d), key-attention (t, L).
    """
    d = we.shape[2]
    x = np.einsum("lp,tpd->tld", patches, we)
    q = np.einsum("tld,tde->tle", x, wq)
    k = np.einsum("tld,tde->tle", x, wk)
    v = np.einsum("tld,tde->tle", x, wv)
    scores = np.einsum("tle,tme->tlm", q, k) / np.sqrt(d)
    attn = _softmax_last(scores)
    mixed = x + np.einsum("tlm,tmd->tld", attn, v)
    tokens = np.einsum("tld,tde->tle", mixed, wo)
    glob = tokens.mean(axis=1)
    attn_keys = attn.mean(axis=1)
    return tokens, glob, attn_keys


def backward_stack(patches, we, wq, wk, wv, wo, grad_tokens, grad_global):
    """Exact vector-Jacobian product of forward_stack back to the patches.

    Cotangents: grad_tokens (t, L, d) against tokens, grad_global (t, d)
    against the global mean. Returns d(patches) (L, P) summed over the stack.
    """
    L = patches.shape[0]
    d = we.shape[2]
    x = np.einsum("lp,tpd->tld", patches, we)
    q = np.einsum("tld,tde->tle", x, wq)
    k = np.einsum("tld,tde->tle", x, wk)
    v = np.einsum("tld,tde->tle", x, wv)
    scores = np.einsum("tle,tme->tlm", q, k) / np.sqrt(d)
    attn = _softmax_last(scores)

    d_tokens = grad_tokens + grad_global[:, None, :] / L
    d_mixed = np.einsum("tle,tde->tld", d_tokens, wo)
    d_attn = np.einsum("tld,tmd->tlm", d_mixed, v)
    d_v = np.einsum("tlm,tld->tmd", attn, d_mixed)
    inner = np.sum(d_attn * attn, axis=2, keepdims=True)
    d_scores = attn * (d_attn - inner) / np.sqrt(d)
    d_q = np.einsum("tlm,tme->tle", d_scores, k)
    d_k = np.einsum("tlm,tle->tme", d_scores, q)
    d_x = d_mixed.copy()
    d_x += np.einsum("tle,tde->tld", d_q, wq)
    d_x += np.einsum("tle,tde->tld", d_k, wk)
    d_x += np.einsum("tle,tde->tld", d_v, wv)
    return np.einsum("tld,tpd->lp", d_x, we)


def sinkhorn_plans(sim, reg, iters):
    """Log-domain entropic OT plans with uniform marginals for a stack of
    similarity matrices.

    sim: (n, K, L); maximizes <plan, sim> - reg * neg-entropy. A final
    marginal-rounding pass makes row sums exactly 1/K and column sums 1/L;
    it moves at most the residual mass left by the alternating updates.
    """
    n, K, L = sim.shape
    m = sim / reg
    log_a = -np.log(K)
    log_b = -np.log(L)
    u = np.zeros((n, K))
    v = np.zeros((n, L))
    for _ in range(iters):
        u = log_a - _logsumexp(m + v[:, None, :], axis=2)
        v = log_b - _logsumexp(m + u[:, :, None], axis=1)
    raw = np.exp(m + u[:, :, None] + v[:, None, :])
    out = np.empty_like(raw)
    for s in range(n):
        out[s] = round_to_marginals(raw[s], 1.0 / K, 1.0 / L)
    return out


def round_to_marginals(plan, row_target, col_target):
    """Rescale rows then columns below their targets and spread the leftover
    mass rank-one, leaving both marginals exact and entries non-negative."""
    rows = plan.sum(axis=1)
    a = np.minimum(row_target / np.maximum(rows, 1e-300), 1.0)
    x = a[:, None] * plan
    cols = x.sum(axis=0)
    b = np.minimum(col_target / np.maximum(cols, 1e-300), 1.0)
    y = x * b[None, :]
    err_r = row_target - y.sum(axis=1)
    err_c = col_target - y.sum(axis=0)
    total = err_r.sum()
    if total > 1e-300:
        y = y + np.outer(err_r, err_c) / total
    return np.maximum(y, 0.0)


def bilinear_resize(img, y0, x0, h, w, out_h, out_w):
    """Bilinear crop-resize with half-pixel centers.

    Samples the (y0, x0, h, w) window of img at out_h x out_w half-pixel
    grid positions; edge samples clamp to the window. Identity when the
    window already has the output size.
    """
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    fy = np.floor(sy)
    fx = np.floor(sx)
    ty = sy - fy
    tx = sx - fx
    y_lo = np.clip(fy, 0, h - 1).astype(np.int64) + y0
    y_hi = np.clip(fy + 1, 0, h - 1).astype(np.int64) + y0
    x_lo = np.clip(fx, 0, w - 1).astype(np.int64) + x0
    x_hi = np.clip(fx + 1, 0, w - 1).astype(np.int64) + x0

    ty = ty[:, None, None]
    tx = tx[None, :, None]
    v00 = img[y_lo[:, None], x_lo[None, :]]
    v01 = img[y_lo[:, None], x_hi[None, :]]
    v10 = img[y_hi[:, None], x_lo[None, :]]
    v11 = img[y_hi[:, None], x_hi[None, :]]
    return (
        (1.0 - ty) * (1.0 - tx) * v00
        + (1.0 - ty) * tx * v01
        + ty * (1.0 - tx) * v10
        + ty * tx * v11
    )


def bilinear_resize_vjp(cotangent, y0, x0, h, w, full_h, full_w):
    """Transpose of bilinear_resize: scatter-add the cotangent back onto a
    zero (full_h, full_w, C) canvas."""
    out_h, out_w, channels = cotangent.shape
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    fy = np.floor(sy)
    fx = np.floor(sx)
    ty = sy - fy
    tx = sx - fx
    y_lo = np.clip(fy, 0, h - 1).astype(np.int64) + y0
    y_hi = np.clip(fy + 1, 0, h - 1).astype(np.int64) + y0
    x_lo = np.clip(fx, 0, w - 1).astype(np.int64) + x0
    x_hi = np.clip(fx + 1, 0, w - 1).astype(np.int64) + x0

    canvas = np.zeros((full_h, full_w, channels))
    wy = np.stack([1.0 - ty, ty])          # (2, out_h)
    wx = np.stack([1.0 - tx, tx])          # (2, out_w)
    ys = np.stack([y_lo, y_hi])
    xs = np.stack([x_lo, x_hi])
    for a in range(2):
        for b in range(2):
            weights = wy[a][:, None, None] * wx[b][None, :, None]
            np.add.at(canvas, (ys[a][:, None], xs[b][None, :]), weights * cotangent)
    return canvas


def align_cos(centers, tokens, floor):
    """Floored-denominator cosine matrices between target centers
    (t, nc, K, d) and source tokens (t, L, d).

    Returns (cos, norm-product, token-norms); the extra pieces feed the
    gradient kernel.
    """
    ncen = np.sqrt((centers * centers).sum(axis=3))
    ntok = np.sqrt((tokens * tokens).sum(axis=2))
    dots = np.einsum("tckd,tld->tckl", centers, tokens)
    prod = ncen[:, :, :, None] * ntok[:, None, None, :]
    cos = np.clip(dots / np.maximum(prod, floor), -1.0, 1.0)
    return cos, prod, ntok


def align_grads(cos, prod, ntok, plans, tokens, src_tokens, centers,
                adv_glob, tgt_glob, weights, gamma, sharpness,
                lambda_pre, lambda_coa, floor):
    """Per-encoder loss terms and exact cotangents on tokens/globals for the
    stop-gradient path (plans and gates held constant).

    Returns (tr_per, coa_per, gate_sum, d_tokens, d_glob).
    """
    t, nc, K, L = cos.shape
    rmax = cos.max(axis=2)
    gates = _stable_sigmoid((rmax - gamma) / sharpness)      # (t, nc, L)
    gated = np.einsum("tcl,tckl,tckl->tc", gates, cos, plans)

    keep_dots = (tokens * src_tokens).sum(axis=2)
    src_ntok = np.sqrt((src_tokens * src_tokens).sum(axis=2))
    keep_prod = ntok * src_ntok
    keep_cos = np.clip(keep_dots / np.maximum(keep_prod, floor), -1.0, 1.0)
    preserve = np.einsum("tcl,tl->tc", 1.0 - gates, keep_cos)
    tr_per = (gated + lambda_pre * preserve).mean(axis=1)

    gdots = np.einsum("tcd,td->tc", tgt_glob, adv_glob)
    gnorm = np.sqrt((adv_glob * adv_glob).sum(axis=1))
    gprod = np.sqrt((tgt_glob * tgt_glob).sum(axis=2)) * gnorm[:, None]
    gcos = np.clip(gdots / np.maximum(gprod, floor), -1.0, 1.0)
    coa_per = gcos.mean(axis=1)

    denom = np.maximum(prod, floor)
    dcos = (weights[:, None, None, None] / nc) * gates[:, :, None, :] * plans
    live = (prod > floor).astype(np.float64)
    d_tokens = np.einsum("tckl,tckd->tld", dcos / denom, centers)
    shrink = np.einsum("tckl->tl", dcos * cos * live)
    d_tokens -= (shrink / np.maximum(ntok, floor) ** 2)[:, :, None] * tokens

    dkeep = (weights[:, None] / nc * lambda_pre) * (1.0 - gates).sum(axis=1)
    keep_live = (keep_prod > floor).astype(np.float64)
    keep_denom = np.maximum(keep_prod, floor)
    d_tokens += dkeep[:, :, None] * (
        src_tokens / keep_denom[:, :, None]
        - (keep_cos * keep_live / np.maximum(ntok, floor) ** 2)[:, :, None] * tokens
    )

    glob_live = (gprod > floor).astype(np.float64)
    glob_denom = np.maximum(gprod, floor)
    coef = (weights[:, None] / nc) * lambda_coa
    d_glob = np.einsum("tc,tcd->td", coef / glob_denom, tgt_glob)
    d_glob -= ((coef * gcos * glob_live).sum(axis=1) / np.maximum(gnorm, floor) ** 2)[:, None] * adv_glob

    return tr_per, coa_per, float(gates.sum()), d_tokens, d_glob


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_last(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(arr, axis):
    mx = arr.max(axis=axis, keepdims=True)
    out = mx.squeeze(axis) + np.log(np.exp(arr - mx).sum(axis=axis))
    return out
