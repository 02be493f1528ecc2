"""Numba @njit loop implementations of the hot kernels.

Semantics match _kernels_numpy; agreement is asserted in tests. Imported
only when the numba backend is active, so a missing numba never breaks the
numpy path.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def forward_stack(patches, we, wq, wk, wv, wo):
    t = we.shape[0]
    L = patches.shape[0]
    d = we.shape[2]
    tokens = np.empty((t, L, d))
    glob = np.empty((t, d))
    attn_keys = np.empty((t, L))
    inv_sqrt_d = 1.0 / np.sqrt(d)
    for i in range(t):
        x = np.dot(patches, we[i])
        q = np.dot(x, wq[i])
        k = np.dot(x, wk[i])
        v = np.dot(x, wv[i])
        scores = np.dot(q, np.ascontiguousarray(k.T)) * inv_sqrt_d
        attn = _softmax_rows(scores)
        mixed = x + np.dot(attn, v)
        tok = np.dot(mixed, wo[i])
        tokens[i] = tok
        for e in range(d):
            s = 0.0
            for l in range(L):
                s += tok[l, e]
            glob[i, e] = s / L
        for m in range(L):
            s = 0.0
            for l in range(L):
                s += attn[l, m]
            attn_keys[i, m] = s / L
    return tokens, glob, attn_keys


@njit(cache=True)
def backward_stack(patches, we, wq, wk, wv, wo, grad_tokens, grad_global):
    t = we.shape[0]
    L = patches.shape[0]
    P = patches.shape[1]
    d = we.shape[2]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    d_patches = np.zeros((L, P))
    for i in range(t):
        x = np.dot(patches, we[i])
        q = np.dot(x, wq[i])
        k = np.dot(x, wk[i])
        v = np.dot(x, wv[i])
        scores = np.dot(q, np.ascontiguousarray(k.T)) * inv_sqrt_d
        attn = _softmax_rows(scores)

        d_tokens = grad_tokens[i] + grad_global[i] / L
        d_mixed = np.dot(d_tokens, np.ascontiguousarray(wo[i].T))
        d_attn = np.dot(d_mixed, np.ascontiguousarray(v.T))
        d_v = np.dot(np.ascontiguousarray(attn.T), d_mixed)
        d_scores = np.empty((L, L))
        for l in range(L):
            inner = 0.0
            for m in range(L):
                inner += d_attn[l, m] * attn[l, m]
            for m in range(L):
                d_scores[l, m] = attn[l, m] * (d_attn[l, m] - inner) * inv_sqrt_d
        d_q = np.dot(d_scores, k)
        d_k = np.dot(np.ascontiguousarray(d_scores.T), q)
        d_x = d_mixed
        d_x += np.dot(d_q, np.ascontiguousarray(wq[i].T))
        d_x += np.dot(d_k, np.ascontiguousarray(wk[i].T))
        d_x += np.dot(d_v, np.ascontiguousarray(wv[i].T))
        d_patches += np.dot(d_x, np.ascontiguousarray(we[i].T))
    return d_patches


@njit(cache=True)
def sinkhorn_plans(sim, reg, iters):
    n, K, L = sim.shape
    plans = np.empty((n, K, L))
    log_a = -np.log(K)
    log_b = -np.log(L)
    for s in range(n):
        m = sim[s] / reg
        u = np.zeros(K)
        v = np.zeros(L)
        for _ in range(iters):
            for kk in range(K):
                mx = m[kk, 0] + v[0]
                for l in range(1, L):
                    val = m[kk, l] + v[l]
                    if val > mx:
                        mx = val
                acc = 0.0
                for l in range(L):
                    acc += np.exp(m[kk, l] + v[l] - mx)
                u[kk] = log_a - (mx + np.log(acc))
            for l in range(L):
                mx = m[0, l] + u[0]
                for kk in range(1, K):
                    val = m[kk, l] + u[kk]
                    if val > mx:
                        mx = val
                acc = 0.0
                for kk in range(K):
                    acc += np.exp(m[kk, l] + u[kk] - mx)
                v[l] = log_b - (mx + np.log(acc))
        for kk in range(K):
            for l in range(L):
                plans[s, kk, l] = np.exp(m[kk, l] + u[kk] + v[l])
        _round_to_marginals(plans[s], 1.0 / K, 1.0 / L)
    return plans


@njit(cache=True)
def _round_to_marginals(plan, row_target, col_target):
    K, L = plan.shape
    for kk in range(K):
        row = 0.0
        for l in range(L):
            row += plan[kk, l]
        scale = min(row_target / max(row, 1e-300), 1.0)
        for l in range(L):
            plan[kk, l] *= scale
    for l in range(L):
        col = 0.0
        for kk in range(K):
            col += plan[kk, l]
        scale = min(col_target / max(col, 1e-300), 1.0)
        for kk in range(K):
            plan[kk, l] *= scale
    err_r = np.empty(K)
    err_c = np.empty(L)
    total = 0.0
    for kk in range(K):
        row = 0.0
        for l in range(L):
            row += plan[kk, l]
        err_r[kk] = row_target - row
        total += err_r[kk]
    for l in range(L):
        col = 0.0
        for kk in range(K):
            col += plan[kk, l]
        err_c[l] = col_target - col
    if total > 1e-300:
        for kk in range(K):
            for l in range(L):
                plan[kk, l] += err_r[kk] * err_c[l] / total
    for kk in range(K):
        for l in range(L):
            if plan[kk, l] < 0.0:
                plan[kk, l] = 0.0


@njit(cache=True)
def bilinear_resize(img, y0, x0, h, w, out_h, out_w):
    channels = img.shape[2]
    out = np.empty((out_h, out_w, channels))
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        fy = np.floor(sy)
        ty = sy - fy
        y_lo = int(min(max(fy, 0.0), h - 1)) + y0
        y_hi = int(min(max(fy + 1.0, 0.0), h - 1)) + y0
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            fx = np.floor(sx)
            tx = sx - fx
            x_lo = int(min(max(fx, 0.0), w - 1)) + x0
            x_hi = int(min(max(fx + 1.0, 0.0), w - 1)) + x0
            for c in range(channels):
                out[i, j, c] = (
                    (1.0 - ty) * (1.0 - tx) * img[y_lo, x_lo, c]
                    + (1.0 - ty) * tx * img[y_lo, x_hi, c]
                    + ty * (1.0 - tx) * img[y_hi, x_lo, c]
                    + ty * tx * img[y_hi, x_hi, c]
                )
    return out


@njit(cache=True)
def bilinear_resize_vjp(cotangent, y0, x0, h, w, full_h, full_w):
    out_h, out_w, channels = cotangent.shape
    canvas = np.zeros((full_h, full_w, channels))
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        fy = np.floor(sy)
        ty = sy - fy
        y_lo = int(min(max(fy, 0.0), h - 1)) + y0
        y_hi = int(min(max(fy + 1.0, 0.0), h - 1)) + y0
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            fx = np.floor(sx)
            tx = sx - fx
            x_lo = int(min(max(fx, 0.0), w - 1)) + x0
            x_hi = int(min(max(fx + 1.0, 0.0), w - 1)) + x0
            for c in range(channels):
                g = cotangent[i, j, c]
                canvas[y_lo, x_lo, c] += (1.0 - ty) * (1.0 - tx) * g
                canvas[y_lo, x_hi, c] += (1.0 - ty) * tx * g
                canvas[y_hi, x_lo, c] += ty * (1.0 - tx) * g
                canvas[y_hi, x_hi, c] += ty * tx * g
    return canvas


@njit(cache=True)
def align_cos(centers, tokens, floor):
    t, nc, K, d = centers.shape
    L = tokens.shape[1]
    cos = np.empty((t, nc, K, L))
    prod = np.empty((t, nc, K, L))
    ntok = np.empty((t, L))
    ncen = np.empty((t, nc, K))
    for i in range(t):
        for l in range(L):
            s = 0.0
            for e in range(d):
                s += tokens[i, l, e] * tokens[i, l, e]
            ntok[i, l] = np.sqrt(s)
        for c in range(nc):
            for k in range(K):
                s = 0.0
                for e in range(d):
                    s += centers[i, c, k, e] * centers[i, c, k, e]
                ncen[i, c, k] = np.sqrt(s)
        for c in range(nc):
            for k in range(K):
                for l in range(L):
                    dot = 0.0
                    for e in range(d):
                        dot += centers[i, c, k, e] * tokens[i, l, e]
                    p = ncen[i, c, k] * ntok[i, l]
                    prod[i, c, k, l] = p
                    den = p if p > floor else floor
                    v = dot / den
                    if v > 1.0:
                        v = 1.0
                    elif v < -1.0:
                        v = -1.0
                    cos[i, c, k, l] = v
    return cos, prod, ntok


@njit(cache=True)
def align_grads(cos, prod, ntok, plans, tokens, src_tokens, centers,
                adv_glob, tgt_glob, weights, gamma, sharpness,
                lambda_pre, lambda_coa, floor):
    t, nc, K, L = cos.shape
    d = tokens.shape[2]
    tr_per = np.zeros(t)
    coa_per = np.zeros(t)
    d_tokens = np.zeros((t, L, d))
    d_glob = np.zeros((t, d))
    gate_sum = 0.0

    for i in range(t):
        wi = weights[i] / nc
        # token-pair preservation cosines
        keep_cos = np.empty(L)
        keep_den = np.empty(L)
        keep_live = np.empty(L)
        for l in range(L):
            dot = 0.0
            s = 0.0
            for e in range(d):
                dot += tokens[i, l, e] * src_tokens[i, l, e]
                s += src_tokens[i, l, e] * src_tokens[i, l, e]
            p = ntok[i, l] * np.sqrt(s)
            keep_live[l] = 1.0 if p > floor else 0.0
            keep_den[l] = p if p > floor else floor
            v = dot / keep_den[l]
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            keep_cos[l] = v

        gate_coef = np.zeros(L)  # sum over crops of (1 - gate)
        for c in range(nc):
            gated = 0.0
            preserve = 0.0
            for l in range(L):
                r = cos[i, c, 0, l]
                for k in range(1, K):
                    if cos[i, c, k, l] > r:
                        r = cos[i, c, k, l]
                x = (r - gamma) / sharpness
                if x >= 0.0:
                    g = 1.0 / (1.0 + np.exp(-x))
                else:
                    ex = np.exp(x)
                    g = ex / (1.0 + ex)
                gate_sum += g
                gate_coef[l] += 1.0 - g
                preserve += (1.0 - g) * keep_cos[l]
                inv_nt2 = 1.0 / max(ntok[i, l], floor) ** 2
                for k in range(K):
                    dc = wi * g * plans[i, c, k, l]
                    gated += g * cos[i, c, k, l] * plans[i, c, k, l]
                    den = prod[i, c, k, l] if prod[i, c, k, l] > floor else floor
                    coef = dc / den
                    for e in range(d):
                        d_tokens[i, l, e] += coef * centers[i, c, k, e]
                    if prod[i, c, k, l] > floor:
                        shrink = dc * cos[i, c, k, l] * inv_nt2
                        for e in range(d):
                            d_tokens[i, l, e] -= shrink * tokens[i, l, e]
            tr_per[i] += (gated + lambda_pre * preserve) / nc

        # preservation gradient, gate held constant
        for l in range(L):
            dk = wi * lambda_pre * gate_coef[l]
            inv_nt2 = 1.0 / max(ntok[i, l], floor) ** 2
            for e in range(d):
                d_tokens[i, l, e] += dk * (
                    src_tokens[i, l, e] / keep_den[l]
                    - keep_live[l] * keep_cos[l] * inv_nt2 * tokens[i, l, e]
                )

        # coarse global term
        gn = 0.0
        for e in range(d):
            gn += adv_glob[i, e] * adv_glob[i, e]
        gn = np.sqrt(gn)
        coef_g = wi * lambda_coa
        for c in range(nc):
            dot = 0.0
            s = 0.0
            for e in range(d):
                dot += tgt_glob[i, c, e] * adv_glob[i, e]
                s += tgt_glob[i, c, e] * tgt_glob[i, c, e]
            p = np.sqrt(s) * gn
            den = p if p > floor else floor
            v = dot / den
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            coa_per[i] += v / nc
            inv_gn2 = 1.0 / max(gn, floor) ** 2
            for e in range(d):
                d_glob[i, e] += coef_g * tgt_glob[i, c, e] / den
                if p > floor:
                    d_glob[i, e] -= coef_g * v * inv_gn2 * adv_glob[i, e]
    return tr_per, coa_per, gate_sum, d_tokens, d_glob


@njit(cache=True)
def _softmax_rows(scores):
    L, M = scores.shape
    out = np.empty((L, M))
    for l in range(L):
        mx = scores[l, 0]
        for m in range(1, M):
            if scores[l, m] > mx:
                mx = scores[l, m]
        s = 0.0
        for m in range(M):
            out[l, m] = np.exp(scores[l, m] - mx)
            s += out[l, m]
        for m in range(M):
            out[l, m] /= s
    return out
