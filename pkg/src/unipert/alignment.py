"""Alignment losses and their exact gradient w.r.t. the perturbation.

Per (encoder, target-crop) pair the loss couples target cluster centers to
the tokens of the perturbed source crop through an entropic OT plan, gates
each token by its alignability, preserves suppressed tokens toward their
unperturbed features, and adds a coarse global-cosine term. Encoder terms
are combined with dynamically updated ensemble weights. Everything is a
similarity to MAXIMIZE.

The OT plan and the gate are treated as constants for gradient purposes
(stop-gradient); set grad_through_couplings to differentiate through both
(unrolled Sinkhorn, no default claim).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as encoder_mod
from . import kernels
from .errors import NonFiniteError, NonFiniteGradientError, ShapeMismatchError
from .sampler import crop_resize, crop_resize_vjp
from .tensorops import COSINE_FLOOR, as_tensor, check_finite

EMA_DECAY = 0.9
WEIGHT_TEMPERATURE = 0.5
GATE_OPEN = -1e6
GATE_CLOSED = 1e6


@dataclass(frozen=True)
class RoutingParams:
    """Gate threshold/temperature and the two loss mixing weights."""

    gamma: float = 0.0
    sharpness: float = 0.2
    lambda_pre: float = 0.05
    lambda_coa: float = 1.0

    def __post_init__(self):
        if self.sharpness <= 0:
            raise ValueError("sharpness must be > 0")
        if self.lambda_pre < 0 or self.lambda_coa < 0:
            raise ValueError("lambda weights must be >= 0")


@dataclass(frozen=True)
class AlignSettings:
    routing: RoutingParams = RoutingParams()
    sinkhorn_reg: float = 0.05
    sinkhorn_iters: int = 50
    grad_through_couplings: bool = False


@dataclass(frozen=True)
class EnsembleState:
    """Simplex weights per encoder plus the loss EMAs that drive them."""

    weights: np.ndarray
    ema_loss: np.ndarray

    @staticmethod
    def uniform(t: int) -> "EnsembleState":
        return EnsembleState(np.full(t, 1.0 / t), np.zeros(t))


def update_ensemble(state: EnsembleState, per_encoder_losses) -> EnsembleState:
    """EMA the losses, then softmax(-ema / T): encoders that are still
    poorly attacked (low similarity) get more weight."""
    losses = as_tensor(per_encoder_losses, rank=1)
    if losses.shape != state.ema_loss.shape:
        raise ShapeMismatchError("loss vector length != ensemble size")
    ema = EMA_DECAY * state.ema_loss + (1.0 - EMA_DECAY) * losses
    logits = -ema / WEIGHT_TEMPERATURE
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    check_finite(w, "ensemble weights")
    return EnsembleState(w, ema)


def sinkhorn_plan(sim, reg: float, iters: int) -> np.ndarray:
    """Entropic OT plan for one similarity matrix (rows sum to 1/K, columns
    to 1/L, total mass 1)."""
    sim = as_tensor(sim, rank=2)
    if reg <= 0 or iters < 1:
        raise ValueError("need reg > 0 and iters >= 1")
    plan = kernels.sinkhorn_plans(sim[None], reg, iters)[0]
    if not np.all(np.isfinite(plan)):
        raise NonFiniteError("transport plan overflowed")
    return plan


def _cos_matrix(centers, tokens):
    """cos(center_k, token_l) with floored denominators; returns the matrix
    plus the pieces its gradient needs."""
    dots = centers @ tokens.T
    ncen = np.linalg.norm(centers, axis=1)
    ntok = np.linalg.norm(tokens, axis=1)
    prod = np.outer(ncen, ntok)
    denom = np.maximum(prod, COSINE_FLOOR)
    cos = np.clip(dots / denom, -1.0, 1.0)
    return cos, denom, prod, ntok


def transport_alignment_loss(centers, adv_tokens, plan) -> float:
    """Sum of plan-weighted cosine similarities between target centers and
    perturbed-source tokens."""
    centers = as_tensor(centers, rank=2)
    adv_tokens = as_tensor(adv_tokens, rank=2)
    plan = as_tensor(plan, rank=2)
    if plan.shape != (centers.shape[0], adv_tokens.shape[0]):
        raise ShapeMismatchError(f"plan shape {plan.shape} mismatches K x L")
    cos, _, _, _ = _cos_matrix(centers, adv_tokens)
    return float((cos * plan).sum())


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def alignability_gate(adv_tokens, centers, params: RoutingParams):
    """Per-token alignability r (max cosine to any center) and the soft gate
    w = sigmoid((r - gamma) / sharpness)."""
    cos, _, _, _ = _cos_matrix(as_tensor(centers, rank=2), as_tensor(adv_tokens, rank=2))
    r = cos.max(axis=0)
    w = _sigmoid((r - params.gamma) / params.sharpness)
    return r, w


def routed_alignment_loss(centers, adv_tokens, src_tokens, plan, params: RoutingParams) -> float:
    """Gated transport alignment plus preservation of suppressed tokens
    toward their unperturbed features. The gate is a constant w.r.t. the
    optimization variable."""
    adv_tokens = as_tensor(adv_tokens, rank=2)
    src_tokens = as_tensor(src_tokens, rank=2)
    if adv_tokens.shape != src_tokens.shape:
        raise ShapeMismatchError("adv and source token shapes differ")
    centers = as_tensor(centers, rank=2)
    plan = as_tensor(plan, rank=2)
    cos, _, _, _ = _cos_matrix(centers, adv_tokens)
    _, w = alignability_gate(adv_tokens, centers, params)
    gated = float((w[None, :] * cos * plan).sum())
    keep = _token_pair_cos(adv_tokens, src_tokens)
    preserve = float(((1.0 - w) * keep).sum())
    return gated + params.lambda_pre * preserve


def _token_pair_cos(a, b):
    dots = (a * b).sum(axis=1)
    prod = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return np.clip(dots / np.maximum(prod, COSINE_FLOOR), -1.0, 1.0)


def global_alignment_loss(adv_global, target_globals) -> float:
    """Cosine between the perturbed global feature and each target-crop
    global, averaged over the crop set."""
    adv_global = as_tensor(adv_global, rank=1)
    target_globals = as_tensor(target_globals, rank=2)
    if target_globals.shape[1] != adv_global.shape[0]:
        raise ShapeMismatchError("global feature widths differ")
    dots = target_globals @ adv_global
    prod = np.linalg.norm(target_globals, axis=1) * np.linalg.norm(adv_global)
    cos = np.clip(dots / np.maximum(prod, COSINE_FLOOR), -1.0, 1.0)
    return float(cos.mean())


@dataclass(frozen=True)
class Couplings:
    """OT plans (t, nc, K, L) and gates (t, nc, L) frozen at one point."""

    plans: np.ndarray
    gates: np.ndarray


class _Pass:
    """Everything the loss and its gradient share for one evaluation."""

    __slots__ = (
        "adv_crop", "src_crop", "tokens", "src_tokens", "adv_globals",
        "cos", "denom", "prod", "ntok", "keep_cos", "keep_prod", "src_ntok",
        "plans", "gates", "rmax_idx", "glob_cos", "glob_prod", "glob_norm",
        "tr_per", "coa_per", "per_encoder", "total", "hist",
    )


def _run_pass(delta, source, src_spec, bank, encoders, state, settings, frozen=None):
    delta = as_tensor(delta, rank=3)
    source = as_tensor(source, rank=3)
    if delta.shape != source.shape:
        raise ShapeMismatchError("delta and source image shapes differ")
    dims = encoders[0].dims
    t = len(encoders)
    nc = bank.n_crops
    routing = settings.routing

    p = _Pass()
    adv = source + delta
    p.adv_crop = crop_resize(adv, src_spec, dims.height, dims.width)
    p.src_crop = crop_resize(source, src_spec, dims.height, dims.width)

    outs = [enc.forward(p.adv_crop) for enc in encoders]
    src_outs = [enc.forward(p.src_crop) for enc in encoders]
    p.tokens = np.stack([o.tokens for o in outs])            # (t, L, d)
    p.src_tokens = np.stack([o.tokens for o in src_outs])
    p.adv_globals = np.stack([o.global_feat for o in outs])  # (t, d)

    centers = bank.centers                                   # (t, nc, K, d)
    dots = np.einsum("tckd,tld->tckl", centers, p.tokens)
    ncen = np.linalg.norm(centers, axis=3)
    p.ntok = np.linalg.norm(p.tokens, axis=2)
    p.prod = ncen[:, :, :, None] * p.ntok[:, None, None, :]
    p.denom = np.maximum(p.prod, COSINE_FLOOR)
    p.cos = np.clip(dots / p.denom, -1.0, 1.0)               # (t, nc, K, L)

    if frozen is None:
        n_mats = t * nc
        K = centers.shape[2]
        L = p.tokens.shape[1]
        if settings.grad_through_couplings:
            plans, hist = _sinkhorn_with_history(
                p.cos.reshape(n_mats, K, L), settings.sinkhorn_reg, settings.sinkhorn_iters
            )
            p.hist = hist
        else:
            plans = kernels.sinkhorn_plans(
                np.ascontiguousarray(p.cos.reshape(n_mats, K, L)),
                settings.sinkhorn_reg, settings.sinkhorn_iters,
            )
            p.hist = None
        p.plans = plans.reshape(t, nc, K, L)
        rmax = p.cos.max(axis=2)                             # (t, nc, L)
        p.rmax_idx = p.cos.argmax(axis=2)
        p.gates = _sigmoid((rmax - routing.gamma) / routing.sharpness)
    else:
        p.plans = frozen.plans
        p.gates = frozen.gates
        p.rmax_idx = None
        p.hist = None

    gated = np.einsum("tcl,tckl,tckl->tc", p.gates, p.cos, p.plans)

    keep_dots = (p.tokens * p.src_tokens).sum(axis=2)        # (t, L)
    p.src_ntok = np.linalg.norm(p.src_tokens, axis=2)
    p.keep_prod = p.ntok * p.src_ntok
    p.keep_cos = np.clip(keep_dots / np.maximum(p.keep_prod, COSINE_FLOOR), -1.0, 1.0)
    preserve = np.einsum("tcl,tl->tc", 1.0 - p.gates, p.keep_cos)
    p.tr_per = (gated + routing.lambda_pre * preserve).mean(axis=1)   # (t,)

    tgt_globals = bank.global_feats                          # (t, nc, d)
    gdots = np.einsum("tcd,td->tc", tgt_globals, p.adv_globals)
    p.glob_norm = np.linalg.norm(p.adv_globals, axis=1)      # (t,)
    p.glob_prod = np.linalg.norm(tgt_globals, axis=2) * p.glob_norm[:, None]
    p.glob_cos = np.clip(gdots / np.maximum(p.glob_prod, COSINE_FLOOR), -1.0, 1.0)
    p.coa_per = p.glob_cos.mean(axis=1)                      # (t,)

    p.per_encoder = p.tr_per + routing.lambda_coa * p.coa_per
    p.total = float(state.weights @ p.per_encoder)
    return p


def compute_couplings(delta, source, src_spec, bank, encoders, state, settings) -> Couplings:
    p = _run_pass(delta, source, src_spec, bank, encoders, state, settings)
    return Couplings(plans=p.plans, gates=p.gates)


def loss_given_couplings(delta, source, src_spec, bank, encoders, state, settings,
                         couplings: Couplings) -> float:
    """Loss with the OT plans and gates held at the supplied values; the
    finite-difference oracle for the default stop-gradient mode."""
    p = _run_pass(delta, source, src_spec, bank, encoders, state, settings, frozen=couplings)
    return p.total


def total_loss_and_grad(delta, source, src_spec, bank, encoders, state, settings):
    """Loss of the perturbed source crop against the bank's target crops and
    its exact gradient w.r.t. the perturbation.

    Returns (loss, grad, diag) where diag carries the per-encoder terms for
    the loss trace.
    """
    stack = encoder_mod.as_stack(tuple(encoders))
    if stack is not None and not settings.grad_through_couplings:
        return _fast_total(delta, source, src_spec, bank, encoders, stack, state, settings)
    p = _run_pass(delta, source, src_spec, bank, encoders, state, settings)
    routing = settings.routing
    t, nc, K, L = p.cos.shape
    weights = state.weights
    crop_scale = weights[:, None] / nc                       # (t, 1) broadcast helper

    # d total / d cos, stop-gradient path
    dcos = (weights[:, None, None, None] / nc) * p.gates[:, :, None, :] * p.plans

    if settings.grad_through_couplings:
        dplan = (weights[:, None, None, None] / nc) * p.gates[:, :, None, :] * p.cos
        dsim = _sinkhorn_vjp(p.hist, dplan.reshape(t * nc, K, L)).reshape(t, nc, K, L)
        dcos = dcos + dsim
        dgate = (weights[:, None, None] / nc) * (
            np.einsum("tckl,tckl->tcl", p.cos, p.plans) - routing.lambda_pre * p.keep_cos[:, None, :]
        )
        dr = dgate * p.gates * (1.0 - p.gates) / routing.sharpness
        bump = np.zeros_like(dcos)
        np.put_along_axis(bump, p.rmax_idx[:, :, None, :], dr[:, :, None, :], axis=2)
        dcos = dcos + bump

    # chain d cos -> d tokens
    live = (p.prod > COSINE_FLOOR).astype(np.float64)
    d_tokens = np.einsum("tckl,tckd->tld", dcos / p.denom, bank.centers)
    shrink = np.einsum("tckl->tl", dcos * p.cos * live)
    d_tokens -= (shrink / np.maximum(p.ntok, COSINE_FLOOR) ** 2)[:, :, None] * p.tokens

    # preservation term
    dkeep = (crop_scale * routing.lambda_pre) * (1.0 - p.gates).sum(axis=1)  # (t, L)
    keep_live = (p.keep_prod > COSINE_FLOOR).astype(np.float64)
    keep_denom = np.maximum(p.keep_prod, COSINE_FLOOR)
    d_tokens += dkeep[:, :, None] * (
        p.src_tokens / keep_denom[:, :, None]
        - (p.keep_cos * keep_live / np.maximum(p.ntok, COSINE_FLOOR) ** 2)[:, :, None] * p.tokens
    )

    # coarse global term
    glob_live = (p.glob_prod > COSINE_FLOOR).astype(np.float64)
    glob_denom = np.maximum(p.glob_prod, COSINE_FLOOR)
    coef = crop_scale * routing.lambda_coa                    # (t, 1)
    d_glob = np.einsum("tc,tcd->td", coef / glob_denom, bank.global_feats)
    shrink_g = (coef * p.glob_cos * glob_live).sum(axis=1)    # (t,)
    d_glob -= (shrink_g / np.maximum(p.glob_norm, COSINE_FLOOR) ** 2)[:, None] * p.adv_globals

    crop_grad = np.zeros_like(p.adv_crop)
    for ei, enc in enumerate(encoders):
        crop_grad += enc.backward_to_input(p.adv_crop, d_tokens[ei], d_glob[ei])
    full = crop_resize_vjp(crop_grad, src_spec, delta.shape[0], delta.shape[1])

    if not np.all(np.isfinite(full)):
        raise NonFiniteGradientError("gradient contains NaN/Inf")
    diag = {
        "tr_per_encoder": p.tr_per,
        "coa_per_encoder": p.coa_per,
        "per_encoder": p.per_encoder,
        "gate_mean": float(p.gates.mean()),
        "weights": weights.copy(),
    }
    return p.total, full, diag


def _fast_total(delta, source, src_spec, bank, encoders, stack, state, settings):
    """Fused-kernel path for all-toy ensembles under stop-gradient; agrees
    with the generic pass to float noise (pinned by tests)."""
    delta = as_tensor(delta, rank=3)
    source = as_tensor(source, rank=3)
    if delta.shape != source.shape:
        raise ShapeMismatchError("delta and source image shapes differ")
    from .encoder import encode_patches, unpatchify

    dims = encoders[0].dims
    routing = settings.routing
    adv_crop = crop_resize(source + delta, src_spec, dims.height, dims.width)
    src_crop = crop_resize(source, src_spec, dims.height, dims.width)
    p_adv = encode_patches(adv_crop, dims.patch)
    p_src = encode_patches(src_crop, dims.patch)
    tokens, adv_glob, _ = kernels.forward_stack(p_adv, *stack)
    src_tokens, _, _ = kernels.forward_stack(p_src, *stack)

    cos, prod, ntok = kernels.align_cos(bank.centers, tokens, COSINE_FLOOR)
    t, nc, K, L = cos.shape
    plans = kernels.sinkhorn_plans(
        np.ascontiguousarray(cos.reshape(t * nc, K, L)),
        settings.sinkhorn_reg, settings.sinkhorn_iters,
    ).reshape(t, nc, K, L)
    tr_per, coa_per, gate_sum, d_tokens, d_glob = kernels.align_grads(
        cos, prod, ntok, plans, tokens, src_tokens, bank.centers,
        adv_glob, bank.global_feats, state.weights,
        routing.gamma, routing.sharpness, routing.lambda_pre, routing.lambda_coa,
        COSINE_FLOOR,
    )
    per_encoder = tr_per + routing.lambda_coa * coa_per
    total = float(state.weights @ per_encoder)

    d_patches = kernels.backward_stack(p_adv, *stack, d_tokens, d_glob)
    crop_grad = unpatchify(d_patches, dims.patch, dims.height, dims.width, dims.channels)
    full = crop_resize_vjp(crop_grad, src_spec, delta.shape[0], delta.shape[1])
    if not np.all(np.isfinite(full)):
        raise NonFiniteGradientError("gradient contains NaN/Inf")
    diag = {
        "tr_per_encoder": tr_per,
        "coa_per_encoder": coa_per,
        "per_encoder": per_encoder,
        "gate_mean": gate_sum / (t * nc * L),
        "weights": state.weights.copy(),
    }
    return total, full, diag


# Unrolled Sinkhorn with history (flagged gradient path only; numpy).

def _sinkhorn_with_history(sim, reg, iters):
    n, K, L = sim.shape
    m = sim / reg
    log_a = -np.log(K)
    log_b = -np.log(L)
    us = np.zeros((n, iters, K))
    vs = np.zeros((n, iters, L))
    u = np.zeros((n, K))
    v = np.zeros((n, L))
    for i in range(iters):
        u = log_a - _lse(m + v[:, None, :], axis=2)
        us[:, i] = u
        v = log_b - _lse(m + u[:, :, None], axis=1)
        vs[:, i] = v
    raw = np.exp(m + u[:, :, None] + v[:, None, :])
    rounded = np.empty_like(raw)
    round_ctx = []
    for s in range(n):
        rounded[s], ctx = _round_with_ctx(raw[s], 1.0 / K, 1.0 / L)
        round_ctx.append(ctx)
    hist = {"m": m, "us": us, "vs": vs, "raw": raw, "reg": reg, "iters": iters,
            "round_ctx": round_ctx}
    return rounded, hist


def _round_with_ctx(plan, rt, ct):
    rows = plan.sum(axis=1)
    a = np.minimum(rt / np.maximum(rows, 1e-300), 1.0)
    x = a[:, None] * plan
    cols = x.sum(axis=0)
    b = np.minimum(ct / np.maximum(cols, 1e-300), 1.0)
    y = x * b[None, :]
    err_r = rt - y.sum(axis=1)
    err_c = ct - y.sum(axis=0)
    total = float(err_r.sum())
    out = y + (np.outer(err_r, err_c) / total if total > 1e-300 else 0.0)
    neg = out < 0.0
    out = np.maximum(out, 0.0)
    ctx = (plan, rows, a, x, cols, b, y, err_r, err_c, total, rt, ct, neg)
    return out, ctx


def _round_vjp(d_out, ctx):
    plan, rows, a, x, cols, b, y, err_r, err_c, total, rt, ct, neg = ctx
    d_out = np.where(neg, 0.0, d_out)
    d_y = d_out.copy()
    if total > 1e-300:
        d_err_r = d_out @ err_c / total
        d_err_c = err_r @ d_out / total
        s = float(err_r @ d_out @ err_c)
        d_err_r -= s / total**2  # dE/derr_r_i = 1 for every i
        d_y -= d_err_r[:, None]
        d_y -= d_err_c[None, :]
    d_x = d_y * b[None, :]
    d_b = (d_y * x).sum(axis=0)
    active_b = ct / np.maximum(cols, 1e-300) < 1.0
    d_cols = np.where(active_b, -d_b * ct / np.maximum(cols, 1e-300) ** 2, 0.0)
    d_x += d_cols[None, :]
    d_plan = d_x * a[:, None]
    d_a = (d_x * plan).sum(axis=1)
    active_a = rt / np.maximum(rows, 1e-300) < 1.0
    d_rows = np.where(active_a, -d_a * rt / np.maximum(rows, 1e-300) ** 2, 0.0)
    d_plan += d_rows[:, None]
    return d_plan


def _sinkhorn_vjp(hist, d_plan):
    m = hist["m"]
    us, vs, raw = hist["us"], hist["vs"], hist["raw"]
    n, K, L = raw.shape
    iters = hist["iters"]
    d_m = np.zeros_like(m)
    d_u = np.zeros((n, K))
    d_v = np.zeros((n, L))
    for s in range(n):
        d_raw = _round_vjp(d_plan[s], hist["round_ctx"][s])
        g = d_raw * raw[s]
        d_m[s] += g
        d_u[s] += g.sum(axis=1)
        d_v[s] += g.sum(axis=0)
    for i in range(iters - 1, -1, -1):
        # v_i = log_b - LSE_k(m + u_i)
        q = _softmax_axis(m + us[:, i, :, None], axis=1)
        d_m -= q * d_v[:, None, :]
        d_u -= np.einsum("nkl,nl->nk", q, d_v)
        # u_i = log_a - LSE_l(m + v_{i-1})
        v_prev = vs[:, i - 1] if i > 0 else np.zeros_like(vs[:, 0])
        pmat = _softmax_axis(m + v_prev[:, None, :], axis=2)
        d_m -= pmat * d_u[:, :, None]
        d_v = -np.einsum("nkl,nk->nl", pmat, d_u)
        d_u = np.zeros_like(d_u)
    return d_m / hist["reg"]


def _lse(arr, axis):
    mx = arr.max(axis=axis, keepdims=True)
    return mx.squeeze(axis) + np.log(np.exp(arr - mx).sum(axis=axis))


def _softmax_axis(arr, axis):
    mx = arr.max(axis=axis, keepdims=True)
    e = np.exp(arr - mx)
    return e / e.sum(axis=axis, keepdims=True)
