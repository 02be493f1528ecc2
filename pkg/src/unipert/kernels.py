"""Backend-dispatched hot kernels.

Every call consults backend.active(), so tests and benchmarks can flip
implementations mid-process via backend.use().
"""

from . import backend


def _impl():
    if backend.active() == "numba":
        from . import _kernels_numba as mod
    else:
        from . import _kernels_numpy as mod
    return mod


def forward_stack(patches, we, wq, wk, wv, wo):
    return _impl().forward_stack(patches, we, wq, wk, wv, wo)


def backward_stack(patches, we, wq, wk, wv, wo, grad_tokens, grad_global):
    return _impl().backward_stack(patches, we, wq, wk, wv, wo, grad_tokens, grad_global)


def sinkhorn_plans(sim, reg, iters):
    return _impl().sinkhorn_plans(sim, reg, iters)


def bilinear_resize(img, y0, x0, h, w, out_h, out_w):
    return _impl().bilinear_resize(img, y0, x0, h, w, out_h, out_w)


def bilinear_resize_vjp(cotangent, y0, x0, h, w, full_h, full_w):
    return _impl().bilinear_resize_vjp(cotangent, y0, x0, h, w, full_h, full_w)


def align_cos(centers, tokens, floor):
    return _impl().align_cos(centers, tokens, floor)


def align_grads(cos, prod, ntok, plans, tokens, src_tokens, centers,
                adv_glob, tgt_glob, weights, gamma, sharpness,
                lambda_pre, lambda_coa, floor):
    return _impl().align_grads(
        cos, prod, ntok, plans, tokens, src_tokens, centers,
        adv_glob, tgt_glob, weights, gamma, sharpness,
        lambda_pre, lambda_coa, floor,
    )


def warmup() -> None:
    """Trigger JIT compilation of the numba kernels (no-op on numpy)."""
    import numpy as np

    patches = np.ones((4, 12))
    wstack = np.full((1, 12, 3), 0.1)
    square = np.full((1, 3, 3), 0.1)
    tokens, glob, _ = forward_stack(patches, wstack, square, square, square, square)
    backward_stack(patches, wstack, square, square, square, square, tokens, glob)
    plans = sinkhorn_plans(np.ones((1, 2, 4)), 0.1, 3)
    img = np.ones((8, 8, 3))
    out = bilinear_resize(img, 1, 1, 6, 6, 8, 8)
    bilinear_resize_vjp(out, 1, 1, 6, 6, 8, 8)
    centers = np.full((1, 1, 2, 3), 0.2)
    cos, prod, ntok = align_cos(centers, tokens, 1e-12)
    align_grads(cos, prod, ntok, np.ascontiguousarray(plans[:, None]), tokens, tokens,
                centers, glob, np.ascontiguousarray(glob[:, None]), np.ones(1),
                0.0, 0.2, 0.05, 1.0, 1e-12)
