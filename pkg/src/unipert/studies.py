"""Empirical studies: the 1/m gradient-variance law, estimator
unbiasedness on an enumerable crop grid, and the ablation sweeps
(components, crop count, meta-initialization, source count)."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .alignment import EnsembleState, total_loss_and_grad
from .bank import bank_from_crop_specs
from .config import RunConfig
from .meta import Perturbation
from .proxy import mean_delta
from .runner import run_pipeline, run_stage1
from .sampler import CropSpec, enumerate_grid_crops, random_crop
from .synth import default_pools
from .tensorops import SeededRng

VARIANCE_COLUMNS = ("m", "grad_mean", "grad_var")
COMPONENT_ARMS = (
    ("baseline", dict(use_mca=False, use_agc=False, use_tr=False)),
    ("mca", dict(use_mca=True, use_agc=False, use_tr=False)),
    ("tr_only", dict(use_mca=False, use_agc=False, use_tr=True)),
    ("mca_agc", dict(use_mca=True, use_agc=True, use_tr=False)),
    ("full", dict(use_mca=True, use_agc=True, use_tr=True)),
)
ORDERED_CHAIN = ("baseline", "mca", "mca_agc", "full")
M_SWEEP = (2, 4, 8, 16)
N_SWEEP = (2, 5, 10, 20)
STEP_SWEEP = (50, 100, 200, 300)


def _fixed_delta(config: RunConfig, rng: SeededRng) -> np.ndarray:
    shape = (config.height, config.width, config.channels)
    return rng.generator().uniform(-config.eps, config.eps, size=shape)


def variance_study(config: RunConfig, target, source, m_list, resamples: int):
    """Gradient variance of the mean-over-m-fresh-crops estimator.

    Returns (rows, slope): one (m, mean-gradient l2, elementwise-mean
    variance) row per m, plus the fitted slope of log V against log m
    (1.0 under the i.i.d.-crop variance law). Slope is NaN for a single m.
    """
    config.validate()
    encoders = config.train_encoders()
    settings = config.align_settings()
    state = EnsembleState.uniform(len(encoders))
    rng = SeededRng(config.master_seed).spawn("variance_study")
    delta = _fixed_delta(config, rng.spawn("delta"))
    dims = config.dims()
    full = CropSpec(0, 0, dims.width, dims.height)

    rows = []
    for m in m_list:
        grads = []
        for r in range(resamples):
            specs = [
                random_crop(
                    target, rng.spawn("crop", m, r, i),
                    patch=dims.patch, out_h=dims.height, out_w=dims.width,
                    scale_min=config.crop_scale_min,
                )[0]
                for i in range(m)
            ]
            bank = bank_from_crop_specs(
                target, specs, encoders, config.k_clusters, rng.spawn("km", m, r)
            )
            _, grad, _ = total_loss_and_grad(delta, source, full, bank, encoders, state, settings)
            grads.append(grad.ravel())
        stacked = np.stack(grads)
        rows.append((
            int(m),
            float(np.linalg.norm(stacked.mean(axis=0))),
            float(stacked.var(axis=0, ddof=1).mean()),
        ))
    slope = float("nan")
    if len(rows) >= 2:
        logs_m = np.log([r[0] for r in rows])
        logs_v = np.log([r[2] for r in rows])
        slope = -float(np.polyfit(logs_m, logs_v, 1)[0])
    return rows, slope


def unbiasedness_check(config: RunConfig, target, source, m: int, draws: int,
                       *, lattice: int = 4, scales=(0.5, 1.0)) -> dict:
    """Mean of the m-crop loss estimator vs the exhaustive average over the
    enumerable crop grid. The per-crop loss is a fixed deterministic
    function of the crop, so estimator randomness is the crop choice alone.
    """
    config.validate()
    encoders = config.train_encoders()
    settings = config.align_settings()
    state = EnsembleState.uniform(len(encoders))
    rng = SeededRng(config.master_seed).spawn("unbiasedness")
    delta = _fixed_delta(config, rng.spawn("delta"))
    dims = config.dims()
    full = CropSpec(0, 0, dims.width, dims.height)

    grid = enumerate_grid_crops(
        dims.height, dims.width, patch=dims.patch, scales=scales, lattice=lattice
    )
    table = np.empty(len(grid))
    for gi, spec in enumerate(grid):
        bank = bank_from_crop_specs(
            target, [spec], encoders, config.k_clusters, rng.spawn("gridkm", gi)
        )
        loss, _, _ = total_loss_and_grad(delta, source, full, bank, encoders, state, settings)
        table[gi] = loss

    gen = rng.spawn("draws").generator()
    estimates = np.empty(draws)
    for di in range(draws):
        picks = gen.integers(0, len(grid), size=m)
        estimates[di] = table[picks].mean()
    exact = float(table.mean())
    est_mean = float(estimates.mean())
    se = float(estimates.std(ddof=1) / np.sqrt(draws))
    return {
        "grid_size": len(grid),
        "exact": exact,
        "estimator_mean": est_mean,
        "standard_error": se,
        "z": abs(est_mean - exact) / se if se > 0 else 0.0,
    }


# --- ablation sweeps ----------------------------------------------------


def _study_pools(config: RunConfig, seed: int, n_targets: int, n_seen: int, n_unseen: int):
    return default_pools(
        seed, height=config.height, width=config.width,
        n_targets=n_targets, n_seen=n_seen, n_unseen=n_unseen,
    )


def _unseen_heldout(result) -> float:
    return mean_delta(result.report, split="unseen", encoder="heldout")


def component_grid_study(base: RunConfig, seeds, *, n_targets: int = 10,
                         n_seen: int = 20, n_unseen: int = 30, arms=COMPONENT_ARMS):
    """Toggle grid, meta-initialization off; per (seed, arm) the mean
    unseen/held-out proxy improvement."""
    rows = []
    for seed in seeds:
        targets, seen, unseen = _study_pools(base, seed, n_targets, n_seen, n_unseen)
        for arm_name, toggles in arms:
            cfg = replace(base, use_meta_init=False, master_seed=seed, **toggles).validate()
            result = run_pipeline(cfg, targets, seen, unseen, collect_traces=False)
            rows.append((int(seed), arm_name, _unseen_heldout(result)))
    return rows


def m_sweep_study(base: RunConfig, seeds, *, m_values=M_SWEEP, n_targets: int = 10,
                  n_seen: int = 20, n_unseen: int = 30):
    rows = []
    for seed in seeds:
        targets, seen, unseen = _study_pools(base, seed, n_targets, n_seen, n_unseen)
        for m in m_values:
            cfg = replace(base, use_meta_init=False, crops_m=int(m), master_seed=seed).validate()
            result = run_pipeline(cfg, targets, seen, unseen, collect_traces=False)
            rows.append((int(seed), int(m), _unseen_heldout(result)))
    return rows


def n_sweep_study(base: RunConfig, seeds, *, n_values=N_SWEEP, n_targets: int = 10,
                  n_seen: int = 20, n_unseen: int = 30):
    rows = []
    for seed in seeds:
        targets, seen, unseen = _study_pools(base, seed, n_targets, n_seen, n_unseen)
        for n in n_values:
            cfg = replace(base, use_meta_init=False, sources_per_task=int(n),
                          master_seed=seed).validate()
            result = run_pipeline(cfg, targets, seen, unseen, collect_traces=False)
            rows.append((int(seed), int(n), _unseen_heldout(result)))
    return rows


def meta_sweep_study(base: RunConfig, seeds, *, step_values=STEP_SWEEP,
                     n_targets: int = 10, n_seen: int = 20, n_unseen: int = 30):
    """Meta-initialized vs zero-initialized stage-2 across step budgets.

    Stage 1 runs once per seed; both arms share it so the comparison
    isolates the initialization.
    """
    rows = []
    for seed in seeds:
        targets, seen, unseen = _study_pools(base, seed, n_targets, n_seen, n_unseen)
        meta_cfg = replace(base, use_meta_init=True, master_seed=seed).validate()
        shape = (base.height, base.width, base.channels)
        warm, _ = run_stage1(meta_cfg, targets, seen)
        zero = Perturbation.zeros(shape, base.eps)
        for steps in step_values:
            for arm_name, init in (("meta", warm), ("zero", zero)):
                cfg = replace(base, use_meta_init=False, master_seed=seed).validate()
                result = run_pipeline(
                    cfg, targets, seen, unseen,
                    adapt_steps=int(steps), collect_traces=False, delta0_override=init,
                )
                rows.append((int(seed), arm_name, int(steps), _unseen_heldout(result)))
    return rows
