"""Two-stage perturbation optimization.

Inner loop: projected sign-gradient ascent over (source, target-crop)
visits, source crop re-sampled per visit, target crops fixed from the bank.
Stage 1 meta-learns a shared initialization with Reptile (move toward the
mean of task-adapted perturbations, then project). Stage 2 adapts that
initialization to each target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment
from .alignment import AlignSettings, EnsembleState
from .bank import bank_from_crop_specs, build_bank
from .errors import NonFiniteGradientError, PoolTooSmallError, ShapeMismatchError
from .parallel import pmap
from .sampler import ImagePool, random_crop, sample_sources
from .tensorops import SeededRng, as_tensor, clamp_linf


@dataclass(frozen=True)
class Perturbation:
    """Image-shaped additive perturbation under an l-inf budget."""

    delta: np.ndarray
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "delta", as_tensor(self.delta, rank=3))
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if float(np.abs(self.delta).max()) > self.eps:
            raise ValueError("perturbation exceeds its budget")

    @staticmethod
    def zeros(shape, eps: float) -> "Perturbation":
        return Perturbation(np.zeros(shape), eps)


@dataclass(frozen=True)
class MetaConfig:
    """Counts and step sizes for both stages.

    The inner step size and the Reptile interpolation rate are distinct
    fields on purpose; so are the adaptation step size and the gate
    sharpness over in RoutingParams.
    """

    meta_epochs: int = 125
    task_batch: int = 16
    inner_steps: int = 5
    meta_inner_step_size: float = 1.0 / 255.0
    reptile_rate: float = 1.0
    adapt_steps: int = 300
    adapt_step_size: float = 1.0 / 255.0
    sources_per_task: int = 20
    crops_m: int = 4
    eps: float = 16.0 / 255.0

    def validate(self):
        problems = []
        for name in ("meta_epochs", "task_batch", "inner_steps", "adapt_steps", "sources_per_task"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.crops_m < 0:
            problems.append("crops_m must be >= 0")
        for name in ("meta_inner_step_size", "reptile_rate", "adapt_step_size", "eps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        return problems


@dataclass(frozen=True)
class TaskSetup:
    """Everything the inner loop needs besides the task itself."""

    encoders: list
    settings: AlignSettings
    k: int
    crops_m: int
    scale_min: float = 0.5
    with_attention: bool = True      # attention-guided anchor crop in the set
    fixed_target_crops: bool = True  # off: one fresh random target crop per visit

    @property
    def dims(self):
        return self.encoders[0].dims


def inner_update(delta0: Perturbation, target, sources, bank, setup: TaskSetup,
                 steps: int, step_size: float, rng: SeededRng, *,
                 trace=None, task_id: str = "",
                 loss_and_grad_fn=alignment.total_loss_and_grad) -> Perturbation:
    """Projected sign-gradient ascent, sources outer, target crops inner.

    Each (source, crop) visit draws a fresh random source crop, evaluates the
    loss against that single target crop, and applies one FGSM-style update.
    The budget holds after every single update.
    """
    if steps == 0:
        return delta0
    if not sources:
        raise PoolTooSmallError("inner update needs at least one source")
    target = as_tensor(target, rank=3)
    dims = setup.dims
    eps = delta0.eps
    delta = delta0.delta.copy()
    state = EnsembleState.uniform(len(setup.encoders))

    if setup.fixed_target_crops:
        crop_views = [bank.select_crops([ci]) for ci in range(bank.n_crops)]
    else:
        crop_views = [None]

    counter = 0
    for step in range(1, steps + 1):
        for si, source in enumerate(sources):
            for ci, view in enumerate(crop_views):
                if view is None:
                    tspec, _ = random_crop(
                        target, rng.spawn("tgtcrop", step, si),
                        patch=dims.patch, out_h=dims.height, out_w=dims.width,
                        scale_min=setup.scale_min,
                    )
                    view = bank_from_crop_specs(
                        target, [tspec], setup.encoders, setup.k,
                        rng.spawn("tgtkm", step, si),
                    )
                sspec, _ = random_crop(
                    source, rng.spawn("srccrop", step, si, ci),
                    patch=dims.patch, out_h=dims.height, out_w=dims.width,
                    scale_min=setup.scale_min,
                )
                try:
                    loss, grad, diag = loss_and_grad_fn(
                        delta, source, sspec, view, setup.encoders, state, setup.settings
                    )
                except NonFiniteGradientError as err:
                    raise NonFiniteGradientError(
                        f"task {task_id!r} step {step} source {si} crop {ci}: {err}"
                    ) from err
                state = update_state(state, diag)
                delta = clamp_linf(delta + step_size * np.sign(grad), eps)
                assert float(np.abs(delta).max()) <= eps, "budget violated after update"
                counter += 1
                if trace is not None:
                    trace.append(_trace_row(counter, task_id, loss, grad, diag))
    return Perturbation(delta, eps)


def update_state(state: EnsembleState, diag) -> EnsembleState:
    return alignment.update_ensemble(state, diag["per_encoder"])


def _trace_row(step, task_id, loss, grad, diag):
    row = {"step": step, "task_id": task_id, "loss_total": loss}
    for i, val in enumerate(diag["tr_per_encoder"]):
        row[f"loss_tr_enc{i}"] = float(val)
    for i, val in enumerate(diag["coa_per_encoder"]):
        row[f"loss_coa_enc{i}"] = float(val)
    for i, val in enumerate(diag["weights"]):
        row[f"weight_enc{i}"] = float(val)
    row["grad_l2"] = float(np.linalg.norm(grad))
    row["gate_mean"] = diag["gate_mean"]
    return row


def reptile_step(delta0: Perturbation, task_deltas, rate: float) -> Perturbation:
    """Move the initialization toward the mean task solution, then project.

    The move is the mean of task differences, so tasks that return the
    initialization unchanged leave it bitwise unchanged at any rate.
    """
    if not task_deltas:
        raise ValueError("need at least one task result")
    for p in task_deltas:
        if p.delta.shape != delta0.delta.shape or p.eps != delta0.eps:
            raise ShapeMismatchError("task perturbations disagree with the initialization")
    drift = np.mean(np.stack([p.delta - delta0.delta for p in task_deltas]), axis=0)
    moved = delta0.delta + rate * drift
    return Perturbation(clamp_linf(moved, delta0.eps), delta0.eps)


def _build_task_bank(setup: TaskSetup, target, rng: SeededRng):
    if not setup.fixed_target_crops:
        return None
    return build_bank(
        target, setup.encoders, setup.crops_m, setup.k, rng.spawn("bank"),
        scale_min=setup.scale_min, with_attention=setup.with_attention,
    )


def _run_meta_task(args):
    setup, cfg, delta0, target, source_pool, rng, task_id = args
    _, sources = sample_sources(source_pool, cfg.sources_per_task, rng.spawn("src"))
    bank = _build_task_bank(setup, target, rng)
    return inner_update(
        delta0, target, sources, bank, setup,
        cfg.inner_steps, cfg.meta_inner_step_size, rng.spawn("inner"),
        task_id=task_id,
    )


def stage1_meta_train(setup: TaskSetup, cfg: MetaConfig, source_pool: ImagePool,
                      target_pool: ImagePool, rng: SeededRng, *,
                      start_epoch: int = 0, delta0: Perturbation | None = None,
                      epoch_callback=None) -> Perturbation:
    """Reptile training of the shared initialization.

    Each epoch samples task_batch targets without replacement, adapts a copy
    of the current initialization to each (fresh sources, fresh crop bank),
    and interpolates toward the task mean. Epochs re-derive their streams
    from the epoch index, so a paused run resumes bit-identically.
    """
    shape = (setup.dims.height, setup.dims.width, setup.dims.channels)
    if delta0 is None:
        delta0 = Perturbation.zeros(shape, cfg.eps)
    n_targets = len(target_pool)
    if cfg.task_batch > n_targets:
        raise PoolTooSmallError(
            f"task_batch {cfg.task_batch} exceeds target pool of {n_targets}"
        )
    for epoch in range(start_epoch, cfg.meta_epochs):
        gen = rng.spawn("s1_tasks", epoch).generator()
        task_idx = gen.choice(n_targets, size=cfg.task_batch, replace=False)
        jobs = [
            (setup, cfg, delta0, target_pool[int(ti)], source_pool,
             rng.spawn("s1", epoch, int(b)), f"s1_e{epoch}_t{int(ti)}")
            for b, ti in enumerate(task_idx)
        ]
        task_deltas = pmap(_run_meta_task, jobs)
        moved = float(np.mean([np.abs(p.delta - delta0.delta).mean() for p in task_deltas]))
        delta0 = reptile_step(delta0, task_deltas, cfg.reptile_rate)
        if epoch_callback is not None:
            epoch_callback(epoch, delta0, {
                "epoch": epoch,
                "mean_task_shift": moved,
                "delta0_linf": float(np.abs(delta0.delta).max()),
                "delta0_l2": float(np.linalg.norm(delta0.delta)),
            })
    return delta0


def stage2_adapt(setup: TaskSetup, cfg: MetaConfig, delta0: Perturbation, target,
                 source_pool: ImagePool, rng: SeededRng, *,
                 steps: int | None = None, trace=None, task_id: str = ""):
    """Per-target adaptation from the (meta or zero) initialization.

    Returns (perturbation, seen_source_indices); the indices define the seen
    evaluation split.
    """
    seen_idx, sources = sample_sources(source_pool, cfg.sources_per_task, rng.spawn("src"))
    bank = _build_task_bank(setup, target, rng)
    pert = inner_update(
        delta0, target, sources, bank, setup,
        cfg.adapt_steps if steps is None else steps,
        cfg.adapt_step_size, rng.spawn("inner"),
        trace=trace, task_id=task_id,
    )
    return pert, seen_idx
