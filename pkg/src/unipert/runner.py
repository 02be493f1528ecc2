"""End-to-end orchestration: stage-1 meta training, per-target stage-2
adaptation, proxy evaluation, and deterministic artifact writing.

Every random draw derives from the master seed through named streams, so a
full run is bit-reproducible (including CSVs) under a fixed config.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import MissingPoolError
from .meta import Perturbation, stage1_meta_train, stage2_adapt
from .ntf import read_ntf, write_ntf
from .parallel import pmap
from .pools import load_pool
from .proxy import REPORT_COLUMNS, proxy_eval
from .tensorops import SeededRng

STAGE1_COLUMNS = ("epoch", "mean_task_shift", "delta0_linf", "delta0_l2")


@dataclass
class PipelineResult:
    delta0: Perturbation
    perturbations: list
    seen_indices: list
    report: list
    traces: list
    stage1_metrics: list


def encoder_map(config: RunConfig) -> dict:
    encs = {f"train{i}": enc for i, enc in enumerate(config.train_encoders())}
    encs["heldout"] = config.heldout_encoder()
    return encs


def assert_disjoint_pools(seen_pool, unseen_pool) -> None:
    for i in range(len(seen_pool)):
        for j in range(len(unseen_pool)):
            if np.array_equal(seen_pool[i], unseen_pool[j]):
                raise AssertionError(f"seen image {i} duplicated as unseen image {j}")


def _adapt_one(args):
    setup, meta_cfg, delta0, target, source_pool, rng, task_id, steps, want_trace = args
    trace = [] if want_trace else None
    pert, seen_idx = stage2_adapt(
        setup, meta_cfg, delta0, target, source_pool, rng,
        steps=steps, trace=trace, task_id=task_id,
    )
    return pert, seen_idx, (trace or [])


def run_stage1(config: RunConfig, target_pool, source_pool, *,
               stage1_callback=None, start_epoch: int = 0, delta0_init=None):
    """Stage-1 meta training alone; returns (delta0, per-epoch metrics)."""
    config.validate()
    metrics = []

    def _cb(epoch, delta0, row):
        metrics.append(row)
        if stage1_callback is not None:
            stage1_callback(epoch, delta0, row)

    delta0 = stage1_meta_train(
        config.task_setup(), config.meta_config(), source_pool, target_pool,
        SeededRng(config.master_seed).spawn("stage1"),
        start_epoch=start_epoch, delta0=delta0_init, epoch_callback=_cb,
    )
    return delta0, metrics


def run_pipeline(config: RunConfig, target_pool, source_pool, unseen_pool, *,
                 adapt_steps=None, collect_traces: bool = True,
                 stage1_callback=None, delta0_override=None) -> PipelineResult:
    """Full pipeline on in-memory pools; no disk I/O."""
    config.validate()
    setup = config.task_setup()
    meta_cfg = config.meta_config()
    rng = SeededRng(config.master_seed)
    assert_disjoint_pools(source_pool, unseen_pool)

    shape = (config.height, config.width, config.channels)
    stage1_metrics = []

    if delta0_override is not None:
        delta0 = delta0_override
    elif config.use_meta_init:
        delta0, stage1_metrics = run_stage1(
            config, target_pool, source_pool, stage1_callback=stage1_callback,
        )
    else:
        delta0 = Perturbation.zeros(shape, config.eps)

    jobs = [
        (setup, meta_cfg, delta0, target_pool[ti], source_pool,
         rng.spawn("stage2", ti), f"target{ti}", adapt_steps, collect_traces)
        for ti in range(len(target_pool))
    ]
    adapted = pmap(_adapt_one, jobs)
    perturbations = [a[0] for a in adapted]
    seen_indices = [a[1] for a in adapted]
    traces = [a[2] for a in adapted]

    encoders = encoder_map(config)
    report = []
    for ti in range(len(target_pool)):
        splits = {
            "seen": [source_pool[int(i)] for i in seen_indices[ti]],
            "unseen": [unseen_pool[j] for j in range(len(unseen_pool))],
        }
        report.extend(proxy_eval(
            perturbations[ti].delta, target_pool[ti], ti, splits, encoders,
        ))
    return PipelineResult(delta0, perturbations, seen_indices, report, traces, stage1_metrics)


# --- disk-facing entry points ------------------------------------------


def load_pools(config: RunConfig):
    targets = load_pool(config.target_dir, role="target")
    seen = load_pool(config.source_dir, role="source")
    unseen = load_pool(config.unseen_dir, role="source")
    if len(targets) < 1 or len(seen) < 1 or len(unseen) < 1:
        raise MissingPoolError("all three pools must be non-empty")
    return targets, seen, unseen


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)
    return path


def write_trace_csv(path, trace_rows) -> Path:
    if trace_rows:
        columns = list(trace_rows[0].keys())
    else:
        columns = ["step", "task_id", "loss_total", "grad_l2", "gate_mean"]
    return write_csv(path, columns, ([row[c] for c in columns] for row in trace_rows))


def _checkpoint_paths(out_dir):
    return Path(out_dir) / "checkpoints"


def save_stage1_checkpoint(out_dir, epoch: int, delta0: Perturbation) -> None:
    ckpt = _checkpoint_paths(out_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    write_ntf(delta0.delta, ckpt / f"delta0_epoch{epoch:04d}.ntf")
    (ckpt / "state.json").write_text(json.dumps({"last_epoch": epoch}) + "\n")


def load_stage1_checkpoint(out_dir, eps: float):
    """(start_epoch, delta0) from the newest checkpoint, or (0, None)."""
    ckpt = _checkpoint_paths(out_dir)
    state = ckpt / "state.json"
    if not state.exists():
        return 0, None
    last = json.loads(state.read_text())["last_epoch"]
    delta = read_ntf(ckpt / f"delta0_epoch{last:04d}.ntf")
    return last + 1, Perturbation(delta, eps)


def run_experiment(config: RunConfig) -> PipelineResult:
    """Pipeline over the configured pool directories, writing every artifact
    (perturbations, traces, stage-1 metrics, proxy report, manifest)."""
    target_pool, source_pool, unseen_pool = load_pools(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def _ckpt_cb(epoch, delta0, _metrics):
        save_stage1_checkpoint(out, epoch, delta0)

    result = run_pipeline(
        config, target_pool, source_pool, unseen_pool, stage1_callback=_ckpt_cb,
    )

    artifacts = []
    path = out / "delta0.ntf"
    write_ntf(result.delta0.delta, path)
    artifacts.append(path)
    for ti, pert in enumerate(result.perturbations):
        path = out / f"delta_target{ti:03d}.ntf"
        write_ntf(pert.delta, path)
        artifacts.append(path)
        artifacts.append(write_trace_csv(out / f"trace_target{ti:03d}.csv", result.traces[ti]))
    artifacts.append(write_csv(
        out / "stage1_metrics.csv", STAGE1_COLUMNS,
        ([m[c] for c in STAGE1_COLUMNS] for m in result.stage1_metrics),
    ))
    artifacts.append(write_csv(
        out / "proxy_report.csv", REPORT_COLUMNS,
        (row.as_list() for row in result.report),
    ))
    seen_json = {str(ti): [int(i) for i in idx] for ti, idx in enumerate(result.seen_indices)}
    path = out / "seen_indices.json"
    path.write_text(json.dumps(seen_json, sort_keys=True) + "\n")
    artifacts.append(path)

    write_manifest(config, out, artifacts)
    return result


def write_manifest(config: RunConfig, out_dir, artifacts) -> Path:
    digests = {}
    for path in sorted(Path(p) for p in artifacts):
        digests[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "config": json.loads(config.canonical_json()),
        "master_seed": config.master_seed,
        "artifacts": digests,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
