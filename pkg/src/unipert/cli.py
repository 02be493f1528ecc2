"""Command-line interface.

Subcommands: gen-synthetic-pool, convert-ppm, build-bank, meta-train,
adapt, eval, variance-study, ablate. A full experiment is the chain
meta-train -> adapt -> eval under one config JSON.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from . import studies
from .bank import build_bank, save_bank
from .config import load_config
from .meta import Perturbation, stage2_adapt
from .ntf import read_ntf, write_ntf
from .pools import convert_ppm, load_pool, write_pool
from .proxy import REPORT_COLUMNS, proxy_eval
from .runner import (
    STAGE1_COLUMNS,
    encoder_map,
    load_pools,
    load_stage1_checkpoint,
    run_stage1,
    save_stage1_checkpoint,
    write_csv,
    write_manifest,
    write_trace_csv,
)
from .synth import synth_pool
from .tensorops import SeededRng


def _int_list(text: str):
    return [int(tok) for tok in text.split(",") if tok.strip()]


def cmd_gen_pool(args) -> int:
    out = Path(args.out)
    spec = (("targets", args.targets, 1), ("seen", args.seen, 2), ("unseen", args.unseen, 3))
    for name, count, salt in spec:
        pool = synth_pool(args.seed * 3 + salt, count, args.height, args.width)
        write_pool(out / name, pool.images)
        print(f"wrote {count} images to {out / name}")
    return 0


def cmd_convert_ppm(args) -> int:
    convert_ppm(args.src, args.dst)
    print(f"converted {args.src} -> {args.dst}")
    return 0


def cmd_build_bank(args) -> int:
    cfg = load_config(args.config).resolved()
    targets, _, _ = load_pools(cfg)
    setup = cfg.task_setup()
    bank_dir = Path(cfg.out_dir) / "banks"
    bank_dir.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(cfg.master_seed)
    for ti in range(len(targets)):
        # same stream path stage2_adapt uses, so the saved bank matches the run
        bank = build_bank(
            targets[ti], setup.encoders, setup.crops_m, setup.k,
            rng.spawn("stage2", ti).spawn("bank"),
            scale_min=setup.scale_min, with_attention=setup.with_attention,
        )
        path = bank_dir / f"bank_target{ti:03d}.ubk"
        save_bank(bank, path, cfg.bank_digest(ti))
        print(f"wrote {path} ({bank.n_encoders} encoders x {bank.n_crops} crops, k={bank.k})")
    return 0


def cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    targets, seen, _ = load_pools(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start_epoch, delta0_init = (0, None)
    if args.resume:
        start_epoch, delta0_init = load_stage1_checkpoint(out, cfg.eps)
        if start_epoch:
            print(f"resuming from epoch {start_epoch}")

    def _ckpt(epoch, delta0, _row):
        save_stage1_checkpoint(out, epoch, delta0)

    delta0, metrics = run_stage1(
        cfg, targets, seen,
        stage1_callback=_ckpt, start_epoch=start_epoch, delta0_init=delta0_init,
    )
    write_ntf(delta0.delta, out / "delta0.ntf")
    write_csv(out / "stage1_metrics.csv", STAGE1_COLUMNS,
              ([m[c] for c in STAGE1_COLUMNS] for m in metrics))
    print(f"wrote {out / 'delta0.ntf'}")
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    targets, seen_pool, _ = load_pools(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = (cfg.height, cfg.width, cfg.channels)
    if args.delta0:
        delta0 = Perturbation(read_ntf(args.delta0), cfg.eps)
    elif cfg.use_meta_init and (out / "delta0.ntf").exists():
        delta0 = Perturbation(read_ntf(out / "delta0.ntf"), cfg.eps)
    else:
        delta0 = Perturbation.zeros(shape, cfg.eps)

    setup = cfg.task_setup()
    meta_cfg = cfg.meta_config()
    rng = SeededRng(cfg.master_seed)
    artifacts = []
    seen_json = {}
    for ti in range(len(targets)):
        trace = []
        pert, seen_idx = stage2_adapt(
            setup, meta_cfg, delta0, targets[ti], seen_pool,
            rng.spawn("stage2", ti), trace=trace, task_id=f"target{ti}",
        )
        path = out / f"delta_target{ti:03d}.ntf"
        write_ntf(pert.delta, path)
        artifacts.append(path)
        artifacts.append(write_trace_csv(out / f"trace_target{ti:03d}.csv", trace))
        seen_json[str(ti)] = [int(i) for i in seen_idx]
        print(f"target {ti}: wrote {path}")
    seen_path = out / "seen_indices.json"
    seen_path.write_text(json.dumps(seen_json, sort_keys=True) + "\n")
    artifacts.append(seen_path)
    write_manifest(cfg, out, artifacts)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    targets, seen_pool, unseen_pool = load_pools(cfg)
    out = Path(cfg.out_dir)
    seen_json = json.loads((out / "seen_indices.json").read_text())
    encoders = encoder_map(cfg)
    rows = []
    for ti in range(len(targets)):
        delta = read_ntf(out / f"delta_target{ti:03d}.ntf")
        splits = {
            "seen": [seen_pool[i] for i in seen_json[str(ti)]],
            "unseen": [unseen_pool[j] for j in range(len(unseen_pool))],
        }
        rows.extend(proxy_eval(delta, targets[ti], ti, splits, encoders))
    path = write_csv(out / "proxy_report.csv", REPORT_COLUMNS, (r.as_list() for r in rows))
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_variance_study(args) -> int:
    cfg = load_config(args.config)
    targets, seen_pool, _ = load_pools(cfg)
    rows, slope = studies.variance_study(
        cfg, targets[0], seen_pool[0], _int_list(args.m_list), args.resamples
    )
    path = write_csv(args.out, studies.VARIANCE_COLUMNS, rows)
    print(f"wrote {path}; fitted slope {slope}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = _int_list(args.seeds)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes = dict(n_targets=args.targets, n_seen=args.seen, n_unseen=args.unseen)
    wanted = ("components", "m", "meta", "nsweep") if args.table == "all" else (args.table,)
    if "components" in wanted:
        rows = studies.component_grid_study(cfg, seeds, **sizes)
        print("wrote", write_csv(out / "components.csv", ("seed", "arm", "delta_unseen_heldout"), rows))
    if "m" in wanted:
        rows = studies.m_sweep_study(cfg, seeds, **sizes)
        print("wrote", write_csv(out / "m_sweep.csv", ("seed", "m", "delta_unseen_heldout"), rows))
    if "meta" in wanted:
        rows = studies.meta_sweep_study(cfg, seeds, **sizes)
        print("wrote", write_csv(out / "meta_sweep.csv", ("seed", "arm", "steps", "delta_unseen_heldout"), rows))
    if "nsweep" in wanted:
        rows = studies.n_sweep_study(cfg, seeds, **sizes)
        print("wrote", write_csv(out / "n_sweep.csv", ("seed", "n", "delta_unseen_heldout"), rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unipert",
        description="Universal per-target perturbations via multi-crop feature alignment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic-pool", help="write seeded colored-shape image pools")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", type=int, default=10)
    p.add_argument("--seen", type=int, default=20)
    p.add_argument("--unseen", type=int, default=30)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(fn=cmd_gen_pool)

    p = sub.add_parser("convert-ppm", help="convert a binary PPM (P6) to an NTF tensor in [0,1]")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(fn=cmd_convert_ppm)

    p = sub.add_parser("build-bank", help="precompute per-target crop/cluster banks")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_build_bank)

    p = sub.add_parser("meta-train", help="stage-1 Reptile training of the shared init")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("adapt", help="stage-2 per-target adaptation")
    p.add_argument("--config", required=True)
    p.add_argument("--delta0", help="NTF file overriding the initialization")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="held-out-encoder transfer proxy report")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("variance-study", help="gradient variance vs crop count")
    p.add_argument("--config", required=True)
    p.add_argument("--m-list", default="1,2,4,8,16")
    p.add_argument("--resamples", type=int, default=200)
    p.add_argument("--out", default="variance_study.csv")
    p.set_defaults(fn=cmd_variance_study)

    p = sub.add_parser("ablate", help="component / crop / meta / source-count sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--table", choices=("components", "m", "meta", "nsweep", "all"), default="all")
    p.add_argument("--out-dir")
    p.add_argument("--targets", type=int, default=10)
    p.add_argument("--seen", type=int, default=20)
    p.add_argument("--unseen", type=int, default=30)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
