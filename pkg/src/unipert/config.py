"""Run configuration: one flat JSON document covering every knob.

Defaults follow the reference operating point: budget 16/255, step 1/255,
300 adaptation steps, 125 meta epochs of 16 tasks x 5 inner steps, 20
sources and 4 target crops per task, preservation weight 0.05, coarse
weight 1, gate sharpness 0.2, gate margin 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .alignment import GATE_OPEN, AlignSettings, RoutingParams
from .encoder import REGISTRY, EncoderDims, make_ensemble
from .errors import ConfigError
from .meta import MetaConfig, TaskSetup


@dataclass(frozen=True)
class RunConfig:
    # canonical image / encoder geometry
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    embed_dim: int = 16

    encoder_kind: str = "toy"
    train_encoder_seeds: tuple = (101, 102, 103)
    heldout_encoder_seed: int = 900

    k_clusters: int = 4
    crop_scale_min: float = 0.5

    gate_margin: float = 0.0
    gate_sharpness: float = 0.2
    lambda_pre: float = 0.05
    lambda_coa: float = 1.0
    sinkhorn_reg: float = 0.05
    sinkhorn_iters: int = 50
    grad_through_couplings: bool = False

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

    # component toggles
    use_mca: bool = True
    use_agc: bool = True
    use_tr: bool = True
    use_meta_init: bool = True
    resample_target_crops: bool = False

    # paths
    source_dir: str = "pools/seen"
    unseen_dir: str = "pools/unseen"
    target_dir: str = "pools/targets"
    out_dir: str = "out"

    master_seed: int = 0

    def validate(self) -> "RunConfig":
        problems = self.meta_config().validate()
        if self.height % self.patch or self.width % self.patch:
            problems.append("height/width must be divisible by patch")
        for name in ("height", "width", "channels", "patch", "embed_dim", "k_clusters"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0 < self.crop_scale_min <= 1.0:
            problems.append("crop_scale_min must be in (0, 1]")
        if self.gate_sharpness <= 0:
            problems.append("gate_sharpness must be > 0")
        if self.lambda_pre < 0 or self.lambda_coa < 0:
            problems.append("lambda weights must be >= 0")
        if self.sinkhorn_reg <= 0 or self.sinkhorn_iters < 1:
            problems.append("need sinkhorn_reg > 0 and sinkhorn_iters >= 1")
        if self.encoder_kind not in REGISTRY:
            problems.append(f"unknown encoder kind {self.encoder_kind!r}")
        if len(set(self.train_encoder_seeds)) != len(self.train_encoder_seeds):
            problems.append("train encoder seeds must be distinct")
        if self.heldout_encoder_seed in self.train_encoder_seeds:
            problems.append("held-out encoder seed collides with a train seed")
        n_tokens = (self.height // self.patch) * (self.width // self.patch)
        if self.k_clusters > n_tokens:
            problems.append(f"k_clusters {self.k_clusters} exceeds token count {n_tokens}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    # --- derived views -------------------------------------------------

    def resolved(self) -> "RunConfig":
        """Apply the component-toggle semantics.

        mca off: no fixed crop set, one random target crop per visit, no
        attention anchor. agc off: drop the attention crop. tr off: gate
        forced open and preservation weight zeroed.
        """
        cfg = self
        if not cfg.use_mca:
            cfg = replace(cfg, crops_m=0, resample_target_crops=True, use_agc=False)
        if not cfg.use_tr:
            cfg = replace(cfg, gate_margin=GATE_OPEN, lambda_pre=0.0)
        return cfg

    def dims(self) -> EncoderDims:
        return EncoderDims(self.height, self.width, self.channels, self.patch, self.embed_dim)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            meta_epochs=self.meta_epochs,
            task_batch=self.task_batch,
            inner_steps=self.inner_steps,
            meta_inner_step_size=self.meta_inner_step_size,
            reptile_rate=self.reptile_rate,
            adapt_steps=self.adapt_steps,
            adapt_step_size=self.adapt_step_size,
            sources_per_task=self.sources_per_task,
            crops_m=self.crops_m,
            eps=self.eps,
        )

    def align_settings(self) -> AlignSettings:
        return AlignSettings(
            routing=RoutingParams(
                gamma=self.gate_margin,
                sharpness=self.gate_sharpness,
                lambda_pre=self.lambda_pre,
                lambda_coa=self.lambda_coa,
            ),
            sinkhorn_reg=self.sinkhorn_reg,
            sinkhorn_iters=self.sinkhorn_iters,
            grad_through_couplings=self.grad_through_couplings,
        )

    def train_encoders(self):
        return make_ensemble(self.train_encoder_seeds, self.dims(), self.encoder_kind)

    def heldout_encoder(self):
        return make_ensemble([self.heldout_encoder_seed], self.dims(), self.encoder_kind)[0]

    def task_setup(self) -> TaskSetup:
        cfg = self.resolved()
        return TaskSetup(
            encoders=cfg.train_encoders(),
            settings=cfg.align_settings(),
            k=cfg.k_clusters,
            crops_m=cfg.crops_m,
            scale_min=cfg.crop_scale_min,
            with_attention=cfg.use_agc,
            fixed_target_crops=not cfg.resample_target_crops,
        )

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def bank_digest(self, target_index: int) -> bytes:
        """Hash of every field a bank's content depends on."""
        cfg = self.resolved()
        payload = {
            "encoder_kind": cfg.encoder_kind,
            "train_encoder_seeds": list(cfg.train_encoder_seeds),
            "geometry": [cfg.height, cfg.width, cfg.channels, cfg.patch, cfg.embed_dim],
            "k_clusters": cfg.k_clusters,
            "crops_m": cfg.crops_m,
            "crop_scale_min": cfg.crop_scale_min,
            "use_agc": cfg.use_agc,
            "master_seed": cfg.master_seed,
            "target_index": target_index,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


_FIELDS = {f.name for f in RunConfig.__dataclass_fields__.values()}


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "train_encoder_seeds" in raw:
        raw = dict(raw, train_encoder_seeds=tuple(raw["train_encoder_seeds"]))
    return RunConfig(**raw).validate()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config JSON must be an object")
    return config_from_dict(raw)


def save_config(config: RunConfig, path) -> None:
    data = asdict(config)
    data["train_encoder_seeds"] = list(config.train_encoder_seeds)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def desk_config(**overrides) -> RunConfig:
    """Desk-scale preset: small counts that exercise the full pipeline in
    seconds on the bundled synthetic pools; study scripts build on it."""
    base = dict(
        meta_epochs=6,
        task_batch=6,
        inner_steps=2,
        sources_per_task=4,
        adapt_steps=20,
        crops_m=4,
    )
    base.update(overrides)
    return RunConfig(**base).validate()
