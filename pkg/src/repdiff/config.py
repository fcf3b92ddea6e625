"""Experiment configuration: strict YAML schema, hashing and translation into a training Setup."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import RingMixture
from .diffusion import LOSS_MODES, LossConfig
from .representation import Encoder, LevelSpec, SyntheticModality
from .train import EvalSettings, Setup, TrainSettings
from .schedules import CURRICULUM_KINDS, Curriculum, make_noise_schedule, make_weight_schedule

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DatasetCfg(_Strict):
    kind: Literal["ring"] = "ring"
    n_components: int = Field(8, ge=1)
    radius: float = Field(1.0, gt=0)
    std: float = Field(0.15, gt=0)
    n_train: int = Field(8192, ge=1)
    seed: int


class NoiseScheduleCfg(_Strict):
    kind: Literal["linear", "cosine"] = "linear"
    T: int = Field(100, ge=1)
    beta_min: float = 1e-4
    beta_max: float = 0.02


class WeightScheduleCfg(_Strict):
    kind: Literal["uniform", "rcg"] = "uniform"


class CurriculumCfg(_Strict):
    kind: str = "constant"
    warmup: int = Field(0, ge=0)
    peak: float = 1.0
    floor: float = 0.0
    horizon: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _kind(self):
        if self.kind not in CURRICULUM_KINDS:
            raise ValueError(f"unknown curriculum kind {self.kind!r}")
        return self

    def build(self) -> Curriculum:
        return Curriculum(self.kind, self.warmup, self.peak, self.floor, self.horizon)


class CurriculaCfg(_Strict):
    alpha: CurriculumCfg = CurriculumCfg(kind="linear-phase-in", warmup=20)
    beta: CurriculumCfg = CurriculumCfg()


class EncoderCfg(_Strict):
    kind: Literal["class-prototype", "random-feature"] = "class-prototype"
    out_dim: int = Field(8, ge=1)
    seed: int
    hidden: int = Field(32, ge=1)
    layer: int = Field(1, ge=1)


class ModalityEncoderCfg(_Strict):
    kind: Literal["random-feature"] = "random-feature"
    out_dim: int = Field(4, ge=1)
    seed: int
    hidden: int = Field(32, ge=1)


class ModalityCfg(_Strict):
    enabled: bool = True
    y_dim: int = Field(3, ge=1)
    noise_std: float = Field(0.1, ge=0)
    transform: Literal["affine-tanh", "identity"] = "affine-tanh"
    seed: int
    layer: int = Field(3, ge=1)
    encoder: ModalityEncoderCfg


class EncodersCfg(_Strict):
    x: EncoderCfg


class DenoiserCfg(_Strict):
    depth: int = Field(4, ge=1)
    width: int = Field(128, ge=1)
    temb_dim: int = Field(32, ge=2)
    inject_layer: int = Field(2, ge=1)
    head_hidden: int = Field(64, ge=1)
    class_conditional: bool = False


class LossCfg(_Strict):
    lambda_x: float = Field(0.5, ge=0)
    lambda_y: float = Field(0.5, ge=0)
    lognorm_weight: float = Field(1.0, ge=0)
    stopgrad_conditional: bool = False


class TrainerCfg(_Strict):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_schedule: Literal["constant", "cosine"] = "constant"


class MetricsCfg(_Strict):
    n_samples: int = Field(2048, ge=1)
    projections: int = Field(512, ge=1)
    reference_seed: int
    projection_seed: int
    align_t: int = Field(10, ge=1)
    coverage_radius: float = Field(0.45, gt=0)
    energy_points: int = Field(4096, ge=2)


class VariantCfg(_Strict):
    mode: str
    curricula: CurriculaCfg | None = None

    @model_validator(mode="after")
    def _mode(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        return self


class SweepCfg(_Strict):
    runs: list[str] = ["vanilla", "repa", "reed"]
    seeds: list[int]
    variants: dict[str, VariantCfg] = {}

    @model_validator(mode="after")
    def _runs(self):
        for r in self.runs:
            if r not in LOSS_MODES and r not in self.variants:
                raise ValueError(f"sweep run {r!r} is neither a mode nor a declared variant")
        for name in self.variants:
            if name in LOSS_MODES:
                raise ValueError(f"variant name {name!r} shadows a mode")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("duplicate sweep seeds")
        return self


class VerifyCfg(_Strict):
    seed: int
    decomposition_instances: int = Field(1000, ge=1)
    bound_instances: int = Field(500, ge=1)
    multilatent_instances: int = Field(500, ge=1)
    gaussian_draws: int = Field(200, ge=1)
    hybrid_instances: int = Field(20, ge=1)
    hybrid_points: int = Field(100, ge=1)
    vmf_dims: list[int] = [2, 3, 8]
    vmf_kappas: list[float] = [0.1, 1.0, 10.0, 100.0]
    negative_control: bool = True


class GradcheckCfg(_Strict):
    seeds: list[int]
    batch_size: int = Field(6, ge=1)
    width: int = Field(16, ge=1)
    step: float = Field(1e-6, gt=0)
    coords_per_param: int = Field(6, ge=1)
    tolerance: float = Field(1e-6, gt=0)


class TvScalingCfg(_Strict):
    data_mean: float = 2.0
    data_std: float = Field(0.5, gt=0)
    T_time: float = Field(8.0, gt=0)
    steps: list[int] = [32, 64, 128, 256, 512]
    T_values: list[float] = [2.0, 4.0, 6.0, 8.0]
    n_samples: int = Field(1_000_000, ge=1)
    bins: int = Field(100, ge=1)
    seed: int


class BoundCfg(_Strict):
    kl_to_gauss: float = Field(ge=0)
    L: float = Field(gt=0)
    d: int = Field(ge=1)
    m: float = Field(ge=0)
    h: float = Field(gt=0)
    T_time: float = Field(gt=0)
    eps: list[float] = []


class ExperimentConfig(_Strict):
    schema_version: int
    dataset: DatasetCfg
    noise_schedule: NoiseScheduleCfg = Field(NoiseScheduleCfg(), alias="noise-schedule")
    weight_schedule: WeightScheduleCfg = Field(WeightScheduleCfg(), alias="weight-schedule")
    curricula: CurriculaCfg = CurriculaCfg()
    encoders: EncodersCfg
    modality: ModalityCfg | None = None
    denoiser: DenoiserCfg = DenoiserCfg()
    loss: LossCfg = LossCfg()
    trainer: TrainerCfg = TrainerCfg()
    metrics: MetricsCfg
    sweep: SweepCfg
    verify: VerifyCfg | None = None
    gradcheck: GradcheckCfg | None = None
    tvscaling: TvScalingCfg | None = None
    bound: BoundCfg | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        depth = self.denoiser.depth
        layers = [self.encoders.x.layer]
        if self.modality is not None and self.modality.enabled:
            layers.append(self.modality.layer)
        for l in layers:
            if l > depth:
                raise ValueError(f"alignment layer {l} exceeds denoiser depth {depth}")
        if len(set(layers)) != len(layers):
            raise ValueError(f"duplicate alignment layer assignment {layers}")
        if self.denoiser.inject_layer > depth:
            raise ValueError("inject_layer exceeds denoiser depth")
        return self

    def canonical(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at top level")
    if "schema_version" not in doc:
        raise ConfigError("config is missing mandatory field schema_version")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return parse_config(doc)


def build_setup(cfg: ExperimentConfig, curricula: CurriculaCfg | None = None):
    ds = cfg.dataset
    ring = RingMixture(ds.n_components, ds.radius, ds.std)
    nsc = cfg.noise_schedule
    ns = make_noise_schedule(nsc.kind, nsc.T, nsc.beta_min, nsc.beta_max)
    ws = make_weight_schedule(cfg.weight_schedule.kind, nsc.T)
    ex = cfg.encoders.x
    enc_x = Encoder(ex.kind, ex.out_dim, 2, ex.seed,
                    prototypes=ring.means if ex.kind == "class-prototype" else None, hidden=ex.hidden)
    levels = [LevelSpec("x", ex.layer, encoder=enc_x)]
    mc = cfg.modality
    if mc is not None and mc.enabled:
        ey = Encoder(mc.encoder.kind, mc.encoder.out_dim, mc.y_dim, mc.encoder.seed, hidden=mc.encoder.hidden)
        mod = SyntheticModality(2, mc.y_dim, mc.noise_std, ey, mc.seed, transform=mc.transform)
        levels.append(LevelSpec("y", mc.layer, modality=mod))
    cur = curricula or cfg.curricula
    tr, me, dn, lo = cfg.trainer, cfg.metrics, cfg.denoiser, cfg.loss
    return Setup(
        ring=ring,
        n_train=ds.n_train,
        data_seed=ds.seed,
        ns=ns,
        ws=ws,
        levels=tuple(levels),
        loss=LossConfig("vanilla", lo.lambda_x, lo.lambda_y, lo.lognorm_weight, lo.stopgrad_conditional),
        alpha_c=cur.alpha.build(),
        beta_c=cur.beta.build(),
        train=TrainSettings(tr.epochs, tr.batch_size, tr.lr, tr.beta1, tr.beta2, tr.epsilon, tr.lr_schedule),
        eval=EvalSettings(me.n_samples, me.projections, me.reference_seed, me.projection_seed, me.align_t,
                          me.coverage_radius, me.energy_points),
        depth=dn.depth,
        width=dn.width,
        temb_dim=dn.temb_dim,
        inject_layer=dn.inject_layer,
        head_hidden=dn.head_hidden,
        class_conditional=dn.class_conditional,
    )


def resolve_run(cfg: ExperimentConfig, name: str):
    """Map a sweep run name to (mode, Setup)."""
    if name in cfg.sweep.variants:
        v = cfg.sweep.variants[name]
        return v.mode, build_setup(cfg, v.curricula)
    return name, build_setup(cfg)
