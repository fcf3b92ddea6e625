"""Adam, the training loop for every mode, evaluation and model persistence."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import RingMixture
from .diffusion import (
    LOSS_MODES,
    AlignmentHead,
    Batch,
    Denoiser,
    LatentPrior,
    LossConfig,
    ancestral_sample,
    diffusion_loss,
    exact_elbo_loss,
    hybrid_sample,
    rcg_sample,
    reed_loss,
)
from .metrics import MetricReport, alignment_cosine, class_coverage, energy_distance, sliced_wasserstein
from .representation import LevelSpec, check_levels, encode, make_bundle
from .schedules import Curriculum, NoiseSchedule, WeightSchedule, curriculum_weight


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for an epoch; ``cosine`` anneals from ``lr`` towards 0 at the last epoch."""
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass(frozen=True)
class EvalSettings:
    n_samples: int = 2048
    projections: int = 512
    reference_seed: int = 10_001
    projection_seed: int = 7
    align_t: int = 10
    coverage_radius: float = 0.45
    energy_points: int = 4096


@dataclass
class Setup:
    """Everything a training run needs besides mode and seed."""

    ring: RingMixture
    n_train: int
    data_seed: int
    ns: NoiseSchedule
    ws: WeightSchedule
    levels: tuple
    loss: LossConfig
    alpha_c: Curriculum
    beta_c: Curriculum
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()
    depth: int = 4
    width: int = 128
    temb_dim: int = 32
    inject_layer: int = 1
    head_hidden: int = 64
    class_conditional: bool = False


_STREAMS = {"denoiser": 1, "heads": 2, "batches": 3, "noise": 4, "modality": 5, "sample": 6, "prior": 7}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per purpose so that modes sharing a seed share draws."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[name]]))


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


@dataclass
class TrainedModel:
    mode: str
    denoiser: Denoiser
    heads: dict
    head_layers: dict
    dummy: Tensor | None = None
    prior: LatentPrior | None = None

    def params(self) -> dict[str, Tensor]:
        p = dict(self.denoiser.params)
        for h in self.heads.values():
            p.update(h.params)
        if self.dummy is not None:
            p["dummy"] = self.dummy
        return p

    def save(self, path, meta: dict) -> None:
        tensors = {k: v.data for k, v in self.params().items()}
        if self.prior is not None and self.prior.fitted:
            for k, v in self.prior.state().items():
                tensors[f"prior.{k}"] = v
        heads = {t: {"in_dim": h.in_dim, "out_dim": h.out_dim, "hidden": h.params[f"head.{t}.w0"].shape[1],
                     "layer": self.head_layers[t]} for t, h in self.heads.items()}
        full = dict(meta, mode=self.mode, denoiser=self.denoiser.config(), heads=heads)
        save_checkpoint(path, tensors, full)

    @classmethod
    def load(cls, path) -> tuple[TrainedModel, dict]:
        tensors, meta = load_checkpoint(path)
        d = Denoiser(**meta["denoiser"])
        for k in d.params:
            d.params[k].data = tensors[k]
        heads, layers = {}, {}
        for tag, h in meta["heads"].items():
            head = AlignmentHead(h["in_dim"], h["out_dim"], hidden=h["hidden"], tag=tag)
            for k in head.params:
                head.params[k].data = tensors[k]
            heads[tag], layers[tag] = head, h["layer"]
        dummy = Tensor(tensors["dummy"], requires_grad=True) if "dummy" in tensors else None
        prior = None
        if "prior.weights" in tensors:
            prior = LatentPrior.from_state({k: tensors[f"prior.{k}"] for k in ("weights", "means", "chols")})
        return cls(meta["mode"], d, heads, layers, dummy, prior), meta


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, epoch: int, snapshot: dict[str, np.ndarray]):
        super().__init__(msg)
        self.epoch = epoch
        self.snapshot = snapshot


RECORD_COLUMNS = (
    "epoch", "mode", "seed", "loss_total", "loss_diffusion", "loss_repgen", "loss_denoise",
    "loss_lognorm", "alpha", "beta", "sliced_wasserstein", "energy_distance", "alignment_cosine",
    "wall_time",
)


@dataclass
class RunRecord:
    epoch: int
    mode: str
    seed: int
    loss_total: float
    loss_diffusion: float = float("nan")
    loss_repgen: float = float("nan")
    loss_denoise: float = float("nan")
    loss_lognorm: float = float("nan")
    alpha: float = float("nan")
    beta: float = float("nan")
    sliced_wasserstein: float = float("nan")
    energy_distance: float = float("nan")
    alignment_cosine: float = float("nan")
    wall_time: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in RECORD_COLUMNS]


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records(path, records: list[RunRecord], config_hash: str, include_wall_time: bool = True) -> None:
    cols = [c for c in RECORD_COLUMNS if include_wall_time or c != "wall_time"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([format_value(getattr(r, c)) for c in cols])


def mode_levels(mode: str, setup: Setup) -> tuple:
    if mode in ("vanilla", "rcg"):
        return ()
    if mode == "repa":
        return tuple(lv for lv in setup.levels if lv.tag == "x")
    return tuple(setup.levels)


def build_model(mode: str, setup: Setup, seed: int) -> TrainedModel:
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    levels = mode_levels(mode, setup)
    check_levels(levels, setup.depth)
    x_level = next((lv for lv in setup.levels if lv.tag == "x"), None)
    latent_dim = 0
    if mode in ("rcg", "exact-elbo"):
        if x_level is None:
            raise ValueError(f"mode {mode} needs an 'x' representation level")
        latent_dim = x_level.out_dim
    d = Denoiser(
        depth=setup.depth,
        width=setup.width,
        x_dim=2,
        temb_dim=setup.temb_dim,
        latent_dim=latent_dim,
        inject_layer=setup.inject_layer,
        n_classes=setup.ring.n_components if setup.class_conditional else 0,
        seed=_child_seed(stream(seed, "denoiser")),
    )
    hrng = stream(seed, "heads")
    heads, layers = {}, {}
    for lv in levels:
        heads[lv.tag] = AlignmentHead(setup.width, lv.out_dim, setup.head_hidden, _child_seed(hrng), tag=lv.tag)
        layers[lv.tag] = lv.layer
    dummy = Tensor(np.zeros((1, latent_dim)), requires_grad=True, name="dummy") if mode == "exact-elbo" else None
    return TrainedModel(mode, d, heads, layers, dummy)


def _loss_for(mode, model, batch, setup, levels, n):
    ns, cfg = setup.ns, replace(setup.loss, mode=mode)
    if mode == "vanilla":
        loss = diffusion_loss(model.denoiser, batch, ns)
        v = loss.item()
        return loss, {"total": v, "diffusion": v, "alpha": 1.0, "beta": 0.0}
    if mode == "rcg":
        loss = diffusion_loss(model.denoiser, batch, ns, latent=batch.bundle["x"])
        v = loss.item()
        return loss, {"total": v, "diffusion": v, "alpha": 1.0, "beta": 0.0}
    if mode == "repa":
        const = Curriculum("constant", peak=1.0)
        return reed_loss(model.denoiser, model.heads, batch, ns, cfg, const, const, n)
    if mode == "reed":
        return reed_loss(model.denoiser, model.heads, batch, ns, cfg, setup.alpha_c, setup.beta_c, n)
    return exact_elbo_loss(model.denoiser, model.dummy, model.heads, batch, ns, setup.ws, cfg)


def training_data(setup: Setup) -> tuple[np.ndarray, np.ndarray]:
    return setup.ring.sample(setup.n_train, setup.data_seed)


@dataclass
class TrainResult:
    model: TrainedModel
    records: list[RunRecord]
    final: MetricReport | None


def train(mode: str, setup: Setup, seed: int, evaluate_final: bool = True, log=None) -> TrainResult:
    """Train one (mode, seed) run.  Every random draw comes from a named stream of ``seed``."""
    model = build_model(mode, setup, seed)
    levels = mode_levels(mode, setup)
    needs_bundle = mode != "vanilla"
    bundle_levels = levels if levels else tuple(lv for lv in setup.levels if lv.tag == "x")
    x, labels = training_data(setup)
    n = len(x)
    brng, nrng, mrng = stream(seed, "batches"), stream(seed, "noise"), stream(seed, "modality")
    params = model.params()
    ts = setup.train
    opt = AdamState(lr=ts.lr, beta1=ts.beta1, beta2=ts.beta2, epsilon=ts.epsilon)
    records = []
    keys = ("total", "diffusion", "repgen", "denoise", "lognorm")
    for epoch in range(ts.epochs):
        t0 = time.perf_counter()
        opt.lr = ts.lr_at(epoch)
        snapshot = {k: p.data.copy() for k, p in params.items()}
        sums = dict.fromkeys(keys, 0.0)
        seen = dict.fromkeys(keys, 0)
        perm = brng.permutation(n)
        parts = {}
        for start in range(0, n, ts.batch_size):
            idx = perm[start : start + ts.batch_size]
            m = len(idx)
            t = nrng.integers(1, setup.ns.T + 1, size=m)
            noise = nrng.standard_normal((m, 2))
            bundle = None
            if needs_bundle:
                bundle = make_bundle(x[idx], bundle_levels, setup.depth, seed=_child_seed(mrng))
            batch = Batch(x[idx], t, noise, labels[idx] if setup.class_conditional else None, bundle,
                          seed=seed * 1_000_003 + epoch * 1009 + start)
            try:
                loss, parts = _loss_for(mode, model, batch, setup, levels, epoch)
            except FloatingPointError as e:
                raise TrainingDiverged(f"{mode} seed {seed} diverged at epoch {epoch}: {e}", epoch, snapshot) from e
            for p in params.values():
                p.grad = None
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                adam_step(opt, params, grads)
            except FloatingPointError as e:
                raise TrainingDiverged(f"{mode} seed {seed} diverged at epoch {epoch}: {e}", epoch, snapshot) from e
            for k in keys:
                if k in parts:
                    sums[k] += parts[k] * m
                    seen[k] += m
        nan = float("nan")
        rec = RunRecord(
            epoch=epoch,
            mode=mode,
            seed=seed,
            loss_total=sums["total"] / n,
            loss_diffusion=sums["diffusion"] / n if seen["diffusion"] else nan,
            loss_repgen=sums["repgen"] / n if seen["repgen"] else nan,
            loss_denoise=sums["denoise"] / n if seen["denoise"] else nan,
            loss_lognorm=sums["lognorm"] / n if seen["lognorm"] else nan,
            alpha=float(parts.get("alpha", nan)),
            beta=float(parts.get("beta", nan)),
            wall_time=time.perf_counter() - t0,
        )
        records.append(rec)
        if log is not None:
            log(rec)
    if mode in ("rcg", "exact-elbo"):
        x_level = next(lv for lv in setup.levels if lv.tag == "x")
        z = encode(x_level.encoder, x) if x_level.encoder else make_bundle(x, (x_level,), setup.depth, seed)["x"]
        model.prior = LatentPrior(setup.ring.n_components, seed=_child_seed(stream(seed, "prior"))).fit(z)
    final = None
    if evaluate_final:
        final = evaluate(model, setup, seed)
        records[-1].sliced_wasserstein = final.sliced_wasserstein
        records[-1].energy_distance = final.energy_distance
        records[-1].alignment_cosine = final.alignment_cosine
    return TrainResult(model, records, final)


def generate(model: TrainedModel, setup: Setup, count: int, seed: int, labels=None) -> np.ndarray:
    d, ns = model.denoiser, setup.ns
    if d.n_classes and labels is None:
        labels = np.random.default_rng(seed + 2).integers(0, d.n_classes, size=count)
    if model.mode == "rcg":
        return rcg_sample(d, model.prior, ns, count, seed)
    if model.mode == "exact-elbo":
        return hybrid_sample(d, model.dummy.data, model.prior, ns, setup.ws, count, seed)
    return ancestral_sample(d, ns, count, seed, labels=labels)


def evaluate(model: TrainedModel, setup: Setup, seed: int) -> MetricReport:
    ev = setup.eval
    samples = generate(model, setup, ev.n_samples, _child_seed(stream(seed, "sample")))
    ref, _ = setup.ring.sample(ev.n_samples, ev.reference_seed)
    sw = sliced_wasserstein(samples, ref, ev.projections, ev.projection_seed)
    ed = energy_distance(samples[: ev.energy_points], ref[: ev.energy_points])
    cov = class_coverage(samples, setup.ring.means, ev.coverage_radius).tolist()
    cos = float("nan")
    if "x" in model.heads:
        x_level = next(lv for lv in setup.levels if lv.tag == "x")
        z = make_bundle(ref, (x_level,), setup.depth, seed=ev.reference_seed)["x"]
        latent = Tensor(model.dummy.data) if model.dummy is not None else None
        cos = alignment_cosine(model.denoiser, model.heads["x"], model.head_layers["x"], ref, z, setup.ns,
                               ev.align_t, ev.reference_seed + 1, latent=latent)
    return MetricReport(sliced_wasserstein=sw, energy_distance=ed, coverage=cov, alignment_cosine=cos)
