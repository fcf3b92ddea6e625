"""Noise-prediction diffusion on small vectors: MLP denoiser, alignment heads,
the loss family and ancestral samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .representation import LatentBundle
from .schedules import Curriculum, NoiseSchedule, WeightSchedule, curriculum_weight

LOSS_MODES = ("vanilla", "repa", "rcg", "reed", "exact-elbo")


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    return Tensor(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Denoiser:
    """SiLU MLP predicting the injected noise.

    Every hidden layer sees the previous hidden state and the time embedding;
    from ``inject_layer`` onward it also sees a latent vector when
    ``latent_dim > 0``.  Hidden layers are numbered 1..depth.
    """

    def __init__(
        self,
        depth: int = 4,
        width: int = 128,
        x_dim: int = 2,
        temb_dim: int = 32,
        latent_dim: int = 0,
        inject_layer: int = 1,
        n_classes: int = 0,
        seed: int = 0,
    ):
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be positive")
        if temb_dim % 2:
            raise ValueError("time embedding dimension must be even")
        if latent_dim and not 1 <= inject_layer <= depth:
            raise ValueError(f"inject_layer must lie in 1..{depth}")
        self.depth, self.width, self.x_dim = depth, width, x_dim
        self.temb_dim, self.latent_dim, self.inject_layer = temb_dim, latent_dim, inject_layer
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        if n_classes:
            p["cls_emb"] = Tensor(rng.standard_normal((n_classes, temb_dim)) * 0.5, requires_grad=True, name="cls_emb")
        for l in range(1, depth + 1):
            fan_h = x_dim if l == 1 else width
            uses_z = latent_dim > 0 and l >= inject_layer
            fan = fan_h + temb_dim + (latent_dim if uses_z else 0)
            scale = math.sqrt(fan_h / fan)
            p[f"l{l}.w_h"] = _init_weight(rng, fan_h, width, f"l{l}.w_h")
            p[f"l{l}.w_h"].data *= scale
            p[f"l{l}.w_t"] = _init_weight(rng, temb_dim, width, f"l{l}.w_t")
            p[f"l{l}.w_t"].data *= math.sqrt(temb_dim / fan)
            if uses_z:
                p[f"l{l}.w_z"] = _init_weight(rng, latent_dim, width, f"l{l}.w_z")
                p[f"l{l}.w_z"].data *= math.sqrt(latent_dim / fan)
            p[f"l{l}.b"] = _zeros((1, width), f"l{l}.b")
        p["out.w"] = _init_weight(rng, width, x_dim, "out.w")
        p["out.b"] = _zeros((1, x_dim), "out.b")
        self.params = p

    def config(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "x_dim": self.x_dim,
            "temb_dim": self.temb_dim,
            "latent_dim": self.latent_dim,
            "inject_layer": self.inject_layer,
            "n_classes": self.n_classes,
        }

    def forward(self, x, t, latent=None, labels=None) -> tuple[Tensor, list[Tensor]]:
        """Return the noise prediction and the hidden states of layers 1..depth."""
        p = self.params
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.x_dim:
            raise ad.ShapeError(f"denoiser input must be (batch, {self.x_dim}), got {x.shape}")
        if self.latent_dim and latent is None:
            raise ValueError("this denoiser expects a latent input")
        temb = Tensor(sinusoidal_embedding(t, self.temb_dim))
        if self.n_classes:
            if labels is None:
                raise ValueError("class-conditional denoiser needs labels")
            temb = temb + Tensor(np.eye(self.n_classes)[labels]) @ p["cls_emb"]
        z = ad.as_tensor(latent) if self.latent_dim else None
        h = x
        hidden = []
        for l in range(1, self.depth + 1):
            pre = h @ p[f"l{l}.w_h"] + temb @ p[f"l{l}.w_t"] + p[f"l{l}.b"]
            if f"l{l}.w_z" in p:
                pre = pre + z @ p[f"l{l}.w_z"]
            h = ad.silu(pre)
            hidden.append(h)
        return h @ p["out.w"] + p["out.b"], hidden

    def __call__(self, x, t, latent=None, labels=None) -> Tensor:
        return self.forward(x, t, latent, labels)[0]


class AlignmentHead:
    """Three linear layers with SiLU between them, output projected to the unit sphere."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, seed: int = 0, tag: str = "x"):
        rng = np.random.default_rng(seed)
        self.tag, self.in_dim, self.out_dim = tag, in_dim, out_dim
        dims = [in_dim, hidden, hidden, out_dim]
        self.params = {}
        for i in range(3):
            self.params[f"head.{tag}.w{i}"] = _init_weight(rng, dims[i], dims[i + 1], f"head.{tag}.w{i}")
            self.params[f"head.{tag}.b{i}"] = _zeros((1, dims[i + 1]), f"head.{tag}.b{i}")

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        for i in range(3):
            h = h @ p[f"head.{self.tag}.w{i}"] + p[f"head.{self.tag}.b{i}"]
            if i < 2:
                h = ad.silu(h)
        return ad.l2_normalize(h, axis=-1)


def pool(h: Tensor) -> Tensor:
    """Mean over token axes; a (batch, width) state is already pooled."""
    while h.ndim > 2:
        h = ad.mean(h, axis=1)
    return h


@dataclass(frozen=True)
class LossConfig:
    mode: str = "vanilla"
    lambda_x: float = 0.5
    lambda_y: float = 0.5
    lognorm_weight: float = 1.0
    stopgrad_conditional: bool = False

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.lambda_x < 0 or self.lambda_y < 0 or self.lognorm_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    def lambdas(self) -> dict[str, float]:
        return {"x": self.lambda_x, "y": self.lambda_y}


@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    labels: np.ndarray | None = None
    bundle: LatentBundle | None = None
    seed: int = -1


def forward_sample(ns: NoiseSchedule, x0, t, noise) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > ns.T):
        raise ValueError(f"timesteps must lie in [1, {ns.T}]")
    abar = ns.alpha_bar[t - 1]
    if np.ndim(abar):
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def _check_finite(v: Tensor, what: str, batch: Batch) -> None:
    if not np.all(np.isfinite(v.data)):
        raise FloatingPointError(f"non-finite {what} (batch seed {batch.seed})")


def _sq_err(pred: Tensor, target) -> Tensor:
    """Mean over the batch of the per-sample squared error summed over coordinates."""
    return ad.mean(ad.sum_((pred - target) ** 2, axis=1))


def diffusion_loss(d: Denoiser, batch: Batch, ns: NoiseSchedule, latent=None) -> Tensor:
    xt = forward_sample(ns, batch.x0, batch.t, batch.noise)
    eps, _ = d.forward(xt, batch.t, latent, batch.labels)
    loss = _sq_err(eps, batch.noise)
    _check_finite(loss, "diffusion loss", batch)
    return loss


def _check_heads(heads: dict, bundle: LatentBundle) -> None:
    if bundle is None:
        raise ValueError("alignment needs a latent bundle")
    if set(heads) != set(bundle.tags):
        raise ValueError(f"heads {sorted(heads)} do not match bundle levels {sorted(bundle.tags)}")


def alignment_term(hidden: list[Tensor], heads: dict, bundle: LatentBundle, lambdas: dict) -> Tensor:
    """-sum_l lambda_l * mean cosine(z_l, head_l(h^{layer_l}))."""
    _check_heads(heads, bundle)
    total = None
    for tag, z in bundle.latents:
        pred = heads[tag](pool(hidden[bundle.align_layers[tag] - 1]))
        cos = ad.mean(ad.cosine_similarity(pred, Tensor(z), axis=-1))
        term = cos * (-float(lambdas[tag]))
        total = term if total is None else total + term
    return total


def repgen_loss(d: Denoiser, heads: dict, batch: Batch, ns: NoiseSchedule, cfg: LossConfig) -> Tensor:
    xt = forward_sample(ns, batch.x0, batch.t, batch.noise)
    _, hidden = d.forward(xt, batch.t, None, batch.labels)
    return alignment_term(hidden, heads, batch.bundle, cfg.lambdas())


def reed_loss(
    d: Denoiser,
    heads: dict,
    batch: Batch,
    ns: NoiseSchedule,
    cfg: LossConfig,
    alpha_c: Curriculum,
    beta_c: Curriculum,
    n: int,
) -> tuple[Tensor, dict]:
    """alpha(n) * diffusion + beta(n) * alignment from a single forward pass."""
    a = curriculum_weight(alpha_c, n)
    b = curriculum_weight(beta_c, n)
    xt = forward_sample(ns, batch.x0, batch.t, batch.noise)
    eps, hidden = d.forward(xt, batch.t, None, batch.labels)
    diff = _sq_err(eps, batch.noise)
    rep = alignment_term(hidden, heads, batch.bundle, cfg.lambdas())
    total = diff * a + rep * b
    _check_finite(total, "loss", batch)
    parts = {"diffusion": diff.item(), "repgen": rep.item(), "alpha": a, "beta": b, "total": total.item()}
    return total, parts


def lognorm_tensor(A: np.ndarray, sigma2: np.ndarray, mu_c: Tensor, mu_u: Tensor) -> Tensor:
    """Batch mean of A (1 - A) |mu_c - mu_u|^2 / (2 sigma2), one row per sample."""
    coef = Tensor((A * (1.0 - A) / (2.0 * sigma2))[:, None])
    return ad.mean(ad.sum_(coef * (mu_c - mu_u) ** 2, axis=1))


def posterior_mean_from_eps(ns: NoiseSchedule, xt, t, eps: Tensor) -> Tensor:
    beta = ns.beta[t - 1][:, None]
    abar = ns.alpha_bar[t - 1][:, None]
    inv_sqrt_alpha = Tensor(1.0 / np.sqrt(1.0 - beta))
    return (ad.as_tensor(xt) - eps * Tensor(beta / np.sqrt(1.0 - abar))) * inv_sqrt_alpha


def exact_elbo_loss(
    d: Denoiser,
    dummy: Tensor,
    heads: dict,
    batch: Batch,
    ns: NoiseSchedule,
    ws: WeightSchedule,
    cfg: LossConfig,
) -> tuple[Tensor, dict]:
    """Hybrid-kernel training without approximating the conditional branch.

    The conditional branch sees the clean latent of level ``x``; the
    unconditional branch sees the learnable ``dummy`` latent.  The noise target
    is matched by A_t eps_c + (1 - A_t) eps_u, the noise form of the weighted
    posterior mean.  The log-normalization term is evaluated with variance
    beta_t, which stays positive at t = 1.
    """
    if d.latent_dim == 0:
        raise ValueError("exact-ELBO training needs a latent-injected denoiser")
    z = batch.bundle["x"]
    xt = forward_sample(ns, batch.x0, batch.t, batch.noise)
    eps_c, _ = d.forward(xt, batch.t, Tensor(z), batch.labels)
    eps_u, hidden_u = d.forward(xt, batch.t, dummy, batch.labels)
    A = ws.A[batch.t - 1]
    A_col = Tensor(A[:, None])
    eps_h = eps_c * A_col + eps_u * (1.0 - A_col)
    denoise = _sq_err(eps_h, batch.noise)
    mu_c = posterior_mean_from_eps(ns, xt, batch.t, eps_c.detach() if cfg.stopgrad_conditional else eps_c)
    mu_u = posterior_mean_from_eps(ns, xt, batch.t, eps_u)
    lognorm = lognorm_tensor(A, ns.beta[batch.t - 1], mu_c, mu_u)
    total = denoise + lognorm * cfg.lognorm_weight
    parts = {"denoise": denoise.item(), "lognorm": lognorm.item()}
    if heads:
        rep = alignment_term(hidden_u, heads, batch.bundle, cfg.lambdas())
        total = total + rep
        parts["repgen"] = rep.item()
    else:
        parts["repgen"] = 0.0
    _check_finite(total, "loss", batch)
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# Sampling


def _reverse_step(ns: NoiseSchedule, x: np.ndarray, t: int, eps: np.ndarray, rng) -> np.ndarray:
    beta = ns.beta[t - 1]
    abar = ns.alpha_bar[t - 1]
    mean = (x - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + ns.sigma[t - 1] * rng.standard_normal(x.shape)


def _run_chain(ns: NoiseSchedule, count: int, dim: int, seed: int, predict) -> np.ndarray:
    if count < 1:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count, dim))
    with ad.no_grad():
        for t in range(ns.T, 0, -1):
            tt = np.full(count, t)
            x = _reverse_step(ns, x, t, predict(x, tt, t), rng)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite sampler state at step {t}")
    return x


def ancestral_sample(
    d: Denoiser, ns: NoiseSchedule, count: int, seed: int, labels=None, latent=None
) -> np.ndarray:
    """Run the reverse chain from pure noise; the last step adds no noise."""
    return _run_chain(ns, count, d.x_dim, seed, lambda x, tt, t: d(x, tt, latent, labels).data)


class LatentPrior:
    """Gaussian mixture over unit-norm training latents, sampled with a numpy generator."""

    def __init__(self, n_components: int = 8, seed: int = 0, reg_covar: float = 1e-6):
        self.n_components, self.seed, self.reg_covar = n_components, seed, reg_covar
        self.weights = self.means = self.chols = None

    @property
    def fitted(self) -> bool:
        return self.weights is not None

    def fit(self, z: np.ndarray) -> LatentPrior:
        from sklearn.mixture import GaussianMixture

        z = np.asarray(z, dtype=np.float64)
        k = min(self.n_components, len(np.unique(np.round(z, 12), axis=0)))
        gm = GaussianMixture(k, covariance_type="full", reg_covar=self.reg_covar, random_state=self.seed)
        gm.fit(z)
        self.weights, self.means = gm.weights_, gm.means_
        self.chols = np.linalg.cholesky(gm.covariances_)
        return self

    def sample(self, count: int, seed: int) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("latent prior has not been fitted")
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(self.weights), size=count, p=self.weights / self.weights.sum())
        eps = rng.standard_normal((count, self.means.shape[1]))
        z = self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], eps)
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def state(self) -> dict:
        return {"weights": self.weights, "means": self.means, "chols": self.chols}

    @classmethod
    def from_state(cls, s: dict) -> LatentPrior:
        p = cls(n_components=len(s["weights"]))
        p.weights, p.means, p.chols = s["weights"], s["means"], s["chols"]
        return p


def rcg_sample(d: Denoiser, prior: LatentPrior, ns: NoiseSchedule, count: int, seed: int) -> np.ndarray:
    """Draw latents from the prior, then sample the chain conditioned on them."""
    z = prior.sample(count, seed + 1)
    return ancestral_sample(d, ns, count, seed, latent=z)


def hybrid_sample(
    d: Denoiser, dummy: np.ndarray, prior: LatentPrior, ns: NoiseSchedule, ws: WeightSchedule, count: int, seed: int
) -> np.ndarray:
    """Reverse chain driven by A_t eps(z) + (1 - A_t) eps(dummy) with z drawn from the prior."""
    z = prior.sample(count, seed + 1)
    dummy = np.broadcast_to(np.asarray(dummy).reshape(1, -1), (count, d.latent_dim))

    def predict(x, tt, t):
        A = ws.A[t - 1]
        return A * d(x, tt, z).data + (1.0 - A) * d(x, tt, dummy).data

    return _run_chain(ns, count, d.x_dim, seed, predict)
