"""Stage 2: learning the tilted prior.

The prior is an exponentially tilted Gaussian, exp(-f(z)) * N(z; 0, I) up
to its normalizer. The flow sampler realizes the variational form of the
log-normalizer, which turns prior learning into an alternating scheme:
the sampler minimizes an upper-bound objective, the energy (acting as a
critic) maximizes a gradient-penalized lower bound, five critic updates
per sampler update by default. Also hosts the latent-flow ML baseline
and an NCE density-ratio baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Adam, Tensor, backward, no_grad
from .errors import NonFiniteError, ShapeMismatchError, TrainingDivergedError
from .gauss import standard_normal_logpdf
from .models import EnergyFunction, FlowSampler, default_sizes, energy_input_grad
from .rng import Rng
from .stage1 import aggregate_posterior_sample

DIVERGENCE_LIMIT = 1e6


@dataclass
class Stage2Config:
    lambda_gp: float = 10.0
    critic_steps_per_sampler: int = 5
    epochs: int = 150
    batch_size: int = 100
    lr_energy: float = 2e-4
    lr_sampler: float = 2e-4
    seed: int = 0
    # Architecture overrides; None picks defaults by latent width.
    energy_hidden: int | None = None
    flow_hidden: int | None = None
    flow_layers: int | None = None
    # Frozen latent cache instead of fresh aggregate-posterior draws.
    use_latent_cache: bool = False
    cache_size: int = 10000

    def __post_init__(self):
        if self.lambda_gp <= 0:
            raise ValueError(f"lambda_gp must be positive, got {self.lambda_gp}")
        if self.critic_steps_per_sampler < 1:
            raise ValueError(
                f"critic_steps_per_sampler must be >= 1, got {self.critic_steps_per_sampler}"
            )
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")

    def sizes(self, nz: int) -> dict:
        s = default_sizes(nz)
        if self.energy_hidden is not None:
            s["nd"] = self.energy_hidden
        if self.flow_hidden is not None:
            s["nh"] = self.flow_hidden
        if self.flow_layers is not None:
            s["n_layers"] = self.flow_layers
        return s


@dataclass
class ObjectiveTerms:
    """Logged per-iteration quantities of the alternating objectives.

    upper = -e_q_f + e_g_f + kl_g_p0 (the sampler objective plus the
    critic's data term, up to the stage-1 ELBO constant) and
    lower = upper - lambda * gp, so lower <= upper holds by construction.
    """

    e_q_f: float
    e_g_f: float
    kl_g_p0: float
    gp: float
    upper: float
    lower: float
    logz_est: float


@dataclass
class PriorTrainHistory:
    rows: list = field(default_factory=list)
    critic_updates: int = 0
    sampler_updates: int = 0


def _flow_sample_terms(f: EnergyFunction, g: FlowSampler, n: int, rng: Rng):
    """Shared sampler-side quantities for one fresh noise batch.

    Returns (e_g_f, kl_est) as tensors: the mean energy under the flow
    pushforward and the pathwise single-sample KL(p_g || p_0) estimate
    log p_g(z) - log p_0(z) with z = g(eps), log p_g(z) = log N(eps) - logdet.
    """
    eps = Tensor(rng.normal((n, g.nz)))
    z, logdet = g.forward(eps)
    e_g_f = f(z).mean()
    log_pg = standard_normal_logpdf(eps) - logdet
    kl_est = (log_pg - standard_normal_logpdf(z)).mean()
    return e_g_f, kl_est


def sampler_loss(f: EnergyFunction, g: FlowSampler, n: int, seed) -> Tensor:
    """Monte-Carlo sampler objective E_g[f] + KL(p_g || p_0).

    Differentiable w.r.t. the flow parameters only; the energy is treated
    as a constant. Minimizing it tightens the upper bound; its negation
    at the optimum is the variational log-normalizer.
    """
    if n <= 0:
        raise ValueError(f"batch size must be positive, got {n}")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    e_g_f, kl_est = _flow_sample_terms(f.detached(), g, n, rng)
    loss = e_g_f + kl_est
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"sampler_loss is not finite ({loss.data})")
    return loss


def _gradient_penalty(f: EnergyFunction, z_q: np.ndarray, z_g: np.ndarray, rng: Rng) -> Tensor:
    if z_q.shape != z_g.shape:
        raise ShapeMismatchError(f"gradient_penalty: {z_q.shape} vs {z_g.shape}")
    u = rng.uniform((z_q.shape[0], 1))
    z_hat = u * z_q + (1.0 - u) * z_g
    grad = energy_input_grad(f, z_hat)
    norm = grad.square().sum(axis=-1).sqrt()
    return (norm - 1.0).square().mean()


def gradient_penalty(f: EnergyFunction, z_q, z_g, seed) -> Tensor:
    """Mean squared deviation of the energy's input-gradient norm from 1,
    at uniform interpolates between paired points of the two batches."""
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    z_q = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q, dtype=np.float64)
    z_g = z_g.data if isinstance(z_g, Tensor) else np.asarray(z_g, dtype=np.float64)
    return _gradient_penalty(f, z_q, z_g, rng)


def critic_loss(f: EnergyFunction, g: FlowSampler, z_q, lambda_gp: float, seed) -> Tensor:
    """E_q[f] - E_g[f] + lambda * gradient penalty.

    Minimizing over the energy parameters maximizes the penalized lower
    bound; the flow batch is detached so no gradient reaches the sampler.
    """
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    z_q = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q, dtype=np.float64)
    with no_grad():
        z_g, _ = g.forward(Tensor(rng.normal((z_q.shape[0], g.nz))))
    z_g = z_g.data
    loss = f(Tensor(z_q)).mean() - f(Tensor(z_g)).mean() + _gradient_penalty(
        f, z_q, z_g, rng
    ) * lambda_gp
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"critic_loss is not finite ({loss.data})")
    return loss


def log_z_variational_samples(f: EnergyFunction, g: FlowSampler, n: int, seed) -> np.ndarray:
    """Per-sample terms of the variational log-normalizer estimate."""
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    with no_grad():
        eps = Tensor(rng.normal((n, g.nz)))
        z, logdet = g.forward(eps)
        vals = f(z).data[:, 0]
        log_pg = standard_normal_logpdf(eps).data - logdet.data
        log_p0 = standard_normal_logpdf(z).data
    return -vals - (log_pg - log_p0)


def log_z_variational_estimate(f: EnergyFunction, g: FlowSampler, n: int, seed) -> float:
    """-E_g[f] - KL(p_g || p_0) estimate: a stochastic lower bound of the
    log-normalizer for any sampler, tight when the sampler matches the
    tilted prior."""
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    vals = log_z_variational_samples(f, g, n, seed)
    est = float(vals.mean())
    if not np.isfinite(est):
        raise NonFiniteError(f"log-normalizer estimate is not finite ({est})")
    return est


def _evaluate_terms(f, g, z_q: np.ndarray, n: int, lambda_gp: float, rng: Rng) -> ObjectiveTerms:
    with no_grad():
        e_q_f = float(f(Tensor(z_q)).data.mean())
        eps = Tensor(rng.normal((n, g.nz)))
        z, logdet = g.forward(eps)
        e_g_f = float(f(z).data.mean())
        log_pg = standard_normal_logpdf(eps).data - logdet.data
        kl = float((log_pg - standard_normal_logpdf(z).data).mean())
        gp = float(_gradient_penalty(f, z_q, z.data, rng).data)
    upper = -e_q_f + e_g_f + kl
    return ObjectiveTerms(
        e_q_f=e_q_f,
        e_g_f=e_g_f,
        kl_g_p0=kl,
        gp=gp,
        upper=upper,
        lower=upper - lambda_gp * gp,
        logz_est=-(e_g_f + kl),
    )


def train_tilted_prior(sample_q, nz: int, cfg: Stage2Config, iters_per_epoch: int):
    """Alternating optimization against a latent sample source.

    ``sample_q(batch_size)`` must return fresh aggregate-posterior draws.
    Per iteration: k critic updates on fresh batches, one sampler update,
    then a read-only term evaluation appended to the history.
    """
    rng = Rng(cfg.seed)
    init_rng = rng.spawn()
    sizes = cfg.sizes(nz)
    f = EnergyFunction(nz, sizes["nd"], init_rng)
    g = FlowSampler(nz, sizes["nh"], sizes["n_layers"], init_rng)
    g.initialize_norm_inverse(sample_q(cfg.batch_size))

    opt_f = Adam(f.parameters(), lr=cfg.lr_energy, beta1=0.5, beta2=0.9)
    opt_g = Adam(g.parameters(), lr=cfg.lr_sampler, beta1=0.5, beta2=0.9)
    history = PriorTrainHistory()

    for _epoch in range(cfg.epochs):
        for _it in range(iters_per_epoch):
            try:
                for _ in range(cfg.critic_steps_per_sampler):
                    z_q = sample_q(cfg.batch_size)
                    opt_f.zero_grad()
                    loss = critic_loss(f, g, z_q, cfg.lambda_gp, rng)
                    backward(loss)
                    opt_f.step()
                    history.critic_updates += 1
                opt_g.zero_grad()
                loss = sampler_loss(f, g, cfg.batch_size, rng)
                backward(loss)
                opt_g.step()
                history.sampler_updates += 1
            except NonFiniteError as e:
                raise TrainingDivergedError(f"stage-2 loss went non-finite: {e}") from e

            terms = _evaluate_terms(
                f, g, sample_q(cfg.batch_size), cfg.batch_size, cfg.lambda_gp, rng
            )
            if abs(terms.e_q_f) > DIVERGENCE_LIMIT or abs(terms.e_g_f) > DIVERGENCE_LIMIT:
                raise TrainingDivergedError(
                    f"stage-2 diverged: e_q_f={terms.e_q_f}, e_g_f={terms.e_g_f}"
                )
            history.rows.append(terms)
    return f, g, history


def _qagg_source(vae, data, cfg: Stage2Config, rng: Rng):
    if cfg.use_latent_cache:
        cache = aggregate_posterior_sample(vae, data, cfg.cache_size, rng.spawn())
        pick = rng.spawn()

        def sample(n):
            return cache[pick.integers(0, cache.shape[0], n)]

        return sample
    draws = rng.spawn()

    def sample(n):
        return aggregate_posterior_sample(vae, data, n, draws.spawn())

    return sample


def train_prior(vae, data, cfg: Stage2Config):
    """Learn the tilted prior over a trained VAE's aggregate posterior.

    Returns (energy, flow, history); an epoch is one pass of latent
    batches through the critic schedule.
    """
    data = np.asarray(data, dtype=np.float64)
    rng = Rng(cfg.seed)
    sample_q = _qagg_source(vae, data, cfg, rng.spawn())
    iters = max(1, data.shape[0] // cfg.batch_size)
    return train_tilted_prior(sample_q, vae.nz, cfg, iters)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def train_latent_flow_baseline(vae, data, cfg: Stage2Config):
    """Maximum-likelihood flow fit of the aggregate posterior.

    Same flow architecture as the tilted-prior sampler; returns
    (flow, history) with per-epoch mean negative log-likelihood.
    """
    data = np.asarray(data, dtype=np.float64)
    rng = Rng(cfg.seed)
    sample_q = _qagg_source(vae, data, cfg, rng.spawn())
    init_rng = rng.spawn()
    sizes = cfg.sizes(vae.nz)
    g = FlowSampler(vae.nz, sizes["nh"], sizes["n_layers"], init_rng)
    g.initialize_norm_inverse(sample_q(cfg.batch_size))
    opt = Adam(g.parameters(), lr=cfg.lr_sampler)
    iters = max(1, data.shape[0] // cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        nll_sum = 0.0
        for _ in range(iters):
            z_q = sample_q(cfg.batch_size)
            opt.zero_grad()
            nll = -g.log_pdf(Tensor(z_q)).mean()
            if not np.isfinite(nll.data):
                raise TrainingDivergedError(f"latent-flow NLL diverged ({nll.data})")
            backward(nll)
            opt.step()
            nll_sum += nll.item()
        history.append({"epoch": epoch, "nll": nll_sum / iters})
    return g, history


def nce_balanced_batch(sample_q, noise_rng: Rng, nz: int, batch_size: int):
    """Equal-count positive (aggregate posterior) / negative (noise) batch."""
    z_q = sample_q(batch_size)
    z_p = noise_rng.normal((batch_size, nz))
    return z_q, z_p


def nce_loss(clf: EnergyFunction, z_q, z_p) -> Tensor:
    """Balanced logistic loss; the optimal logit is log(q_agg / p_0)."""
    logit_q = clf(Tensor(z_q) if not isinstance(z_q, Tensor) else z_q)
    logit_p = clf(Tensor(z_p) if not isinstance(z_p, Tensor) else z_p)
    return ((-logit_q).softplus().mean() + logit_p.softplus().mean()) * 0.5


def train_nce_ratio_baseline(vae, data, cfg: Stage2Config):
    """Logistic discrimination of aggregate-posterior vs N(0, I) samples.

    The learned logit approximates log(q_agg / p_0); batches are class
    balanced. Returns (classifier, history).
    """
    data = np.asarray(data, dtype=np.float64)
    rng = Rng(cfg.seed)
    sample_q = _qagg_source(vae, data, cfg, rng.spawn())
    init_rng, noise_rng = rng.spawn(), rng.spawn()
    sizes = cfg.sizes(vae.nz)
    clf = EnergyFunction(vae.nz, sizes["nd"], init_rng)
    opt = Adam(clf.parameters(), lr=1e-3)
    iters = max(1, data.shape[0] // cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for _ in range(iters):
            z_q, z_p = nce_balanced_batch(sample_q, noise_rng, vae.nz, cfg.batch_size)
            opt.zero_grad()
            loss = nce_loss(clf, z_q, z_p)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"NCE loss diverged ({loss.data})")
            backward(loss)
            opt.step()
            loss_sum += loss.item()
        history.append({"epoch": epoch, "loss": loss_sum / iters})
    return clf, history
