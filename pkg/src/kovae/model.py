"""Sequential VAE with a linear (Koopman) latent prior.

Posterior: [NCDE embedding] -> GRU -> batch-norm -> Gaussian heads -> z_{1:T}.
Prior: GRU free-run over its own samples -> Gaussian heads -> zbar_{0:T};
a least-squares operator A fitted on zbar gives z_t = A zbar_{t-1}.
Decoder: GRU -> linear -> sigmoid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import SeriesBatch, denormalize_values
from .koopman import EigTargets, KoopmanOperator, eig_penalty, fit_from_sequences, rollout
from .ncde import ControlPath, NCDEConfig, NCDEEmbedding, build_path


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or Inf."""

    def __init__(self, terms: dict):
        self.terms = terms
        bad = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss term(s): {bad}")


@dataclass
class ModelConfig:
    input_dim: int
    latent_dim: int = 16
    enc_hidden: int = 48
    dec_hidden: int = 48
    prior_hidden: int = 48
    enc_layers: int = 1
    dec_layers: int = 1
    mode: str = "regular"
    ncde: NCDEConfig = field(default_factory=NCDEConfig)
    logvar_min: float = -8.0
    logvar_max: float = 8.0

    def __post_init__(self):
        if self.mode not in ("regular", "irregular"):
            raise ValueError(f"mode must be 'regular' or 'irregular', got {self.mode!r}")
        if isinstance(self.ncde, dict):
            self.ncde = NCDEConfig(**self.ncde)


@dataclass
class LatentSequence:
    z: torch.Tensor
    mean: torch.Tensor
    logvar: torch.Tensor
    eps: torch.Tensor | None = None

    @property
    def var(self) -> torch.Tensor:
        return self.logvar.exp()


@dataclass
class PriorOutputs:
    z_bar: LatentSequence  # steps 0..T
    z: torch.Tensor  # A zbar_{t-1}, steps 1..T
    op: KoopmanOperator


@dataclass
class LossWeights:
    alpha: float = 0.009
    beta: float = 0.0009
    gamma_eig: float = 1.0
    eig_targets: tuple[float, ...] = ()


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    pred: torch.Tensor
    kl: torch.Tensor
    eig: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float
    gamma_eig: float

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("recon", "pred", "kl", "eig", "total")}


def gaussian_kl(mean_q, logvar_q, mean_p, logvar_p):
    """Elementwise KL(N(mean_q, var_q) || N(mean_p, var_p))."""
    return 0.5 * (logvar_p - logvar_q + (logvar_q.exp() + (mean_q - mean_p) ** 2) / logvar_p.exp() - 1.0)


def _sample(mean, logvar, generator=None, eps=None):
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + (0.5 * logvar).exp() * eps, eps


class KoVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.latent_dim
        enc_in = cfg.input_dim
        self.embedding = None
        if cfg.mode == "irregular":
            self.embedding = NCDEEmbedding(cfg.input_dim, cfg.ncde)
            enc_in = cfg.ncde.hidden_dim
        self.encoder = nn.GRU(enc_in, cfg.enc_hidden, num_layers=cfg.enc_layers, batch_first=True)
        self.enc_norm = nn.BatchNorm1d(cfg.enc_hidden)
        self.post_mean = nn.Linear(cfg.enc_hidden, k)
        self.post_logvar = nn.Linear(cfg.enc_hidden, k)

        self.decoder = nn.GRU(k, cfg.dec_hidden, num_layers=cfg.dec_layers, batch_first=True)
        self.dec_out = nn.Linear(cfg.dec_hidden, cfg.input_dim)

        self.prior_rnn = nn.GRU(k, cfg.prior_hidden, batch_first=True)
        self.prior_mean = nn.Linear(cfg.prior_hidden, k)
        self.prior_logvar = nn.Linear(cfg.prior_hidden, k)

        # NaN until set from the training data
        self.register_buffer("norm_lo", torch.full((cfg.input_dim,), math.nan, dtype=torch.float64))
        self.register_buffer("norm_hi", torch.full((cfg.input_dim,), math.nan, dtype=torch.float64))
        self.register_buffer("time_step", torch.ones((), dtype=torch.float64))

    def _clamp(self, logvar):
        return logvar.clamp(self.cfg.logvar_min, self.cfg.logvar_max)

    # posterior
    def encode(self, x: torch.Tensor | None = None, path: ControlPath | None = None, t_len: int | None = None):
        """Posterior mean and log-variance [N, T, k]."""
        if self.embedding is not None:
            if path is None:
                raise ValueError("irregular mode needs a control path")
            x = self.embedding(path, t_len)
        elif x is None:
            raise ValueError("regular mode needs a value tensor")
        h, _ = self.encoder(x)
        n, t, hdim = h.shape
        h = self.enc_norm(h.reshape(n * t, hdim)).reshape(n, t, hdim)
        return self.post_mean(h), self._clamp(self.post_logvar(h))

    def posterior(self, x=None, path=None, t_len=None, sampling="stochastic", generator=None, eps=None) -> LatentSequence:
        mean, logvar = self.encode(x, path, t_len)
        if sampling == "mean":
            return LatentSequence(mean, mean, logvar)
        if sampling != "stochastic":
            raise ValueError(f"unknown sampling mode {sampling!r}")
        z, eps = _sample(mean, logvar, generator, eps)
        return LatentSequence(z, mean, logvar, eps)

    # prior
    def _prior_heads(self, h):
        return self.prior_mean(h), self._clamp(self.prior_logvar(h))

    def prior_conditional(self, z: torch.Tensor):
        """Teacher-forced p(z_t | z_{<t}) for t = 1..T given latents z [N, T, k].

        The first step uses the heads at the zero state, later steps the GRU
        state after consuming z_1..z_{t-1}, matching the free-run chain.
        """
        h0 = torch.zeros(z.shape[0], 1, self.cfg.prior_hidden, dtype=z.dtype, device=z.device)
        h, _ = self.prior_rnn(z[:, :-1])
        return self._prior_heads(torch.cat([h0, h], dim=1))

    def sample_prior_chain(self, n: int, t_len: int, generator=None) -> LatentSequence:
        """zbar_{0:T}: zbar_0 from the heads at the zero state, then a GRU
        free-run whose input is the previous sample.

        The noise scale enters the samples detached. The chain only feeds the
        prediction and eigenvalue terms, and without the detach their
        cheapest minimizer is shrinking the prior noise rather than making
        the mean dynamics linear; the scale stays trained by the KL term.
        """
        p = self.prior_mean.weight
        h0 = torch.zeros(n, self.cfg.prior_hidden, dtype=p.dtype, device=p.device)
        m, lv = self._prior_heads(h0)
        zt, e = _sample(m, lv.detach(), generator)
        zs, ms, lvs, es = [zt], [m], [lv], [e]
        state = None
        for _ in range(t_len):
            out, state = self.prior_rnn(zt[:, None], state)
            m, lv = self._prior_heads(out[:, 0])
            zt, e = _sample(m, lv.detach(), generator)
            zs.append(zt)
            ms.append(m)
            lvs.append(lv)
            es.append(e)
        st = lambda xs: torch.stack(xs, dim=1)
        return LatentSequence(st(zs), st(ms), st(lvs), st(es))

    def prior_rollout(self, n: int, t_len: int, generator=None) -> PriorOutputs:
        if t_len < 2:
            raise ValueError("prior rollout needs t_len >= 2")
        return prior_from_chain(self.sample_prior_chain(n, t_len, generator))

    # decoder
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent width {z.shape[-1]} != {self.cfg.latent_dim}")
        h, _ = self.decoder(z)
        return torch.sigmoid(self.dec_out(h))


def prior_from_chain(z_bar: LatentSequence) -> PriorOutputs:
    """Fit the pooled operator on zbar_{0:T} and form z_t = A zbar_{t-1}."""
    op = fit_from_sequences(z_bar.z)
    return PriorOutputs(z_bar=z_bar, z=rollout(op, z_bar.z), op=op)


def masked_sse(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Squared error summed over observed steps and features, averaged over the batch."""
    sq = (x - x_hat) ** 2
    if mask is not None:
        sq = sq * mask.to(sq.dtype)[..., None]
    return sq.sum() / x.shape[0]


def compute_loss(x: torch.Tensor, mask: torch.Tensor | None, posterior: LatentSequence,
                 prior_cond: tuple[torch.Tensor, torch.Tensor], prior: PriorOutputs,
                 recon: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    """recon + alpha*pred + beta*kl + gamma_eig*eig.

    Every data term is per sequence (summed over steps and dimensions) and
    averaged over the batch, so the three terms keep the relative scale of
    the sequence log-likelihoods they stand for. recon covers observed
    entries only; pred compares A zbar_{t-1} with zbar_t; kl is the closed
    form against the teacher-forced prior.
    """
    rec = masked_sse(x, recon, mask)
    pred = ((prior.z - prior.z_bar.z[:, 1:]) ** 2).sum() / prior.z.shape[0]
    mean_p, logvar_p = prior_cond
    kl = gaussian_kl(posterior.mean, posterior.logvar, mean_p, logvar_p).sum(dim=(1, 2)).mean()
    if weights.eig_targets:
        eig = eig_penalty(prior.op, EigTargets(weights.eig_targets))
    else:
        eig = rec.new_zeros(())
    total = rec + weights.alpha * pred + weights.beta * kl + weights.gamma_eig * eig
    terms = {"recon": rec, "pred": pred, "kl": kl, "eig": eig, "total": total}
    bad = {k: float(v) for k, v in terms.items() if not torch.isfinite(v)}
    if bad:
        raise NonFiniteLossError(bad)
    return LossBreakdown(rec, pred, kl, eig, total, weights.alpha, weights.beta, weights.gamma_eig)


@dataclass
class ModelInputs:
    """Torch views of a normalized batch for one forward pass."""

    x: torch.Tensor
    mask: torch.Tensor
    path: ControlPath | None = None

    @property
    def t_len(self) -> int:
        return self.x.shape[1]


def model_inputs(batch: SeriesBatch, model: KoVAE, path: ControlPath | None = None) -> ModelInputs:
    if np.isnan(batch.values).any():
        raise ValueError("NaN in input values")
    dtype = model.post_mean.weight.dtype
    x = torch.as_tensor(batch.values, dtype=dtype)
    mask = torch.as_tensor(batch.mask)
    if model.cfg.mode == "irregular" and path is None:
        path = build_path(batch)
    return ModelInputs(x, mask, path)


def forward_loss(model: KoVAE, inputs: ModelInputs, weights: LossWeights, generator=None):
    """One training forward pass; returns (LossBreakdown, posterior, prior outputs, reconstruction)."""
    post = model.posterior(inputs.x, inputs.path, inputs.t_len, generator=generator)
    recon = model.decode(post.z)
    cond = model.prior_conditional(post.z)
    prior = model.prior_rollout(inputs.x.shape[0], inputs.t_len, generator)
    return compute_loss(inputs.x, inputs.mask, post, cond, prior, recon, weights), post, prior, recon


def posterior_forward(batch: SeriesBatch, model: KoVAE, mode: str | None = None,
                      sampling: str = "stochastic", seed: int | None = None) -> LatentSequence:
    """Posterior latents for a normalized batch."""
    if mode is not None and mode != model.cfg.mode:
        raise ValueError(f"model was built for {model.cfg.mode} mode, not {mode}")
    if not batch.normalized:
        raise ValueError("posterior_forward expects a normalized batch")
    inputs = model_inputs(batch, model)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return model.posterior(inputs.x, inputs.path, inputs.t_len, sampling=sampling, generator=gen)


def set_normalization(model: KoVAE, batch: SeriesBatch) -> None:
    if not batch.normalized:
        raise ValueError("batch carries no normalization ranges")
    model.norm_lo.copy_(torch.as_tensor(batch.norm_lo, dtype=torch.float64))
    model.norm_hi.copy_(torch.as_tensor(batch.norm_hi, dtype=torch.float64))
    ts = batch.timestamps
    if ts.shape[1] > 1:
        model.time_step.fill_(float(np.median(np.diff(ts, axis=1))))


@torch.no_grad()
def generate(model: KoVAE, n: int, t_len: int, seed: int = 0, normalized: bool = False) -> SeriesBatch:
    """Sample the prior, decode, and map back to data units."""
    if not bool(torch.isfinite(model.norm_lo).all()):
        raise ValueError("model carries no normalization metadata")
    was_training = model.training
    model.eval()
    try:
        gen = torch.Generator().manual_seed(int(seed))
        prior = model.prior_rollout(n, t_len, gen)
        x = model.decode(prior.z).double().cpu().numpy()
    finally:
        model.train(was_training)
    lo = model.norm_lo.cpu().numpy()
    hi = model.norm_hi.cpu().numpy()
    timestamps = np.broadcast_to(np.arange(t_len) * float(model.time_step), (n, t_len)).copy()
    mask = np.ones((n, t_len), dtype=bool)
    if normalized:
        return SeriesBatch(x, timestamps, mask, norm_lo=lo, norm_hi=hi)
    return SeriesBatch(denormalize_values(x, lo, hi), timestamps, mask)


@torch.no_grad()
def reconstruct(model: KoVAE, batch: SeriesBatch) -> np.ndarray:
    """Mean-mode posterior decoded, in normalized units [N, T, d]."""
    was_training = model.training
    model.eval()
    try:
        post = posterior_forward(batch, model, sampling="mean")
        return model.decode(post.z).double().cpu().numpy()
    finally:
        model.train(was_training)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
