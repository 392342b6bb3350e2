"""
Dense variational autoencoder over one-hot sequences.

The encoder maps a one-hot sequence through three ELU layers to the mean and
log-variance of a diagonal Gaussian posterior; the decoder mirrors it and ends
in a sigmoid layer read as ``L*q`` independent Bernoulli units. Training
minimizes the summed Bernoulli cross-entropy plus the analytic KL to a unit
normal prior, with no rescaling of the reconstruction term.

All computations run in float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .msa import Alphabet, Msa

logger = logging.getLogger(__name__)

VAE_VERSION = "svae-1"
DTYPE = torch.float64


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VaeArch:
    L: int
    q: int
    hidden_widths: Sequence[int] = (250, 250, 250)
    latent_dim: int = 7
    dropout_rate: float = 0.30
    use_batch_norm: bool = True

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.L < 1 or self.q < 2:
            raise ValueError("need L >= 1 and q >= 2")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def desk(cls, L: int, q: int, **kw) -> "VaeArch":
        """Small-alignment preset: width ``max(32, L)`` and no dropout.

        With only ``L*q`` of order 100 input units, 30% dropout removes most of
        the signal the latent code could carry and the KL term then drives the
        majority of latent dimensions onto the prior.
        """
        w = max(32, L)
        kw.setdefault("dropout_rate", 0.0)
        return cls(L, q, (w, w, w), **kw)

    @classmethod
    def full(cls, L: int, q: int, **kw) -> "VaeArch":
        """Full-size preset: three 250-wide layers, 30% dropout, batch norm."""
        return cls(L, q, (250, 250, 250), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


@dataclass
class TrainConfig:
    epochs: int = 32
    batch_size: int = 200
    validation_fraction: float = 0.10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Small-alignment schedule: 128 epochs instead of 32.

        With tens of thousands of sequences an epoch is a short pass; after 32
        of them some latent dimensions have not yet moved off the prior and
        are flagged as collapsed. Longer training lets them activate.
        """
        kw.setdefault("epochs", 128)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class SVAE(nn.Module):
    """Encoder/decoder pair; ``arch`` records the layout.

    Dropout follows the first encoder layer and the middle decoder layer;
    batch normalization (optional) sits on the middle encoder layer.
    """

    def __init__(self, arch: VaeArch, alphabet: Optional[Alphabet] = None):
        super().__init__()
        self.arch = arch
        self.alphabet = alphabet or Alphabet.letters(arch.q)
        D = arch.L * arch.q
        widths = list(arch.hidden_widths)
        mid = len(widths) // 2

        enc = []
        prev = D
        for k, w in enumerate(widths):
            enc.append(nn.Linear(prev, w))
            if k == mid and arch.use_batch_norm:
                enc.append(nn.BatchNorm1d(w))
            enc.append(nn.ELU())
            if k == 0 and arch.dropout_rate > 0:
                enc.append(nn.Dropout(arch.dropout_rate))
            prev = w
        self.encoder = nn.Sequential(*enc)
        self.mu_head = nn.Linear(prev, arch.latent_dim)
        self.logvar_head = nn.Linear(prev, arch.latent_dim)

        dec = []
        prev = arch.latent_dim
        rev = widths[::-1]
        for k, w in enumerate(rev):
            dec.append(nn.Linear(prev, w))
            dec.append(nn.ELU())
            if k == len(rev) // 2 and arch.dropout_rate > 0:
                dec.append(nn.Dropout(arch.dropout_rate))
            prev = w
        dec.append(nn.Linear(prev, D))
        self.decoder = nn.Sequential(*dec)
        self.to(DTYPE)

    def posterior(self, x):
        hidden = self.encoder(x)
        return self.mu_head(hidden), self.logvar_head(hidden)

    def logits(self, z):
        return self.decoder(z)

    def forward(self, x, generator=None):
        mu, logvar = self.posterior(x)
        eps = torch.randn(mu.shape, dtype=DTYPE, generator=generator)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.logits(z), mu, logvar


def one_hot(data, q: int) -> torch.Tensor:
    data = torch.as_tensor(np.asarray(data, dtype=np.int64))
    return F.one_hot(data, q).reshape(data.shape[0], -1).to(DTYPE)


def init_vae(arch: VaeArch, seed: int, alphabet: Optional[Alphabet] = None) -> SVAE:
    """Fresh model; weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    model = SVAE(arch, alphabet)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()
    model.eval()
    return model


def loss_terms(model: SVAE, x: torch.Tensor, generator=None):
    """Per-sample reconstruction cross-entropy and KL (both summed, not averaged)."""
    logits, mu, logvar = model(x, generator)
    recon = F.binary_cross_entropy_with_logits(logits, x, reduction="none").sum(dim=1)
    kl = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(dim=1)
    return recon, kl


@dataclass
class TrainResult:
    model: SVAE
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{t:.10g},{v:.10g}" for e, t, v in self.history]
        return "\n".join(lines) + "\n"


def _eval_loss(model: SVAE, x: torch.Tensor, generator) -> float:
    model.eval()
    with torch.no_grad():
        recon, kl = loss_terms(model, x, generator)
    return float((recon + kl).mean())


def train_vae(msa: Msa, arch: Optional[VaeArch] = None, config: Optional[TrainConfig] = None) -> TrainResult:
    """Fit with Adam for a fixed number of epochs (no early stopping).

    A ``validation_fraction`` of the rows is held out; the per-epoch mean
    training and validation losses are recorded.
    """
    config = config or TrainConfig()
    arch = arch or VaeArch.desk(msa.L, msa.q)
    if (arch.L, arch.q) != (msa.L, msa.q):
        raise ValueError("architecture does not match alignment shape")
    if msa.N < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} sequences, got {msa.N}")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(msa.N)
    n_val = max(1, int(round(config.validation_fraction * msa.N)))
    x_all = one_hot(msa.data, msa.q)
    x_val = x_all[perm[:n_val]]
    x_train = x_all[perm[n_val:]]

    model = init_vae(arch, config.seed, msa.alphabet)
    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=(config.beta1, config.beta2), eps=config.eps,
    )
    gen = torch.Generator().manual_seed(int(config.seed) + 1)
    eval_gen = torch.Generator().manual_seed(int(config.seed) + 2)
    history = []
    n_train = x_train.shape[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(config.seed))  # dropout masks
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(n_train, generator=gen)
            tot, count = 0.0, 0
            for start in range(0, n_train, config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2 and arch.use_batch_norm:
                    continue
                recon, kl = loss_terms(model, x_train[idx], gen)
                loss = (recon + kl).mean()
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot += loss.item() * len(idx)
                count += len(idx)
            val = _eval_loss(model, x_val, eval_gen)
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            history.append((epoch, tot / count, val))
            logger.debug("epoch %d train %.4f val %.4f", epoch, tot / count, val)
    model.eval()
    return TrainResult(model, history)


def gradient_check(model: SVAE, x: torch.Tensor, n_coords: int = 100, seed: int = 0,
                   step: float = 1e-6) -> np.ndarray:
    """Relative errors of autograd loss gradients against central differences.

    The same reparameterization noise is reused for every evaluation so the
    loss is a deterministic function of the parameters. Returns one relative
    error per randomly chosen parameter coordinate.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    rng = np.random.default_rng(seed)
    coords = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)

    def loss_value():
        recon, kl = loss_terms(model, x, torch.Generator().manual_seed(int(seed)))
        return (recon + kl).mean()

    model.zero_grad()
    loss_value().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()
    errors = []
    offsets = np.cumsum([0] + sizes)
    with torch.no_grad():
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[k].view(-1)
            j = int(c - offsets[k])
            orig = flat[j].item()
            flat[j] = orig + step
            up = loss_value().item()
            flat[j] = orig - step
            dn = loss_value().item()
            flat[j] = orig
            numeric = (up - dn) / (2 * step)
            scale = max(abs(numeric), abs(analytic[c]), 1e-6)
            errors.append(abs(numeric - analytic[c]) / scale)
    return np.asarray(errors)


# --------------------------------------------------------------------------
# evaluation


def _as_batch(seq, arch: VaeArch) -> torch.Tensor:
    seq = np.asarray(seq)
    if seq.ndim == 1:
        seq = seq[None, :]
    if seq.shape[1] != arch.L:
        raise ValueError(f"sequence length {seq.shape[1]} != L={arch.L}")
    if seq.min() < 0 or seq.max() >= arch.q:
        raise ValueError("residue code out of range")
    return one_hot(seq, arch.q)


def encode(model: SVAE, seq):
    """Posterior mean and variance for one sequence or an ``(N, L)`` batch."""
    model.eval()
    single = np.ndim(seq) == 1
    with torch.no_grad():
        mu, logvar = model.posterior(_as_batch(seq, model.arch))
    mu, var = mu.numpy(), logvar.exp().numpy()
    return (mu[0], var[0]) if single else (mu, var)


def decode(model: SVAE, z) -> np.ndarray:
    """Bernoulli table(s) of shape ``(L, q)`` for latent vector(s) ``z``."""
    model.eval()
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    with torch.no_grad():
        p = torch.sigmoid(model.logits(torch.as_tensor(np.atleast_2d(z))))
    p = p.numpy().reshape(-1, model.arch.L, model.arch.q)
    return p[0] if single else p


def _log_weights(model: SVAE, x: torch.Tensor, n_samples: int, gen: torch.Generator):
    """``log p(S|Z)``, ``log p(Z)`` and ``log q(Z|S)`` for ``n_samples`` posterior draws."""
    mu, logvar = model.posterior(x)
    std = torch.exp(0.5 * logvar)
    eps = torch.randn((n_samples,) + mu.shape, dtype=DTYPE, generator=gen)
    z = mu + std * eps  # (n, B, l)
    logits = model.logits(z)
    log_px = -F.binary_cross_entropy_with_logits(
        logits, x.expand_as(logits), reduction="none").sum(dim=-1)
    half_log2pi = 0.5 * math.log(2 * math.pi)
    log_pz = (-0.5 * z ** 2 - half_log2pi).sum(dim=-1)
    log_qz = (-0.5 * eps ** 2 - half_log2pi - 0.5 * logvar).sum(dim=-1)
    kl = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).sum(dim=-1)
    return log_px, log_pz, log_qz, kl


def _batched(model, data, n_samples, seed, fn, batch):
    model.eval()
    gen = torch.Generator().manual_seed(int(seed))
    data = np.atleast_2d(np.asarray(data))
    x = _as_batch(data, model.arch)
    # bound the (n_samples, batch, L*q) logits tensor
    batch = max(1, min(batch, 2_000_000 // max(1, n_samples * x.shape[1])))
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch):
            out.append(fn(*_log_weights(model, x[start:start + batch], n_samples, gen)))
    return out


def elbo(model: SVAE, seq, n_samples: int = 1000, seed: int = 0, return_stderr: bool = False,
         batch: int = 64):
    """Monte-Carlo ``E_q[log p(S|Z)] - KL(q || prior)`` per sequence.

    Accepts a single sequence or an ``(N, L)`` batch. With
    ``return_stderr=True`` also returns the Monte-Carlo standard error.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    single = np.ndim(seq) == 1

    def fn(log_px, log_pz, log_qz, kl):
        est = log_px.mean(dim=0) - kl
        se = log_px.std(dim=0) / math.sqrt(n_samples) if n_samples > 1 else torch.zeros_like(est)
        return est, se

    parts = _batched(model, seq, n_samples, seed, fn, batch)
    est = torch.cat([p[0] for p in parts]).numpy()
    se = torch.cat([p[1] for p in parts]).numpy()
    if single:
        est, se = float(est[0]), float(se[0])
    return (est, se) if return_stderr else est


def log_prob_importance(model: SVAE, seq, n_samples: int = 1000, seed: int = 0, batch: int = 64):
    """Importance-sampled ``log p(S)`` with the encoder as proposal.

    ``log mean_i p(S|Z_i) p(Z_i) / q(Z_i|S)`` computed with a max shift.
    The statistical energy is the negative of this value.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    single = np.ndim(seq) == 1

    def fn(log_px, log_pz, log_qz, kl):
        logw = log_px + log_pz - log_qz
        return torch.logsumexp(logw, dim=0) - math.log(n_samples)

    est = torch.cat(_batched(model, seq, n_samples, seed, fn, batch)).numpy()
    return float(est[0]) if single else est


def vae_energies(model: SVAE, data, estimator: str = "importance", n_samples: int = 1000,
                 seed: int = 0) -> np.ndarray:
    if estimator == "importance":
        return -log_prob_importance(model, data, n_samples, seed)
    if estimator == "elbo":
        return -elbo(model, data, n_samples, seed)
    raise ValueError(f"unknown estimator {estimator!r}")


def sample_vae(model: SVAE, n: int, seed: int, batch: int = 10000) -> Msa:
    """Prior draw, decode, then one categorical draw per position.

    Each position's Bernoulli row is normalized to sum to one before the
    categorical draw.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    L, q = model.arch.L, model.arch.q
    out = np.empty((n, L), dtype=np.uint8)
    for start in range(0, n, batch):
        m = min(batch, n - start)
        z = rng.standard_normal((m, model.arch.latent_dim))
        p = decode(model, z)
        cdf = np.cumsum(p / p.sum(axis=2, keepdims=True), axis=2)
        u = rng.random((m, L, 1))
        out[start:start + m] = np.minimum((u > cdf).sum(axis=2), q - 1)
    return Msa(out, model.alphabet, tuple(f"svae_{k}" for k in range(n)))


@dataclass
class LatentDiagnostics:
    mean_variance: np.ndarray  # variance of mu(S) across the alignment, per dim
    mean_posterior_variance: np.ndarray  # average sigma^2(S), per dim
    collapsed: np.ndarray  # bool per dim
    var_threshold: float
    spread_threshold: float

    def to_dict(self) -> dict:
        return {
            "mean_variance": self.mean_variance.tolist(),
            "mean_posterior_variance": self.mean_posterior_variance.tolist(),
            "collapsed": self.collapsed.tolist(),
            "n_collapsed": int(self.collapsed.sum()),
            "posterior_variance_threshold": self.var_threshold,
            "mean_spread_threshold": self.spread_threshold,
        }


def posterior_diagnostics(model: SVAE, msa: Msa, var_threshold: float = 0.95,
                          spread_threshold: float = 0.05) -> LatentDiagnostics:
    """Flag collapsed latent dimensions.

    A dimension is collapsed when its average posterior variance exceeds
    ``var_threshold`` and its posterior means vary less than
    ``spread_threshold`` across the alignment.
    """
    mu, var = encode(model, msa.data)
    spread = mu.var(axis=0)
    post = var.mean(axis=0)
    collapsed = (post > var_threshold) & (spread < spread_threshold)
    return LatentDiagnostics(spread, post, collapsed, var_threshold, spread_threshold)


# --------------------------------------------------------------------------
# serialization


def vae_to_json(model: SVAE) -> dict:
    weights = {k: v.detach().cpu().numpy().tolist() for k, v in model.state_dict().items()}
    return {
        "version": VAE_VERSION,
        "arch": model.arch.to_dict(),
        "alphabet": model.alphabet.to_dict(),
        "weights": weights,
    }


def vae_from_json(d: dict) -> SVAE:
    if d.get("version") != VAE_VERSION:
        raise ValueError(f"not an {VAE_VERSION} model file")
    arch = VaeArch(**d["arch"])
    alphabet = Alphabet.from_dict(d["alphabet"]) if "alphabet" in d else None
    model = SVAE(arch, alphabet)
    state = {}
    for k, ref in model.state_dict().items():
        state[k] = torch.as_tensor(np.asarray(d["weights"][k]), dtype=ref.dtype).reshape(ref.shape)
    model.load_state_dict(state)
    model.eval()
    return model


def save_vae(model: SVAE, path) -> None:
    with open(path, "w") as fh:
        json.dump(vae_to_json(model), fh)
