"""Per-snippet Gaussian embeddings, Monte-Carlo class scores, L_ortho and L_kd."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .features import TextBank
from .numcore import Tensor

EPS_SIGMA = 1e-4
EPS_LOG = 1e-6
EPS_NORM = 1e-8
TAU = 0.07


@dataclass
class GaussianSequence:
    """Diagonal Gaussians per snippet; ``scale`` is the standard deviation."""

    mu: Tensor
    scale: Tensor

    @property
    def var(self) -> Tensor:
        return nc.square(self.scale)


def init_prob_adapter(in_dim: int, vlp_dim: int, rng: np.random.Generator,
                      sigma_bias: float = 1.0) -> dict[str, Tensor]:
    """g_mu is one linear layer; g_sigma is linear followed by ReLU.

    ``sigma_bias`` starts the scales away from the floor so early KL terms
    stay bounded.
    """
    s = 1.0 / np.sqrt(in_dim)
    return {
        "g_mu.w": nc.tensor(rng.normal(0, s, (in_dim, vlp_dim)), requires_grad=True),
        "g_mu.b": nc.tensor(np.zeros(vlp_dim), requires_grad=True),
        "g_sigma.w": nc.tensor(rng.normal(0, 0.1 * s, (in_dim, vlp_dim)), requires_grad=True),
        "g_sigma.b": nc.tensor(np.full(vlp_dim, sigma_bias), requires_grad=True),
    }


def estimate_gaussian(xb, params, eps_sigma: float = EPS_SIGMA) -> GaussianSequence:
    xb = nc.as_tensor(xb)
    mu = xb @ params["g_mu.w"] + params["g_mu.b"]
    raw = xb @ params["g_sigma.w"] + params["g_sigma.b"]
    # relu followed by the floor is the same map as a single floor at eps
    scale = nc.floor_at(nc.relu(raw), eps_sigma)
    return GaussianSequence(mu, scale)


def sample_embeddings(g: GaussianSequence, K: int, rng: np.random.Generator) -> Tensor:
    """Reparameterised draws, shape (..., T, K, D); the noise is a tape constant."""
    if K < 1:
        raise ValueError("K must be >= 1")
    shape = g.mu.shape[:-1] + (K, g.mu.shape[-1])
    eps = rng.standard_normal(shape).astype(g.mu.data.dtype)
    mu = nc.reshape(g.mu, g.mu.shape[:-1] + (1, g.mu.shape[-1]))
    scale = nc.reshape(g.scale, g.scale.shape[:-1] + (1, g.scale.shape[-1]))
    return mu + nc.tensor(eps, dtype=g.mu.data.dtype) * scale


def bank_tensor(bank: TextBank, background: Tensor | None = None) -> Tensor:
    """(C+1) x D_v bank with frozen class rows and an optional trainable background row."""
    C = bank.num_classes
    if background is None:
        background = nc.tensor(bank.embeddings[C:])
    return bank_tensor_from_rows(bank.embeddings[:C], background)


def bank_tensor_from_rows(class_rows: np.ndarray, background: Tensor) -> Tensor:
    return nc.concat([nc.tensor(class_rows), nc.reshape(background, (1, -1))], axis=0)


def pcas(samples, bank, tau: float = TAU, eps_norm: float = EPS_NORM) -> Tensor:
    """s(t, c) = mean_k cos(z_t^k, x_c) / tau for samples shaped (..., T, K, D)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    samples, bank = nc.as_tensor(samples), nc.as_tensor(bank)
    zn = nc.normalize(samples, axis=-1, eps=eps_norm)
    bn = nc.normalize(bank, axis=-1, eps=eps_norm)
    sims = zn @ nc.transpose(bn)
    return nc.mean(sims, axis=-2) * (1.0 / tau)


def deterministic_cas(mu, bank, tau: float = TAU, eps_norm: float = EPS_NORM) -> Tensor:
    """K = 0 baseline: cos(mu_t, x_c) / tau."""
    mu, bank = nc.as_tensor(mu), nc.as_tensor(bank)
    mn = nc.normalize(mu, axis=-1, eps=eps_norm)
    bn = nc.normalize(bank, axis=-1, eps=eps_norm)
    return (mn @ nc.transpose(bn)) * (1.0 / tau)


def probabilistic_cas(g: GaussianSequence, bank, K: int, rng: np.random.Generator | None,
                      tau: float = TAU) -> Tensor:
    if K == 0:
        return deterministic_cas(g.mu, bank, tau)
    return pcas(sample_embeddings(g, K, rng), bank, tau)


def loss_ortho(bank) -> Tensor:
    bank = nc.as_tensor(bank)
    gram = bank @ nc.transpose(bank)
    eye = np.eye(bank.shape[0])
    return nc.tsum(nc.square(gram - eye))


def loss_kd(mu, x_img, eps_log: float = EPS_LOG) -> Tensor:
    """-(1/T) sum_t log((cos(mu_t, x_t) + 1) / 2 + eps), averaged over any batch axis."""
    cos = nc.cosine_similarity(mu, x_img, axis=-1)
    return -nc.mean(nc.log((cos + 1.0) * 0.5 + eps_log))
