"""Statistical distances between diagonal Gaussians and the contrastive losses built on them.

Match probabilities are ``exp(-d)`` where ``d`` is the symmetrised KL by
default (or a Bhattacharyya / Mahalanobis distance). Positive pairs maximise
the match probability, negative pairs minimise it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numcore as nc
from .numcore import Tensor
from .probembed import EPS_LOG, GaussianSequence

METRICS = ("kl", "bhattacharyya", "mahalanobis")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagGaussian:
    mu: Tensor
    var: Tensor

    def __post_init__(self):
        self.mu = nc.as_tensor(self.mu)
        self.var = nc.as_tensor(self.var)
        if np.any(self.var.data <= 0):
            raise ValueError("variance must be strictly positive")


def kl_gaussian(P: DiagGaussian, Q: DiagGaussian) -> Tensor:
    """KL(P || Q) for diagonal Gaussians, reduced over the last axis."""
    D = P.mu.shape[-1]
    # log difference grouped first so KL(P, P) is exactly zero
    terms = (P.var / Q.var + nc.square(Q.mu - P.mu) / Q.var
             + (nc.log(Q.var) - nc.log(P.var)))
    return nc.tsum(terms, axis=-1) * 0.5 - 0.5 * D


def symmetric_kl(P: DiagGaussian, Q: DiagGaussian) -> Tensor:
    return (kl_gaussian(P, Q) + kl_gaussian(Q, P)) * 0.5


def alt_distance(P: DiagGaussian, Q: DiagGaussian, metric: str) -> Tensor:
    """Mahalanobis or Bhattacharyya distance using the averaged covariance."""
    vbar = (P.var + Q.var) * 0.5
    quad = nc.tsum(nc.square(P.mu - Q.mu) / vbar, axis=-1)
    if metric == "mahalanobis":
        return nc.sqrt(quad)
    if metric == "bhattacharyya":
        logdet = nc.tsum(nc.log(vbar) - (nc.log(P.var) + nc.log(Q.var)) * 0.5, axis=-1)
        return quad * 0.125 + logdet * 0.5
    raise ValueError(f"unknown metric {metric!r}")


def distance(P: DiagGaussian, Q: DiagGaussian, metric: str = "kl") -> Tensor:
    if metric == "kl":
        return symmetric_kl(P, Q)
    return alt_distance(P, Q, metric)


def match_probability(P: DiagGaussian, Q: DiagGaussian, metric: str = "kl") -> Tensor:
    """exp(-d(P, Q)); equals 1 iff P == Q."""
    return nc.exp(-distance(P, Q, metric))


# ------------------------------------------------------------ snippet mining


def erosion(b: np.ndarray, size: int) -> np.ndarray:
    """1 where every position under the centred mask is 1; outside counts as 0."""
    p = size // 2
    padded = np.pad(np.asarray(b, dtype=np.int8), p, constant_values=0)
    return sliding_window_view(padded, size).min(axis=-1).astype(np.int8)


def dilation(b: np.ndarray, size: int) -> np.ndarray:
    """1 where any position under the centred mask is 1; outside counts as 0."""
    p = size // 2
    padded = np.pad(np.asarray(b, dtype=np.int8), p, constant_values=0)
    return sliding_window_view(padded, size).max(axis=-1).astype(np.int8)


@dataclass
class MinedSets:
    easy_act: np.ndarray
    easy_bkg: np.ndarray
    hard_act: np.ndarray
    hard_bkg: np.ndarray
    attention: np.ndarray

    def positive_pairs(self) -> np.ndarray:
        return np.concatenate([_pairs(self.hard_act, self.easy_act),
                               _pairs(self.hard_bkg, self.easy_bkg)])

    def negative_pairs(self) -> np.ndarray:
        return np.concatenate([_pairs(self.hard_act, self.easy_bkg),
                               _pairs(self.hard_bkg, self.easy_act)])


def _pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ii, jj = np.meshgrid(a, b, indexing="ij")
    out = np.stack([ii.ravel(), jj.ravel()], axis=1)
    return out[out[:, 0] != out[:, 1]]


def mine_snippets(a, theta_b: float = 0.5, m: int = 3, M: int = 7,
                  k_easy: int | None = None) -> MinedSets:
    """Easy/hard action and background snippets from an attention vector."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if not (m % 2 == 1 and M % 2 == 1 and m < M):
        raise ValueError("mask sizes must be odd with m < M")
    if not 0 < theta_b < 1:
        raise ValueError("theta_b must lie in (0, 1)")
    T = len(a)
    if k_easy is None:
        k_easy = max(1, T // 8)
    b = (a > theta_b).astype(np.int8)
    inner = erosion(b, m) - erosion(b, M)
    outer = dilation(b, M) - dilation(b, m)
    order = np.argsort(-a, kind="stable")
    act = order[b[order] == 1][:k_easy]
    bkg = order[::-1][b[order[::-1]] == 0][:k_easy]
    return MinedSets(easy_act=np.sort(act), easy_bkg=np.sort(bkg),
                     hard_act=np.flatnonzero(inner), hard_bkg=np.flatnonzero(outer),
                     attention=a)


def _cap(pairs: np.ndarray, attention: np.ndarray, n_max: int) -> np.ndarray:
    if len(pairs) <= n_max:
        return pairs
    score = attention[pairs[:, 0]] + attention[pairs[:, 1]]
    keep = np.argsort(-score, kind="stable")[:n_max]
    return pairs[np.sort(keep)]


def _gather(g: GaussianSequence, idx) -> DiagGaussian:
    return DiagGaussian(nc.take(g.mu, idx), nc.take(g.var, idx))


def pair_loss(g: GaussianSequence, pos: np.ndarray, neg: np.ndarray, metric: str = "kl",
              eps_log: float = EPS_LOG) -> Tensor | None:
    """Mean of -log p over positive pairs and -log(1 - p + eps) over negatives.

    Pairs index the leading axes of ``g`` (a tuple of index arrays per side).
    Returns None when either set is empty.
    """
    if len(pos[0][0]) == 0 or len(neg[0][0]) == 0:
        return None
    # -log p is the distance itself, so positives need no clamp
    d_pos = distance(_gather(g, pos[0]), _gather(g, pos[1]), metric)
    d_neg = distance(_gather(g, neg[0]), _gather(g, neg[1]), metric)
    neg_terms = -nc.log(1.0 - nc.exp(-d_neg) + eps_log)
    n = len(pos[0][0]) + len(neg[0][0])
    return (nc.tsum(d_pos) + nc.tsum(neg_terms)) * (1.0 / n)


def loss_intra(g: GaussianSequence, sets: MinedSets, metric: str = "kl",
               n_pair_max: int = 64, eps_log: float = EPS_LOG) -> tuple[Tensor, bool]:
    """Intra-video distribution contrast for one video (g has shape (T, D)).

    Returns ``(loss, ok)``; ``ok`` is False (and the loss a zero constant)
    when no positive or no negative pair exists.
    """
    pos = _cap(sets.positive_pairs(), sets.attention, n_pair_max)
    neg = _cap(sets.negative_pairs(), sets.attention, n_pair_max)
    out = pair_loss(g, ((pos[:, 0],), (pos[:, 1],)), ((neg[:, 0],), (neg[:, 1],)),
                    metric, eps_log)
    if out is None:
        return nc.tensor(0.0), False
    return out, True


def batch_intra_pairs(sets: list[MinedSets], n_pair_max: int = 64):
    """Index tuples for a batch of mined sets, addressing (video, snippet)."""
    pos_l, neg_l = [], []
    for v, s in enumerate(sets):
        pos = _cap(s.positive_pairs(), s.attention, n_pair_max)
        neg = _cap(s.negative_pairs(), s.attention, n_pair_max)
        if len(pos) == 0 or len(neg) == 0:
            continue
        pos_l.append(np.column_stack([np.full(len(pos), v), pos]))
        neg_l.append(np.column_stack([np.full(len(neg), v), neg]))
    if not pos_l:
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        return (empty, empty), (empty, empty)
    pos, neg = np.concatenate(pos_l), np.concatenate(neg_l)
    return (((pos[:, 0], pos[:, 1]), (pos[:, 0], pos[:, 2])),
            ((neg[:, 0], neg[:, 1]), (neg[:, 0], neg[:, 2])))


# ---------------------------------------------------------- video mixtures


@dataclass
class VideoMixture:
    mu: Tensor
    var: Tensor
    weights: Tensor

    @property
    def num_components(self) -> int:
        return self.mu.shape[-2]

    def components(self) -> list[DiagGaussian]:
        return [DiagGaussian(self.mu[t], self.var[t]) for t in range(self.num_components)]

    def moment_matched(self) -> DiagGaussian:
        w = nc.reshape(self.weights, self.weights.shape + (1,))
        m = nc.tsum(w * self.mu, axis=-2)
        second = nc.tsum(w * (self.var + nc.square(self.mu)), axis=-2)
        return DiagGaussian(m, second - nc.square(m))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Plain ancestral samples (no gradient); used for checks."""
        w = np.asarray(self.weights.data, dtype=np.float64)
        comp = rng.choice(len(w), size=n, p=w / w.sum())
        eps = rng.standard_normal((n, self.mu.shape[-1]))
        return self.mu.data[comp] + np.sqrt(self.var.data[comp]) * eps


def video_gmm(g: GaussianSequence, a) -> VideoMixture:
    """Attention-weighted mixture of snippet Gaussians; weights normalised to sum 1."""
    a = nc.as_tensor(a)
    a = nc.reshape(a, a.shape[:-1]) if a.shape[-1] == 1 and a.ndim > 1 else a
    if np.any(np.sum(a.data, axis=-1) <= 0):
        raise ValueError("attention sums to zero")
    w = a / nc.tsum(a, axis=-1, keepdims=True)
    return VideoMixture(g.mu, g.var, w)


def _stack_mixtures(mixtures: list[VideoMixture]):
    mu = nc.astype(nc.stack([m.mu for m in mixtures]), np.float64)
    var = nc.astype(nc.stack([m.var for m in mixtures]), np.float64)
    w = nc.astype(nc.stack([m.weights for m in mixtures]), np.float64)
    return mu, var, w


def cross_log_density(z: Tensor, mu: Tensor, var: Tensor, w: Tensor) -> Tensor:
    """log p_j(z_m) for every sample m and mixture j.

    z: (M, D); mu, var: (J, T, D); w: (J, T). Returns (M, J). The quadratic
    form is expanded into matrix products so all pairs cost three matmuls.
    """
    J, T, D = mu.shape
    iv = nc.reshape(1.0 / var, (J * T, D))
    mu_f = nc.reshape(mu, (J * T, D))
    quad = (nc.square(z) @ nc.transpose(iv)
            - (z @ nc.transpose(mu_f * iv)) * 2.0
            + nc.reshape(nc.tsum(nc.square(mu_f) * iv, axis=-1), (1, J * T)))
    logdet = nc.reshape(nc.tsum(nc.log(nc.reshape(var, (J * T, D))), axis=-1), (1, J * T))
    log_n = (quad + logdet + D * LOG_2PI) * -0.5
    log_n = nc.reshape(log_n, (z.shape[0], J, T)) + nc.reshape(nc.log(w), (1, J, T))
    return nc.logsumexp(log_n, axis=-1)


def _draw(mu: Tensor, var: Tensor, S: int, rng: np.random.Generator) -> tuple[Tensor, int]:
    """ceil(S/T) reparameterised draws per component: (J*T*n, D), n."""
    J, T, D = mu.shape
    n = max(1, -(-S // T))
    eps = rng.standard_normal((J, T, n, D))
    z = (nc.reshape(mu, (J, T, 1, D))
         + nc.reshape(nc.sqrt(var), (J, T, 1, D)) * nc.tensor(eps, dtype=np.float64))
    return nc.reshape(z, (J * T * n, D)), n


def mixture_divergences(mixtures: list[VideoMixture], S: int,
                        rng: np.random.Generator) -> Tensor:
    """Monte-Carlo symmetrised KL between every pair of mixtures, shape (J, J).

    Samples are stratified per component and re-weighted by the mixture
    weights, so gradients reach means, variances and weights.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    mu, var, w = _stack_mixtures(mixtures)
    J, T, _ = mu.shape
    z, n = _draw(mu, var, S, rng)
    logp = cross_log_density(z, mu, var, w)                     # (J*T*n, J)
    logp = nc.reshape(logp, (J, T, n, J))
    per_comp = nc.mean(logp, axis=2)                            # (J, T, J)
    expect = nc.tsum(nc.reshape(w, (J, T, 1)) * per_comp, axis=1)  # E_{V_i}[log p_j]
    diag = np.arange(J)
    own = nc.take(expect, (diag, diag))                         # E_{V_i}[log p_i]
    kl = nc.reshape(own, (J, 1)) - expect                       # KL(V_i || V_j)
    return (kl + nc.transpose(kl)) * 0.5


def mixture_match_probability(V1: VideoMixture, V2: VideoMixture, S: int,
                              rng: np.random.Generator) -> Tensor:
    d = mixture_divergences([V1, V2], S, rng)[0, 1]
    return nc.exp(-nc.floor_at(d, 0.0))


def similarity_map(labels: np.ndarray) -> np.ndarray:
    """H[i, j] = 1 iff videos i and j share at least one class."""
    y = (np.asarray(labels) > 0).astype(np.int64)
    return ((y @ y.T) > 0).astype(np.float64)


def loss_inter(mixtures: list[VideoMixture], H: np.ndarray, S: int = 256,
               rng: np.random.Generator | None = None, metric: str = "kl",
               eps_log: float = EPS_LOG) -> Tensor:
    """Batch BCE between the similarity map and mixture match probabilities."""
    N = len(mixtures)
    if N < 2:
        raise ValueError("loss_inter needs at least two videos")
    H = np.asarray(H, dtype=np.float64)
    if metric == "kl":
        if rng is None:
            raise ValueError("kl metric needs an rng for Monte-Carlo draws")
        d = mixture_divergences(mixtures, S, rng)
    else:
        g = [m.moment_matched() for m in mixtures]
        P = DiagGaussian(nc.stack([x.mu for x in g]), nc.stack([x.var for x in g]))
        ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        d = nc.reshape(distance(DiagGaussian(nc.take(P.mu, ii.ravel()), nc.take(P.var, ii.ravel())),
                                DiagGaussian(nc.take(P.mu, jj.ravel()), nc.take(P.var, jj.ravel())),
                                metric), (N, N))
    d = nc.floor_at(d, 0.0)
    # -log p = d exactly for same-class entries; clamp only the complement
    neg = -nc.log(1.0 - nc.exp(-d) + eps_log)
    return nc.tsum(d * H + neg * (1.0 - H)) * (1.0 / (N * N))
