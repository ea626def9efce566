"""Base multiple-instance head: fusion, actionness, CAS, top-k pooling and L_vid.

All functions accept an optional leading batch axis: features are
``(..., T, D)`` and scores ``(..., T, C+1)``. Parameters live in a plain dict
of leaf tensors so optimizers and checkpoints can walk them by name.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

log = logging.getLogger(__name__)

K_DENOMINATOR = 8


def _conv_init(rng, k, cin, cout):
    scale = np.sqrt(2.0 / (k * cin))
    return nc.tensor(rng.normal(0.0, scale, size=(k, cin, cout)), requires_grad=True)


def init_base_head(dim: int, num_classes: int, rng: np.random.Generator,
                   fusion_kernels=(3, 3), attn_kernels=(3, 1), attn_hidden: int | None = None,
                   bias: bool = True) -> dict[str, Tensor]:
    """Randomly initialised parameters for f_base, the attention branch and f_cls."""
    d2 = 2 * dim
    hidden = attn_hidden or dim
    p: dict[str, Tensor] = {}
    for i, k in enumerate(fusion_kernels):
        p[f"fuse{i}.w"] = _conv_init(rng, k, d2, d2)
        if bias:
            p[f"fuse{i}.b"] = nc.tensor(np.zeros(d2), requires_grad=True)
    dims = [d2] + [hidden] * (len(attn_kernels) - 1) + [1]
    for i, k in enumerate(attn_kernels):
        p[f"attn{i}.w"] = _conv_init(rng, k, dims[i], dims[i + 1])
        if bias:
            p[f"attn{i}.b"] = nc.tensor(np.zeros(dims[i + 1]), requires_grad=True)
    p["cls.w"] = _conv_init(rng, 1, d2, num_classes + 1)
    if bias:
        p["cls.b"] = nc.tensor(np.zeros(num_classes + 1), requires_grad=True)
    return p


def _stack(x: Tensor, params, prefix: str, final_sigmoid: bool = False) -> Tensor:
    i = 0
    while f"{prefix}{i}.w" in params:
        x = nc.conv1d(x, params[f"{prefix}{i}.w"], params.get(f"{prefix}{i}.b"))
        if final_sigmoid and f"{prefix}{i + 1}.w" not in params:
            x = nc.sigmoid(x)
        else:
            x = nc.relu(x)
        i += 1
    return x


def _check_pair(xr: Tensor, xo: Tensor):
    if xr.shape != xo.shape:
        raise ValueError(f"rgb/flow shapes differ: {xr.shape} vs {xo.shape}")


def fuse_base(xr, xo, params, rng: np.random.Generator | None = None,
              dropout: float = 0.5) -> Tensor:
    """X^B = f_base([X^R; X^O]); dropout only when an rng is supplied."""
    xr, xo = nc.as_tensor(xr), nc.as_tensor(xo)
    _check_pair(xr, xo)
    xb = _stack(nc.concat([xr, xo], axis=-1), params, "fuse")
    return nc.dropout(xb, dropout, rng)


def attention_branch(x1, x2, params) -> Tensor:
    return _stack(nc.concat([x1, x2], axis=-1), params, "attn", final_sigmoid=True)


def actionness(xr, xo, params) -> Tensor:
    """Symmetrised attention, shape (..., T, 1), values in (0, 1)."""
    xr, xo = nc.as_tensor(xr), nc.as_tensor(xo)
    _check_pair(xr, xo)
    return (attention_branch(xr, xo, params) + attention_branch(xo, xr, params)) * 0.5


def base_cas(xb, params) -> Tensor:
    return nc.conv1d(xb, params["cls.w"], params.get("cls.b"))


def topk_count(T: int, k_denominator: int = K_DENOMINATOR) -> int:
    return max(1, T // k_denominator)


def pooled_scores(S, k: int | None = None, k_denominator: int = K_DENOMINATOR) -> Tensor:
    """Top-k temporal average per class, before softmax."""
    S = nc.as_tensor(S)
    T = S.shape[-2]
    if k is None:
        k = topk_count(T, k_denominator)
    if k > T:
        log.warning("top-k %d exceeds T=%d; clamping", k, T)
        k = T
    return nc.topk_mean(S, k, axis=-2)


def video_predict(S, k: int | None = None, k_denominator: int = K_DENOMINATOR) -> Tensor:
    """Video-level class distribution from a (.., T, C+1) activation sequence."""
    return nc.softmax(pooled_scores(S, k, k_denominator), axis=-1)


@dataclass
class HeadOutputs:
    xb: Tensor
    a: Tensor
    s_base: Tensor
    s_supp: Tensor
    p_base: Tensor
    p_supp: Tensor


def run_base_head(xr, xo, params, rng: np.random.Generator | None = None,
                  dropout: float = 0.5, k_denominator: int = K_DENOMINATOR) -> HeadOutputs:
    xb = fuse_base(xr, xo, params, rng, dropout)
    a = actionness(xr, xo, params)
    s_base = base_cas(xb, params)
    s_supp = a * s_base
    return HeadOutputs(xb, a, s_base, s_supp,
                       video_predict(s_base, k_denominator=k_denominator),
                       video_predict(s_supp, k_denominator=k_denominator))


def video_labels(y: np.ndarray, background: float) -> np.ndarray:
    """Append the background bit and normalise to a distribution."""
    y = np.asarray(y, dtype=np.float64)
    tail = np.full(y.shape[:-1] + (1,), background)
    full = np.concatenate([y, tail], axis=-1)
    total = full.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise ValueError("video has no positive label")
    return full / total


def cross_entropy(target: np.ndarray, p: Tensor) -> Tensor:
    """-sum target*log(p), batch-averaged; zero-target entries are skipped."""
    target = np.asarray(target, dtype=np.float64)
    nz = np.nonzero(target)
    logp = nc.log(nc.take(p, nz))
    n = int(np.prod(target.shape[:-1])) if target.ndim > 1 else 1
    return -nc.tsum(logp * target[nz]) / n


def loss_cls(p_base, p_supp, y) -> Tensor:
    """L_base + L_supp with background bit 1 for the base and 0 for the suppressed branch."""
    return (cross_entropy(video_labels(y, 1.0), nc.as_tensor(p_base))
            + cross_entropy(video_labels(y, 0.0), nc.as_tensor(p_supp)))


def aux_losses(s_base, a, k: int | None = None,
               k_denominator: int = K_DENOMINATOR) -> tuple[Tensor, Tensor, Tensor]:
    """(L_oppo, L_norm, L_guide) for an activation sequence and its attention.

    L_oppo: the complement-attended sequence should pool to background.
    L_norm: mean attention (sparsity).
    L_guide: background posterior should track 1 - a.
    """
    s_base, a = nc.as_tensor(s_base), nc.as_tensor(a)
    inv = 1.0 - a
    p_oppo = video_predict(inv * s_base, k, k_denominator)
    n = int(np.prod(p_oppo.shape[:-1]))
    l_oppo = -nc.tsum(nc.log(p_oppo[..., -1])) / n
    l_norm = nc.mean(a)
    bg = nc.softmax(s_base, axis=-1)[..., -1:]
    l_guide = nc.mean(nc.square(bg - inv))
    return l_oppo, l_norm, l_guide


DEFAULT_LAMBDAS = (1.0, 1.0, 0.1, 1.0)


def loss_vid(components: dict[str, Tensor], lambdas=DEFAULT_LAMBDAS) -> Tensor:
    l1, l2, l3, l4 = lambdas
    if min(lambdas) < 0:
        raise ValueError("loss weights must be non-negative")
    return (l1 * components["cls"] + l2 * components["oppo"]
            + l3 * components["norm"] + l4 * components["guide"])
