"""Finite-difference checks for every loss term on small random instances."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import distlearn, milhead, numcore as nc, probembed
from .numcore import Tensor

TOL = 1e-3
TOL_MC = 5e-3
STEP = 1e-3


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    tol: float = TOL
    max_coords: int | None = None


def _rand(rng, *shape, scale=1.0):
    return nc.tensor(rng.normal(0, scale, shape))


def _head_inputs(rng, T=8, D=3, C=2):
    with nc.precision(np.float64):
        params = milhead.init_base_head(D, C, rng)
    xr, xo = rng.normal(size=(T, D)), rng.normal(size=(T, D))
    y = np.zeros(C)
    y[rng.integers(C)] = 1
    return params, xr, xo, y


def _case_cls(rng):
    params, xr, xo, y = _head_inputs(rng)
    names = ["cls.w", "cls.b"]
    xb = milhead.fuse_base(xr, xo, params).data
    a = milhead.actionness(xr, xo, params).data

    def f(w, b):
        s = milhead.base_cas(xb, {"cls.w": w, "cls.b": b})
        s_supp = a * s
        return milhead.loss_cls(milhead.video_predict(s), milhead.video_predict(s_supp), y)

    return f, [params[n] for n in names]


def _case_vid(rng):
    params, xr, xo, y = _head_inputs(rng)
    names = sorted(params)

    def f(*ts):
        p = dict(zip(names, ts))
        out = milhead.run_base_head(xr, xo, p)
        parts = {"cls": milhead.loss_cls(out.p_base, out.p_supp, y)}
        parts["oppo"], parts["norm"], parts["guide"] = milhead.aux_losses(out.s_base, out.a)
        return milhead.loss_vid(parts)

    return f, [params[n] for n in names]


def _aux_case(which: int):
    def build(rng):
        s, logit = _rand(rng, 8, 3), _rand(rng, 8, 1)

        def f(s, logit):
            return milhead.aux_losses(s, nc.sigmoid(logit))[which]

        return f, [s, logit]
    return build


def _case_ortho(rng):
    rows = rng.normal(size=(3, 5))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    bg = _rand(rng, 5)
    return (lambda b: probembed.loss_ortho(probembed.bank_tensor_from_rows(rows, b))), [bg]


def _case_kd(rng):
    T, D, Dv = 8, 4, 8
    with nc.precision(np.float64):
        p = probembed.init_prob_adapter(2 * D, Dv, rng)
    xb = rng.normal(size=(T, 2 * D))
    xi = rng.normal(size=(T, Dv))

    def f(w, b):
        mu = probembed.estimate_gaussian(xb, {**p, "g_mu.w": w, "g_mu.b": b}).mu
        return probembed.loss_kd(mu, xi)

    return f, [p["g_mu.w"], p["g_mu.b"]]


def _mined_instance():
    # b = [1,1,1,0,0,0]: hard action 1, hard background 4, easy 0 and 5
    a = np.array([0.9, 0.8, 0.7, 0.3, 0.2, 0.1])
    return distlearn.mine_snippets(a, 0.5, m=3, M=5, k_easy=1)


def _intra_case(metric):
    def build(rng):
        sets = _mined_instance()
        mu, raw = _rand(rng, 6, 4, scale=0.5), _rand(rng, 6, 4, scale=0.3)

        def f(mu, raw):
            g = probembed.GaussianSequence(mu, nc.exp(raw))
            return distlearn.loss_intra(g, sets, metric=metric)[0]

        return f, [mu, raw]
    return build


def _case_inter(rng):
    N, T, D = 2, 4, 4
    mu, raw, logit = _rand(rng, N, T, D, scale=0.5), _rand(rng, N, T, D, scale=0.2), _rand(rng, N, T)
    H = np.array([[1.0, 0.0], [0.0, 1.0]])

    def f(mu, raw, logit):
        a = nc.sigmoid(logit)
        mixes = [distlearn.video_gmm(probembed.GaussianSequence(mu[i], nc.exp(raw[i])), a[i])
                 for i in range(N)]
        return distlearn.loss_inter(mixes, H, S=64, rng=np.random.default_rng(7))

    return f, [mu, raw, logit]


def _case_total(rng):
    from .trainer import Batch, TrainConfig, init_params, total_loss

    cfg = TrainConfig(T=8, D=8, D_v=8, C=2, K=4, batch_size=2, mc_samples=16, dropout=0.0,
                      k_easy=1, mask_small=3, mask_large=5)
    bank = rng.normal(size=(3, 8))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    with nc.precision(np.float64):
        params = init_params(cfg, bank[-1], rng)
    labels = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = Batch(rng.normal(size=(2, 8, 8)), rng.normal(size=(2, 8, 8)),
                  rng.normal(size=(2, 8, 8)), labels)
    names = sorted(params)

    def f(*ts):
        return total_loss(batch, dict(zip(names, ts)), cfg, bank[:-1], None)[0]

    return f, [params[n] for n in names]


CASES = [
    GradCase("L_cls (base + supp)", _case_cls),
    GradCase("L_vid", _case_vid, max_coords=12),
    GradCase("L_oppo", _aux_case(0)),
    GradCase("L_norm", _aux_case(1)),
    GradCase("L_guide", _aux_case(2)),
    GradCase("L_ortho", _case_ortho),
    GradCase("L_kd", _case_kd),
    GradCase("L_intra (kl)", _intra_case("kl")),
    GradCase("L_intra (bhattacharyya)", _intra_case("bhattacharyya")),
    GradCase("L_intra (mahalanobis)", _intra_case("mahalanobis")),
    GradCase("L_inter (MC, frozen draws)", _case_inter, tol=TOL_MC),
    GradCase("L_total", _case_total, tol=TOL_MC, max_coords=6),
]


@dataclass
class GradResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def run_case(case: GradCase, seed: int = 0, step: float = STEP) -> GradResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    with nc.precision(np.float64):
        f, xs = case.build(rng)
        err = nc.grad_check(f, xs, step, max_coords=case.max_coords, seed=seed)
    return GradResult(case.name, err, case.tol, time.perf_counter() - t0)


def run_suite(seed: int = 0, step: float = STEP) -> list[GradResult]:
    return [run_case(c, seed, step) for c in CASES]
