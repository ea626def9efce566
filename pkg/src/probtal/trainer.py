"""Total objective, optimisation loop, checkpoints and dataset-level inference."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distlearn, milhead, numcore as nc, probembed
from .evaluate import evaluate_detections
from .features import Dataset, gt_to_json, sample_snippets
from .localize import LocalizeConfig, fuse_scores, generate_proposals, results_to_json, soft_nms
from .numcore import Tensor

log = logging.getLogger(__name__)

LOSS_TERMS = ("cls", "oppo", "norm", "guide", "vid", "kd", "ortho", "intra", "inter", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 64
    D: int = 16
    D_v: int = 16
    C: int = 4
    K: int = 20
    tau: float = probembed.TAU
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda4: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.5
    theta_b: float = 0.5
    mask_small: int = 3
    mask_large: int = 7
    k_easy: int = 0          # 0 -> max(1, T // 8)
    n_pair_max: int = 64
    mc_samples: int = 256
    metric: str = "kl"
    batch_size: int = 8
    lr: float = 1e-4
    steps: int = 3000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.5
    k_denominator: int = milhead.K_DENOMINATOR
    eps_sigma: float = probembed.EPS_SIGMA
    eps_log: float = probembed.EPS_LOG
    sigma_bias: float = 1.0
    seed: int = 0
    fusion_weight: float = 0.5
    class_threshold: float = 0.2
    nms_sigma: float = 0.3
    inflation: float = 0.25
    eval_every: int = 0       # 0 -> evaluate only at the end
    log_every: int = 10

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.gamma > 0 and self.batch_size < 2:
            raise ValueError("gamma > 0 needs batch_size >= 2 for inter-video pairs")
        if self.metric not in distlearn.METRICS:
            raise ValueError(f"metric must be one of {distlearn.METRICS}")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def uses_embedding(self) -> bool:
        return self.alpha > 0 or self.beta > 0 or self.gamma > 0 or self.fusion_weight < 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            typ = type(known[k].default)
            out[k] = typ(v) if typ in (int, float, str) else v
        return cls(**out)

    def localize_config(self) -> LocalizeConfig:
        return LocalizeConfig(fusion_weight=self.fusion_weight, class_threshold=self.class_threshold,
                              nms_sigma=self.nms_sigma, inflation=self.inflation)


def init_params(cfg: TrainConfig, textbank_bg: np.ndarray, rng: np.random.Generator) -> dict[str, Tensor]:
    params = milhead.init_base_head(cfg.D, cfg.C, rng)
    params.update(probembed.init_prob_adapter(2 * cfg.D, cfg.D_v, rng, cfg.sigma_bias))
    params["bank.bg"] = nc.tensor(np.asarray(textbank_bg).reshape(-1), requires_grad=True)
    return params


# -------------------------------------------------------------- objective


@dataclass
class Batch:
    rgb: np.ndarray       # (N, T, D)
    flow: np.ndarray
    vlp: np.ndarray       # (N, T, D_v)
    labels: np.ndarray    # (N, C)
    index_maps: list = field(default_factory=list)
    video_ids: list = field(default_factory=list)


def make_batch(ds: Dataset, indices, T: int, rng: np.random.Generator | None) -> Batch:
    samples = [sample_snippets(ds.bundles[i], T, rng) for i in indices]
    return Batch(np.stack([s.rgb for s in samples]), np.stack([s.flow for s in samples]),
                 np.stack([s.vlp_image for s in samples]),
                 np.stack([ds.truths[i].labels for i in indices]),
                 [s.index_map for s in samples], [ds.bundles[i].video_id for i in indices])


def total_loss(batch: Batch, params: dict[str, Tensor], cfg: TrainConfig, bank_rows: np.ndarray,
               rng: np.random.Generator | None) -> tuple[Tensor, dict[str, float]]:
    """L_vid + alpha L_kd + beta L_ortho + gamma (L_intra + L_inter).

    ``rng`` drives dropout and Monte-Carlo draws; None disables dropout (the
    inter term then draws from a fixed seed). Returns the scalar and a
    per-term breakdown of unweighted values.
    """
    out = milhead.run_base_head(batch.rgb, batch.flow, params, rng if cfg.dropout > 0 else None,
                                cfg.dropout, cfg.k_denominator)
    terms: dict[str, Tensor] = {"cls": milhead.loss_cls(out.p_base, out.p_supp, batch.labels)}
    terms["oppo"], terms["norm"], terms["guide"] = milhead.aux_losses(
        out.s_base, out.a, k_denominator=cfg.k_denominator)
    l_vid = milhead.loss_vid(terms, cfg.lambdas)
    terms["vid"] = l_vid
    total = l_vid
    zero = nc.tensor(0.0)
    terms.update(kd=zero, ortho=zero, intra=zero, inter=zero)

    if cfg.alpha > 0 or cfg.beta > 0 or cfg.gamma > 0:
        g = probembed.estimate_gaussian(out.xb, params, cfg.eps_sigma)
        if cfg.alpha > 0:
            terms["kd"] = probembed.loss_kd(g.mu, batch.vlp, cfg.eps_log)
            total = total + cfg.alpha * terms["kd"]
        if cfg.beta > 0:
            bank = probembed.bank_tensor_from_rows(bank_rows, params["bank.bg"])
            terms["ortho"] = probembed.loss_ortho(bank)
            total = total + cfg.beta * terms["ortho"]
        if cfg.gamma > 0:
            terms["intra"], terms["inter"] = _contrastive_terms(g, out.a, batch, cfg, rng)
            total = total + cfg.gamma * (terms["intra"] + terms["inter"])
    terms["total"] = total
    return total, {k: float(v.data) for k, v in terms.items()}


def _contrastive_terms(g, a: Tensor, batch: Batch, cfg: TrainConfig, rng):
    N, T = a.shape[0], a.shape[1]
    a_np = a.data.reshape(N, T)
    k_easy = cfg.k_easy or max(1, T // 8)
    sets = [distlearn.mine_snippets(a_np[v], cfg.theta_b, cfg.mask_small, cfg.mask_large, k_easy)
            for v in range(N)]
    pos, neg = distlearn.batch_intra_pairs(sets, cfg.n_pair_max)
    intra = distlearn.pair_loss(g, pos, neg, cfg.metric, cfg.eps_log)
    if intra is None:
        intra = nc.tensor(0.0)
    a_flat = nc.reshape(a, (N, T))
    mixtures = [distlearn.video_gmm(probembed.GaussianSequence(g.mu[v], g.scale[v]), a_flat[v])
                for v in range(N)]
    H = distlearn.similarity_map(batch.labels)
    mc_rng = rng if rng is not None else np.random.default_rng(0)
    inter = distlearn.loss_inter(mixtures, H, cfg.mc_samples, mc_rng, cfg.metric, cfg.eps_log)
    return intra, inter


# -------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.names = list(names)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        new = {}
        b1, b2 = self.beta1, self.beta2
        for name in self.names:
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m.get(name, np.zeros(p.shape)) * b1 + (1 - b1) * g
            v = self.v.get(name, np.zeros(p.shape)) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            upd = p.data.astype(np.float64) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            new[name] = nc.tensor(upd.astype(p.data.dtype), requires_grad=True)
        return new


# ------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    rng_state: dict

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
        meta = {"step": self.step, "config": self.config.to_dict(),
                "config_hash": self.config_hash, "rng_state": self.rng_state}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
            for key in z.files:
                if "/" in key:
                    head, name = key.split("/", 1)
                    groups[head][name] = z[key]
        cfg = TrainConfig.from_dict(meta["config"])
        if cfg.digest() != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return cls(groups["param"], groups["adam_m"], groups["adam_v"], meta["step"], cfg,
                   meta["rng_state"])

    def tensors(self) -> dict[str, Tensor]:
        return {k: nc.tensor(v, requires_grad=True) for k, v in self.params.items()}


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def check_dataset(cfg: TrainConfig, ds: Dataset) -> None:
    if ds.dim != cfg.D or ds.vlp_dim != cfg.D_v or len(ds.classes) != cfg.C:
        raise ValueError(
            f"config dims (D={cfg.D}, D_v={cfg.D_v}, C={cfg.C}) do not match dataset "
            f"(D={ds.dim}, D_v={ds.vlp_dim}, C={len(ds.classes)})")


def config_for(ds: Dataset, **overrides) -> TrainConfig:
    """Default config with dimensions taken from ``ds``."""
    overrides = {"D": ds.dim, "D_v": ds.vlp_dim, "C": len(ds.classes), **overrides}
    return TrainConfig(**overrides)


def initial_checkpoint(cfg: TrainConfig, ds: Dataset) -> Checkpoint:
    rng = np.random.default_rng([cfg.seed, 2**31 - 1])
    params = init_params(cfg, ds.textbank.embeddings[-1], rng)
    return Checkpoint({k: v.data for k, v in params.items()}, {}, {}, 0, cfg,
                      {"seed": cfg.seed, "step": 0})


def train(cfg: TrainConfig, train_set: Dataset, eval_set: Dataset | None = None,
          resume: Checkpoint | None = None, log_path=None,
          until: int | None = None) -> tuple[Checkpoint, list[dict]]:
    """Adam on the total objective; deterministic in (seed, config, data).

    ``until`` stops early at that step (for split runs); the checkpoint then
    resumes bit-identically.
    """
    check_dataset(cfg, train_set)
    ckpt = resume or initial_checkpoint(cfg, train_set)
    params = ckpt.tensors()
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt.m = {k: np.array(v) for k, v in ckpt.adam_m.items()}
    opt.v = {k: np.array(v) for k, v in ckpt.adam_v.items()}
    opt.t = ckpt.step
    bank_rows = train_set.textbank.embeddings[:-1]
    n_train = len(train_set)
    N = min(cfg.batch_size, n_train)
    last = cfg.steps if until is None else min(until, cfg.steps)
    records: list[dict] = []
    t0 = time.perf_counter()

    for step in range(ckpt.step, last):
        rng = step_rng(cfg.seed, step)
        chosen = np.sort(rng.choice(n_train, size=N, replace=False))
        batch = make_batch(train_set, chosen, cfg.T, rng)
        try:
            loss, parts = total_loss(batch, params, cfg, bank_rows, rng)
            grads = nc.backward(loss)
        except nc.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        by_name = {name: grads[t] for name, t in params.items() if t in grads}
        params = opt.step(params, by_name)
        done = step + 1
        evaluate_now = eval_set is not None and (
            done == last or (cfg.eval_every and done % cfg.eval_every == 0))
        if done % cfg.log_every == 0 or evaluate_now or done == last:
            rec = {"step": done, **parts}
            if evaluate_now:
                report = evaluate_params(params, cfg, eval_set)
                rec["mAP@0.5"] = report.mAP[0.5]
                rec["avg0.1:0.7"] = report.averages["0.1:0.7"]
                rec["avg0.3:0.7"] = report.averages["0.3:0.7"]
            records.append(rec)
            log.info("step %d total %.4f (%.1fs)", done, parts["total"], time.perf_counter() - t0)

    final = Checkpoint({k: v.data for k, v in params.items()}, dict(opt.m), dict(opt.v),
                       max(last, ckpt.step), cfg, {"seed": cfg.seed, "step": max(last, ckpt.step)})
    if log_path is not None:
        write_metric_log(records, log_path)
    return final, records


def write_metric_log(records: list[dict], path) -> None:
    cols = ["step", *LOSS_TERMS, "mAP@0.5", "avg0.1:0.7", "avg0.3:0.7"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -------------------------------------------------------------- inference


def video_seed(seed: int, video_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(video_id.encode())])


def infer(params: dict[str, Tensor], cfg: TrainConfig, ds: Dataset) -> list[dict]:
    """Per-video arrays needed for localisation (no dropout, stratum midpoints)."""
    out_list = []
    bank_rows = ds.textbank.embeddings[:-1]
    batch = make_batch(ds, range(len(ds)), cfg.T, None)
    head = milhead.run_base_head(batch.rgb, batch.flow, params, None, 0.0, cfg.k_denominator)
    s_prob = None
    if cfg.fusion_weight < 1:
        g = probembed.estimate_gaussian(head.xb, params, cfg.eps_sigma)
        bank = probembed.bank_tensor_from_rows(bank_rows, params["bank.bg"])
        s_prob = []
        for v, vid in enumerate(batch.video_ids):
            gv = probembed.GaussianSequence(g.mu[v], g.scale[v])
            s_prob.append(probembed.probabilistic_cas(gv, bank, cfg.K, video_seed(cfg.seed, vid),
                                                      cfg.tau).data)
    for v, vid in enumerate(batch.video_ids):
        s_supp = head.s_supp.data[v]
        out_list.append({
            "video_id": vid,
            "s_supp": s_supp,
            "s_prob": s_prob[v] if s_prob is not None else np.zeros_like(s_supp),
            "a": head.a.data[v, :, 0],
            "p_supp": head.p_supp.data[v],
            "index_map": batch.index_maps[v],
        })
    return out_list


def localize_dataset(params: dict[str, Tensor], cfg: TrainConfig, ds: Dataset):
    lcfg = cfg.localize_config()
    proposals = []
    for item in infer(params, cfg, ds):
        s_final = fuse_scores(item["s_supp"], item["s_prob"], lcfg.fusion_weight)
        cands = generate_proposals(item["video_id"], s_final, item["a"], item["p_supp"],
                                   lcfg, item["index_map"])
        proposals.extend(soft_nms(cands, lcfg.nms_sigma, lcfg.min_score))
    return proposals


def evaluate_params(params, cfg: TrainConfig, ds: Dataset):
    proposals = localize_dataset(params, cfg, ds)
    results = results_to_json(proposals, ds.classes)["results"]
    return evaluate_detections(results, gt_to_json(ds.truths, ds.classes)["database"])


def save_metric_rows(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
