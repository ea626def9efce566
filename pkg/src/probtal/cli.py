"""Command-line entry point: synth, train, localize, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import features, gradsuite, trainer
from .localize import write_results

log = logging.getLogger("probtal")


class CLIError(Exception):
    pass


def _read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def _parse_sets(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(ds: features.Dataset, config_path: str | None, sets: list[str],
                 seed: int | None) -> trainer.TrainConfig:
    """Defaults <- dataset dims <- config file <- --set <- --seed."""
    d = {"D": ds.dim, "D_v": ds.vlp_dim, "C": len(ds.classes)}
    if config_path:
        d.update(_read_config_file(config_path))
    d.update(_parse_sets(sets))
    if seed is not None:
        d["seed"] = seed
    try:
        return trainer.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad config: {exc}") from exc


def _load_data(path: str) -> features.Dataset:
    if not Path(path).exists():
        raise CLIError(f"dataset not found: {path}")
    return features.load_dataset(path)


def _split(ds: features.Dataset, name: str) -> features.Dataset:
    sub = ds.subset(name)
    if len(sub) == 0:
        raise CLIError(f"dataset has no videos in subset {name!r}")
    return sub


# ------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    overrides = {k: getattr(args, k) for k in ("num_classes", "dim", "vlp_dim", "num_train", "num_test")
                 if getattr(args, k) is not None}
    cfg = features.SynthConfig(**overrides)
    ds = features.synthesize_dataset(cfg, seed=args.seed)
    manifest = features.write_dataset(ds, args.out)
    print(f"wrote {len(ds)} videos to {manifest}")
    return 0


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    if args.resume:
        if not Path(args.resume).is_file():
            raise CLIError(f"checkpoint not found: {args.resume}")
        resume = trainer.Checkpoint.load(args.resume)
        cfg = resume.config
        if args.config or args.set or args.seed != cfg.seed:
            cfg = build_config(ds, args.config, args.set, args.seed)
            if cfg.digest() != resume.config_hash:
                raise CLIError("resume config differs from the checkpoint config")
    else:
        resume = None
        cfg = build_config(ds, args.config, args.set, args.seed)
    try:
        trainer.check_dataset(cfg, ds)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    test = ds.subset("test")
    ckpt, records = trainer.train(cfg, _split(ds, "train"), test if len(test) else None,
                                  resume=resume, log_path=args.log, until=args.until)
    ckpt.save(args.out)
    last = records[-1] if records else {}
    summary = ", ".join(f"{k}={last[k]:.4f}" for k in ("total", "mAP@0.5") if k in last)
    print(f"step {ckpt.step}: {summary} -> {args.out}")
    return 0


def cmd_localize(args) -> int:
    if not Path(args.ckpt).is_file():
        raise CLIError(f"checkpoint not found: {args.ckpt}")
    ckpt = trainer.Checkpoint.load(args.ckpt)
    ds = _split(_load_data(args.data), args.subset)
    trainer.check_dataset(ckpt.config, ds)
    proposals = trainer.localize_dataset(ckpt.tensors(), ckpt.config, ds)
    write_results(proposals, args.out, ds.classes)
    print(f"{len(proposals)} proposals -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    for p in (args.results, args.gt):
        if not Path(p).is_file():
            raise CLIError(f"file not found: {p}")
    thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else None
    report = ev.evaluate(args.results, args.gt, thresholds)
    print(report.to_table())
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for case in gradsuite.CASES:
        r = gradsuite.run_case(case, seed=args.seed)
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<28} rel_err={r.error:.2e}  tol={r.tol:.0e}  ({r.seconds:.2f}s)")
    return 1 if failed else 0


def _parse_values(param: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise CLIError("--values is empty")
    if param == "K":
        try:
            return [int(v) for v in vals]
        except ValueError as exc:
            raise CLIError(f"K values must be integers: {raw}") from exc
    return vals


def run_ablation(ds: features.Dataset, base: trainer.TrainConfig, param: str, values: list,
                 seeds: list[int]) -> list[dict]:
    """One row per value: metrics averaged over seeds.

    K only acts at inference, so a single training run per seed is scored
    under every K; metric changes the objective and retrains.
    """
    train_set, test_set = _split(ds, "train"), _split(ds, "test")
    per_value: dict = {v: [] for v in values}
    for seed in seeds:
        if param == "K":
            cfg = dataclasses.replace(base, seed=seed)
            ckpt, _ = trainer.train(cfg, train_set)
            params = ckpt.tensors()
            for v in values:
                per_value[v].append(trainer.evaluate_params(params, dataclasses.replace(cfg, K=v), test_set))
        else:
            for v in values:
                cfg = dataclasses.replace(base, seed=seed, **{param: v})
                ckpt, _ = trainer.train(cfg, train_set)
                per_value[v].append(trainer.evaluate_params(ckpt.tensors(), cfg, test_set))
    rows = []
    for v in values:
        reports = per_value[v]
        rows.append({
            param: v,
            "seeds": len(reports),
            "mAP@0.3": float(np.mean([r.mAP[0.3] for r in reports])),
            "mAP@0.5": float(np.mean([r.mAP[0.5] for r in reports])),
            "mAP@0.7": float(np.mean([r.mAP[0.7] for r in reports])),
            "avg0.1:0.7": float(np.mean([r.averages["0.1:0.7"] for r in reports])),
            "avg0.3:0.7": float(np.mean([r.averages["0.3:0.7"] for r in reports])),
        })
    return rows


def cmd_ablate(args) -> int:
    ds = _load_data(args.data)
    values = _parse_values(args.param, args.values)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as exc:
        raise CLIError(f"bad --seeds: {args.seeds}") from exc
    sets = list(args.set or [])
    if args.steps is not None:
        sets.append(f"steps={args.steps}")
    base = build_config(ds, args.config, sets, seeds[0])
    for v in values:  # validate before any training
        try:
            dataclasses.replace(base, **{args.param: v})
        except ValueError as exc:
            raise CLIError(f"bad value for {args.param}: {exc}") from exc
    rows = run_ablation(ds, base, args.param, values, seeds)
    trainer.save_metric_rows(rows, Path(args.out))
    cols = list(rows[0])
    print("".join(f"{c:>12}" for c in cols))
    for r in rows:
        print("".join(f"{r[c]:>12.4f}" if isinstance(r[c], float) else f"{r[c]!s:>12}" for c in cols))
    return 0


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probtal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic feature dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--vlp-dim", type=int)
    s.add_argument("--num-train", type=int)
    s.add_argument("--num-test", type=int)
    s.set_defaults(func=cmd_synth)

    def config_flags(q):
        q.add_argument("--config", help="TOML or JSON file with TrainConfig keys")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="train on the 'train' subset")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", help="metric log CSV")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop after this step (resume later with --resume)")
    config_flags(t)
    t.set_defaults(func=cmd_train)

    lo = sub.add_parser("localize", help="checkpoint -> results JSON")
    lo.add_argument("--ckpt", required=True)
    lo.add_argument("--data", required=True)
    lo.add_argument("--subset", default="test")
    lo.add_argument("--out", required=True)
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("eval", help="results + ground truth -> mAP table")
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--thresholds", help="comma-separated IoU thresholds")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="run the finite-difference suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="sweep K or the distance metric")
    a.add_argument("--data", required=True)
    a.add_argument("--param", required=True, choices=["K", "metric"])
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--steps", type=int)
    a.add_argument("--out", default="ablation.csv")
    config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, features.DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except trainer.TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
