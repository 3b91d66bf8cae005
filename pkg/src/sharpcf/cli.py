"""Command line: train, eval, landscape, sweep, multirun (and synth for test data)."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as gd
from .evaluation import evaluate_all, sharpness_batch, sharpness_estimate
from .harness import DEFAULT_RHOS, RunConfig, multirun_stability, prepare, rho_sweep, run_training
from .landscape import filter_normalized_directions, loss_surface_grid
from .model import BPRObjective, Checkpoint

log = logging.getLogger("sharpcf")

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[s.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or a run manifest); flags override it")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "synthetic":
            p.add_argument(flag, type=json.loads, default=argparse.SUPPRESS,
                           help="JSON object of synthetic_powerlaw arguments")
            continue
        base = str(f.type).split(" ")[0]  # annotations are strings like "float | None"
        typ = {"int": int, "float": float, "bool": _parse_bool}.get(base, str)
        p.add_argument(flag, type=typ, default=argparse.SUPPRESS)


def _config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
        if "config" in base and isinstance(base["config"], dict):
            base = base["config"]
    names = {f.name for f in dataclasses.fields(RunConfig)}
    base.update({k: v for k, v in vars(args).items() if k in names})
    return RunConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _config(args)
    art = run_training(cfg)
    print(art.report.to_text(), end="")
    return 0 if art.ok else 1


def _load_run(run_dir: Path):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = RunConfig.from_dict(manifest)
    return cfg, manifest


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, _ = _load_run(run_dir)
    ckpt = Checkpoint.load(args.checkpoint or run_dir / "checkpoint.bin")
    prep = prepare(cfg)
    k = args.k or cfg.k
    rep = evaluate_all(ckpt.table, prep.adj, ckpt.layers, prep.split, prep.grouping, k, target=args.target)
    batch = sharpness_batch(prep.split.train, cfg.sharpness_seed)
    rep.sharpness, _ = sharpness_estimate(ckpt.table, prep.adj, cfg.model_config(), batch,
                                          prep.split.train.num_users, args.rho or cfg.sharpness_rho)
    rep.config = {"mode": cfg.mode, "checkpoint": ckpt.digest()[:16]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(rep.to_text())
        (out / "report.csv").write_text(rep.to_csv())
    print(rep.to_text(), end="")
    return 0


def cmd_landscape(args) -> int:
    run_dir = Path(args.run)
    cfg, _ = _load_run(run_dir)
    ckpt = Checkpoint.load(args.checkpoint or run_dir / "checkpoint.bin")
    prep = prepare(cfg)
    batch = gd.sample_triplets(prep.split.train, args.batch_size, np.random.default_rng(args.batch_seed))
    obj = BPRObjective(prep.adj, cfg.model_config(), batch, prep.split.train.num_users)
    d1, d2 = filter_normalized_directions(ckpt.table, args.seed)
    grid = loss_surface_grid(obj.loss, ckpt.table, d1, d2, (-args.range, args.range), n=args.n,
                             direction_seed=args.seed, checkpoint_id=ckpt.digest())
    grid.meta.update({"batch_seed": args.batch_seed, "batch_size": len(batch)})
    out = Path(args.out or run_dir / "landscape.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.write_csv(out)
    grid.write_manifest(out.with_suffix(".json"))
    print(f"wrote {out} (base loss {grid.base_loss:.6g}, flagged {int(grid.flagged.sum())})")
    return 0 if not grid.flagged.any() else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rhos = [float(r) for r in args.rhos.split(",")] if args.rhos else list(DEFAULT_RHOS)
    table = rho_sweep(cfg, rhos, workers=args.workers)
    for rho, rep in table:
        print(f"rho={rho:g} recall@{rep.k}={rep.recall:.4f} ndcg@{rep.k}={rep.ndcg:.4f}")
    return 0 if len(table) == len(rhos) else 1


def cmd_multirun(args) -> int:
    cfg = _config(args)
    modes = args.modes.split(",")
    summary, raw = multirun_stability(cfg, args.n_seeds, modes, workers=args.workers)
    for mode, metrics in summary.items():
        for metric, s in metrics.items():
            print(f"{mode} {metric}: median={s['median']:.4f} iqr={s['iqr']:.4f} "
                  f"min={s['min']:.4f} max={s['max']:.4f}")
    return 0 if all(r["status"] == "ok" for r in raw) else 1


def cmd_synth(args) -> int:
    data = gd.synthetic_powerlaw(args.users, args.items, args.mean_degree, args.clusters, seed=args.seed)
    gd.save_interactions(data, args.out)
    print(f"wrote {args.out}: {data.num_users} users, {data.num_items} items, {len(data)} pairs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sharpcf", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and evaluate its best checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint from a run directory")
    p.add_argument("--run", required=True, help="run directory with manifest.json")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int)
    p.add_argument("--rho", type=float, help="sharpness radius")
    p.add_argument("--target", choices=("test", "val"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="2-D loss surface around a checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0, help="direction seed")
    p.add_argument("--batch-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8192)
    p.add_argument("--range", type=float, default=1.0)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--out")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("sweep", help="one run per rho")
    _add_config_flags(p)
    p.add_argument("--rhos", help="comma-separated radii (default 0.01,0.05,0.1,0.5,1.0)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("multirun", help="multi-seed stability of several modes")
    _add_config_flags(p)
    p.add_argument("--n-seeds", type=int, default=30)
    p.add_argument("--modes", default="baseline,sam,gsam")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_multirun)

    p = sub.add_parser("synth", help="write a synthetic power-law dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items", type=int, default=2000)
    p.add_argument("--mean-degree", type=int, default=50)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
