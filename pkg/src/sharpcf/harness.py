"""Training runs with early stopping, the rho sweep and the multi-seed stability experiment."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as gd
from .evaluation import EvalReport, evaluate_all, sharpness_batch, sharpness_estimate
from .model import BPRObjective, Checkpoint, ModelConfig, init_params
from .optim import MODES, OptimizerState, SamConfig, StepAbortedError, train_step

log = logging.getLogger(__name__)

DEFAULT_RHOS = (0.01, 0.05, 0.1, 0.5, 1.0)
MAX_CONSECUTIVE_ABORTS = 3


@dataclass
class RunConfig:
    dataset: str | None = None
    synthetic: dict | None = None  # kwargs for data.synthetic_powerlaw, used when dataset is None
    split_seed: int = 0
    seed: int = 0
    sampler_seed: int | None = None  # None -> seed
    mode: str = "gsam"
    layers: int = 3
    dim: int = 64
    l2_coeff: float = 1e-4
    init_std: float = 0.1
    rho: float = 0.05
    inner_lr: float = 0.01
    lr: float = 1e-3
    inner_steps: int = 3
    neumann_terms: int = 5
    neumann_alpha: float | None = None  # None -> inner_lr
    warm_start: bool = False
    batch_size: int = 2048
    max_epochs: int = 1000
    eval_every: int = 5
    patience: int = 10
    k: int = 20
    sharpness_rho: float = 0.05
    sharpness_seed: int = 0
    output_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.dataset is None and self.synthetic is None:
            raise ValueError("either dataset or synthetic must be set")
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise FileNotFoundError(f"dataset not found: {self.dataset}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("batch_size", "eval_every", "patience", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.sharpness_rho <= 0:
            raise ValueError("sharpness_rho must be > 0")
        self.model_config()
        self.sam_config()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, dim=self.dim, l2_coeff=self.l2_coeff, init_std=self.init_std)

    def sam_config(self) -> SamConfig:
        return SamConfig(rho=self.rho, inner_lr=self.inner_lr, lr=self.lr, inner_steps=self.inner_steps,
                         neumann_terms=self.neumann_terms, neumann_alpha=self.neumann_alpha,
                         warm_start=self.warm_start)

    def resolved(self) -> dict:
        """Every setting that affects results (output_dir excluded), defaults filled in."""
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        if d["sampler_seed"] is None:
            d["sampler_seed"] = self.seed
        if d["neumann_alpha"] is None:
            d["neumann_alpha"] = self.inner_lr
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "config" in d and isinstance(d["config"], dict):  # a run manifest
            d = d["config"]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# fixed interpretation choices, echoed into every manifest
DESIGN = {
    "readout": "uniform mean over layers 0..L",
    "loss": "batch-mean BPR + l2_coeff * |touched ego rows|^2 / batch",
    "perturbation_support": "embedding rows touched by the batch (sam, gsam)",
    "inner_objective": "L_in = -L_bpr(theta + delta); L_out = L_bpr(theta + delta)",
    "neumann": "alpha * sum_{j<=J} (I - alpha H_in)^j v",
    "optimizer": "Adam (beta1=0.9, beta2=0.999, eps=1e-8) on the chosen gradient",
    "split": "per-user 8:1:1, val/test rounded to nearest, train takes the rest",
    "negatives": "uniform over non-interacted items, resampled every batch, with replacement",
    "test_masking": "train and validation items masked",
    "popularity_groups": "equal train-interaction mass thirds, items ordered by (-degree, id)",
    "sharpness": "one-step L(theta + rho g/|g|) - L(theta), full table, fixed seeded batch",
    "epoch": "ceil(|train| / batch_size) sampled batches",
}


@dataclass
class Prepared:
    data: gd.InteractionData
    split: gd.SplitData
    adj: object
    grouping: gd.PopularityGrouping
    dataset_hash: str


def prepare(config: RunConfig) -> Prepared:
    if config.dataset is not None:
        data = gd.load_interactions(config.dataset)
        digest = hashlib.sha256(Path(config.dataset).read_bytes()).hexdigest()
    else:
        data = gd.synthetic_powerlaw(**config.synthetic)
        digest = hashlib.sha256(data.pairs.tobytes()).hexdigest()
    split = gd.split_holdout(data, seed=config.split_seed)
    adj = gd.normalized_adjacency(split.train)
    return Prepared(data, split, adj, gd.popularity_groups(split.train), digest)


@dataclass
class RunArtifacts:
    config: RunConfig
    checkpoint: Checkpoint
    log: list[dict]
    report: EvalReport
    manifest: dict
    status: str = "ok"
    files: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


LOG_COLUMNS = ["epoch", "steps", "aborted", "loss_before", "loss_after", "delta_norm", "grad_norm",
               "lr", "val_recall", "val_ndcg", "best_epoch"]


def run_training(config: RunConfig, prepared: Prepared | None = None) -> RunArtifacts:
    """Train, early-stop on validation Recall@k, evaluate the best checkpoint on test."""
    config.validate()
    prep = prepared or prepare(config)
    split, adj = prep.split, prep.adj
    train = split.train
    mcfg, scfg = config.model_config(), config.sam_config()
    resolved = config.resolved()

    theta = init_params(train.num_nodes, mcfg.dim, config.seed, mcfg.init_std)
    sampler = gd.TripletSampler(train, resolved["sampler_seed"])
    state = OptimizerState.create(config.mode, theta.shape, scfg.lr)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)

    def validate_now():
        rep = evaluate_all(theta, adj, mcfg.layers, split, None, config.k, target="val")
        return rep.recall, rep.ndcg

    rows = []
    best_recall, best_epoch = -1.0, 0
    best_theta = theta.copy()
    stale = 0
    status = "ok"
    consecutive = 0

    recall, ndcg = validate_now()
    best_recall, best_theta = recall, theta.copy()
    rows.append(_log_row(0, 0, 0, [], state.lr, recall, ndcg, best_epoch))

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        reports, aborted = [], 0
        for _ in range(steps_per_epoch):
            batch = sampler.sample(config.batch_size)
            if len(batch) == 0:
                continue
            obj = BPRObjective(adj, mcfg, batch, train.num_users)
            try:
                theta, rep = train_step(state, theta, obj, scfg)
            except StepAbortedError as exc:
                aborted += 1
                consecutive += 1
                log.error("%s", exc)
                if consecutive >= MAX_CONSECUTIVE_ABORTS:
                    status = "failed"
                    break
                continue
            consecutive = 0
            reports.append(rep)
        recall = ndcg = None
        stop = status != "ok"
        if not stop and (epoch % config.eval_every == 0 or epoch == config.max_epochs):
            recall, ndcg = validate_now()
            if recall > best_recall:
                best_recall, best_epoch, best_theta, stale = recall, epoch, theta.copy(), 0
            else:
                stale += 1
                stop = stale >= config.patience
        rows.append(_log_row(epoch, len(reports), aborted, reports, state.lr, recall, ndcg, best_epoch))
        log.info("epoch %d (%s) loss %.5f val recall %s [%.1fs]", epoch, config.mode,
                 rows[-1]["loss_before"], recall, time.perf_counter() - t0)
        if stop:
            break

    report = evaluate_all(best_theta, adj, mcfg.layers, split, prep.grouping, config.k, target="test")
    sbatch = sharpness_batch(train, config.sharpness_seed)
    report.sharpness, _ = sharpness_estimate(best_theta, adj, mcfg, sbatch, train.num_users, config.sharpness_rho)
    report.config = {"mode": config.mode, "rho": config.rho, "seed": config.seed,
                     "config_hash": config.content_hash()[:16]}
    ckpt = Checkpoint(best_theta, mcfg.layers, mcfg.l2_coeff, config.seed, train.num_users)
    manifest = {
        "config": resolved,
        "config_hash": config.content_hash(),
        "dataset_sha256": prep.dataset_hash,
        "split": split.manifest(),
        "grouping": prep.grouping.describe(),
        "design": DESIGN,
        "status": status,
        "best_epoch": best_epoch,
        "best_val_recall": best_recall,
        "checkpoint_sha256": ckpt.digest(),
    }
    art = RunArtifacts(config, ckpt, rows, report, manifest, status)
    if config.output_dir:
        write_artifacts(art, prep)
    return art


def _mean(reports, attr):
    return float(np.mean([getattr(r, attr) for r in reports])) if reports else float("nan")


def _log_row(epoch, steps, aborted, reports, lr, recall, ndcg, best_epoch):
    return {
        "epoch": epoch, "steps": steps, "aborted": aborted,
        "loss_before": _mean(reports, "loss_before"), "loss_after": _mean(reports, "loss_after"),
        "delta_norm": _mean(reports, "delta_norm"), "grad_norm": _mean(reports, "grad_norm"),
        "lr": lr, "val_recall": "" if recall is None else recall, "val_ndcg": "" if ndcg is None else ndcg,
        "best_epoch": best_epoch,
    }


def write_artifacts(art: RunArtifacts, prep: Prepared) -> None:
    out = Path(art.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "checkpoint": out / "checkpoint.bin",
        "log": out / "log.csv",
        "report_txt": out / "report.txt",
        "report_csv": out / "report.csv",
        "per_user": out / "per_user.csv",
        "split": out / "split.json",
        "id_map": out / "id_map.json",
        "manifest": out / "manifest.json",
    }
    art.checkpoint.save(files["checkpoint"])
    with open(files["log"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(art.log)
    files["report_txt"].write_text(art.report.to_text())
    files["report_csv"].write_text(art.report.to_csv())
    users = prep.data.user_ids
    with open(files["per_user"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "recall", "ndcg", "hits"])
        for u, r, n, h in art.report.per_user:
            w.writerow([int(users[u]), r, n, h])
    gd.write_split_manifest(prep.split, files["split"])
    files["id_map"].write_text(json.dumps(prep.data.id_map()) + "\n")
    files["manifest"].write_text(json.dumps(art.manifest, indent=2, sort_keys=True) + "\n")
    art.files = {k: str(v) for k, v in files.items()}


# -- experiment templates ---------------------------------------------------------------

def _run_one(config: RunConfig):
    try:
        return run_training(config), None
    except Exception as exc:  # a failed run must not stop the sweep
        log.exception("run failed")
        return None, f"{type(exc).__name__}: {exc}"


def _run_many(configs, workers: int = 1):
    if workers <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, configs))


def rho_sweep(config: RunConfig, rhos=DEFAULT_RHOS, workers: int = 1, csv_path=None):
    """One run per rho with shared seeds; rows sorted by rho. Failed runs are left out of the CSV."""
    rhos = sorted(float(r) for r in rhos)
    if not rhos or min(rhos) <= 0:
        raise ValueError("rhos must be a nonempty list of positive numbers")
    base = Path(config.output_dir) if config.output_dir else None
    configs = [config.replace(rho=r, output_dir=str(base / f"rho_{r:g}") if base else None) for r in rhos]
    results = _run_many(configs, workers)
    table = []
    for r, (art, err) in zip(rhos, results):
        if art is None or not art.ok:
            log.error("rho=%g failed: %s", r, err or "run marked failed")
            continue
        table.append((r, art.report))
    path = csv_path or (base / "sweep.csv" if base else None)
    if path is not None and table:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            cols = ["rho"] + table[0][1].csv_columns()
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r, rep in table:
                w.writerow({"rho": r, **rep.flat()})
    return table


def spread(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1),
            "min": float(v.min()), "max": float(v.max()), "n": int(len(v))}


def multirun_stability(config: RunConfig, n_seeds: int = 30, modes=("baseline", "sam", "gsam"),
                       seeds=None, workers: int = 1, prepared: Prepared | None = None):
    """Run every mode over n_seeds init/sampler seeds; returns (summary, raw rows).

    summary[mode][metric] holds median, quartiles, IQR and range of the test metric.
    """
    if seeds is None:
        seeds = [config.seed + s for s in range(n_seeds)]
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    base = Path(config.output_dir) if config.output_dir else None
    configs = []
    for mode in modes:
        for i, s in enumerate(seeds):
            out = str(base / f"{mode}_run{i}_seed{s}") if base else None
            configs.append(config.replace(mode=mode, seed=s, sampler_seed=None, output_dir=out))
    if prepared is not None and workers <= 1:
        results = []
        for c in configs:
            try:
                results.append((run_training(c, prepared), None))
            except Exception as exc:
                log.exception("run failed")
                results.append((None, f"{type(exc).__name__}: {exc}"))
    else:
        results = _run_many(configs, workers)
    raw = []
    for c, (art, err) in zip(configs, results):
        ok = art is not None and art.ok
        raw.append({"mode": c.mode, "seed": c.seed, "status": "ok" if ok else "failed",
                    "recall": art.report.recall if ok else float("nan"),
                    "ndcg": art.report.ndcg if ok else float("nan"),
                    "sharpness": art.report.sharpness if ok else float("nan")})
    summary = {}
    for mode in modes:
        good = [r for r in raw if r["mode"] == mode and r["status"] == "ok"]
        if good:
            summary[mode] = {m: spread([r[m] for r in good]) for m in ("recall", "ndcg")}
    if base is not None:
        write_multirun(base, raw, summary)
    return summary, raw


def write_multirun(base: Path, raw, summary) -> None:
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "seed", "status", "recall", "ndcg", "sharpness"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(raw)
    cols = ["mode", "metric", "median", "q1", "q3", "iqr", "min", "max", "n"]
    with open(base / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for mode, metrics in summary.items():
            for metric, s in metrics.items():
                w.writerow({"mode": mode, "metric": metric, **s})
