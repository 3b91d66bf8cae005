"""All-ranking Recall@k / NDCG@k, popularity-group breakdown and one-step sharpness."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import FlatVector
from .data import GROUP_LABELS, PopularityGrouping, SplitData, sample_triplets
from .model import BPRObjective, ModelConfig, final_embeddings

SHARPNESS_BATCH = 8192


def ranking_metrics(topk, relevant, k: int):
    """(recall, ndcg, hits) for one ranked list; None when ``relevant`` is empty."""
    topk = list(topk)
    if len(topk) != k or len(set(topk)) != k:
        raise ValueError("topk must hold k distinct items")
    relevant = set(relevant)
    if not relevant:
        return None
    hits = [r for r, item in enumerate(topk) if item in relevant]
    dcg = sum(1.0 / math.log2(r + 2) for r in hits)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return len(hits) / len(relevant), dcg / idcg, len(hits)


@dataclass
class EvalReport:
    k: int
    recall: float
    ndcg: float
    num_users: int
    groups: dict = field(default_factory=dict)  # label -> {"recall", "ndcg", "num_users"}
    sharpness: float | None = None
    config: dict = field(default_factory=dict)
    per_user: list = field(default_factory=list)  # (user, recall, ndcg, hits) in user order

    def flat(self) -> dict:
        out = {"k": self.k, f"recall@{self.k}": self.recall, f"ndcg@{self.k}": self.ndcg,
               "num_users": self.num_users}
        for lab in GROUP_LABELS:
            g = self.groups.get(lab, {})
            out[f"{lab}.recall@{self.k}"] = g.get("recall", float("nan"))
            out[f"{lab}.ndcg@{self.k}"] = g.get("ndcg", float("nan"))
            out[f"{lab}.num_users"] = g.get("num_users", 0)
        out["sharpness"] = float("nan") if self.sharpness is None else self.sharpness
        for key, val in sorted(self.config.items()):
            out[f"config.{key}"] = val
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.flat().items())

    def csv_columns(self) -> list[str]:
        return list(self.flat().keys())

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.csv_columns(), lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.flat())
        return buf.getvalue()


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lower item id."""
    k = min(k, int(np.isfinite(scores).sum()))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    cand = np.argpartition(-scores, k - 1)[:k]
    kth = scores[cand].min()
    # every item tied with the k-th score competes on id
    pool = np.flatnonzero(scores >= kth)
    order = np.lexsort((pool, -scores[pool]))
    return pool[order[:k]]


def evaluate_all(table: np.ndarray, adj, layers: int, split: SplitData,
                 grouping: PopularityGrouping | None = None, k: int = 20, target: str = "test",
                 chunk: int = 512) -> EvalReport:
    """Rank every item for each user with a nonempty ``target`` set.

    Train items are masked; when ranking the test set, validation items are
    masked as well.
    """
    train = split.train
    nu, ni = train.num_users, train.num_items
    if table.shape[0] != nu + ni:
        raise ValueError(f"checkpoint has {table.shape[0]} rows, split needs {nu + ni}")
    if target not in ("test", "val"):
        raise ValueError("target must be 'test' or 'val'")
    truth = (split.test if target == "test" else split.val).items_of()
    masks = [train.items_of()] + ([split.val.items_of()] if target == "test" else [])
    emb = final_embeddings(table, adj, layers)
    users_e, items_e = emb[:nu], emb[nu:]
    labels = grouping.labels if grouping is not None else None

    per_user = []
    group_acc = {lab: [] for lab in GROUP_LABELS}
    users = [u for u in range(nu) if len(truth[u])]
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        scores = users_e[block] @ items_e.T
        for row, u in enumerate(block):
            s = scores[row]
            for m in masks:
                s[m[u]] = -np.inf
            top = _topk(s, k)
            if len(top) == 0:
                continue
            rel = truth[u]
            r, n, h = ranking_metrics(top, rel, len(top))
            per_user.append((u, r, n, h))
            if labels is not None:
                for lab in GROUP_LABELS:
                    sub = rel[labels[rel] == lab]
                    res = ranking_metrics(top, sub, len(top))
                    if res is not None:
                        group_acc[lab].append(res)
    if per_user:
        recall = float(np.mean([p[1] for p in per_user]))
        ndcg = float(np.mean([p[2] for p in per_user]))
    else:
        recall = ndcg = 0.0
    groups = {}
    if labels is not None:
        for lab, vals in group_acc.items():
            groups[lab] = {
                "recall": float(np.mean([v[0] for v in vals])) if vals else float("nan"),
                "ndcg": float(np.mean([v[1] for v in vals])) if vals else float("nan"),
                "num_users": len(vals),
                "hits": int(sum(v[2] for v in vals)),
            }
    return EvalReport(k=k, recall=recall, ndcg=ndcg, num_users=len(per_user), groups=groups,
                      per_user=per_user)


def sharpness_program(program, theta, rho: float):
    """One-step estimate of max_{|d|<=rho} L(theta + d) - L(theta) for any program.

    The perturbation spans the full parameter vector. Returns (value, degenerate).
    """
    theta = theta if isinstance(theta, FlatVector) else FlatVector(np.asarray(theta, dtype=np.float64))
    if rho <= 0:
        raise ValueError("rho must be > 0")
    base, tape = ad.evaluate(program, theta)
    g = ad.gradient(tape, "theta")
    n = g.norm()
    if n < 1e-12:
        return 0.0, True
    up, _ = ad.evaluate(program, theta + g * (rho / n))
    return up - base, False


def sharpness_batch(train, seed: int = 0, size: int = SHARPNESS_BATCH) -> np.ndarray:
    return sample_triplets(train, size, np.random.default_rng(seed))


def sharpness_estimate(table: np.ndarray, adj, config: ModelConfig, batch, num_users: int, rho: float = 0.05):
    """L(theta + rho g/|g|) - L(theta) on a fixed triplet batch; sign reported as is."""
    obj = BPRObjective(adj, config, batch, num_users)
    return sharpness_program(obj, table, rho)
