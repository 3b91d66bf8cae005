"""Interaction data: loading, per-user holdout split, normalized adjacency,
BPR triplet sampling and item popularity groups."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

UNPOPULAR, NORMAL, POPULAR = "Unpopular", "Normal", "Popular"
GROUP_LABELS = (UNPOPULAR, NORMAL, POPULAR)


class DataFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class InteractionData:
    num_users: int
    num_items: int
    pairs: np.ndarray  # (n, 2) int64, sorted by (user, item)
    user_ids: np.ndarray | None = None  # internal -> raw
    item_ids: np.ndarray | None = None
    duplicates: int = 0

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.user_ids is None:
            self.user_ids = np.arange(self.num_users)
        if self.item_ids is None:
            self.item_ids = np.arange(self.num_items)
        self._items_of = None

    def __len__(self):
        return len(self.pairs)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def items_of(self) -> list[np.ndarray]:
        """Per-user sorted item arrays."""
        if self._items_of is None:
            order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0]))
            p = self.pairs[order]
            cuts = np.searchsorted(p[:, 0], np.arange(self.num_users + 1))
            self._items_of = [p[cuts[u]:cuts[u + 1], 1] for u in range(self.num_users)]
        return self._items_of

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.num_items)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 0], minlength=self.num_users)

    def with_pairs(self, pairs) -> "InteractionData":
        """Same id spaces, different pair set."""
        return InteractionData(self.num_users, self.num_items, pairs, self.user_ids, self.item_ids)

    def id_map(self) -> dict:
        return {"users": self.user_ids.tolist(), "items": self.item_ids.tolist()}


def from_pairs(pairs, num_users=None, num_items=None) -> InteractionData:
    """Build from already-dense (user, item) ids, dropping duplicates."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    uniq = np.unique(pairs, axis=0)
    nu = int(pairs[:, 0].max()) + 1 if num_users is None else num_users
    ni = int(pairs[:, 1].max()) + 1 if num_items is None else num_items
    return InteractionData(nu, ni, uniq, duplicates=len(pairs) - len(uniq))


def load_interactions(path) -> InteractionData:
    """Read a '<user> <item> <item> ...' per-line file. Raw ids are remapped densely."""
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            try:
                ids = [int(t) for t in toks]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            u = ids[0]
            raw.extend((u, i) for i in ids[1:])
    if not raw:
        raise EmptyDatasetError(f"{path}: no interactions")
    raw = np.asarray(raw, dtype=np.int64)
    user_ids, users = np.unique(raw[:, 0], return_inverse=True)
    item_ids, items = np.unique(raw[:, 1], return_inverse=True)
    pairs = np.stack([users.ravel(), items.ravel()], axis=1)
    uniq = np.unique(pairs, axis=0)
    dup = len(pairs) - len(uniq)
    if dup:
        log.info("%s: dropped %d duplicate pairs", path, dup)
    return InteractionData(len(user_ids), len(item_ids), uniq, user_ids, item_ids, duplicates=dup)


def save_interactions(data: InteractionData, path) -> None:
    """Write in the same line format, using raw ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(data.items_of()):
            if len(items):
                toks = [str(data.user_ids[u])] + [str(data.item_ids[i]) for i in items]
                fh.write(" ".join(toks) + "\n")


@dataclass
class SplitData:
    train: InteractionData
    val: InteractionData
    test: InteractionData
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)
    singletons: int = 0

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "num_users": self.train.num_users,
            "num_items": self.train.num_items,
            "counts": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
            "singleton_users": self.singletons,
        }


def split_holdout(data: InteractionData, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitData:
    """Per-user random split. Val/test sizes are rounded to nearest; train keeps the rest."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    singletons = 0
    for u, items in enumerate(data.items_of()):
        n = len(items)
        if n == 0:
            continue
        if n == 1:
            singletons += 1
            parts[0].append((u, items[0]))
            continue
        shuffled = items[rng.permutation(n)]
        n_val = int(math.floor(ratios[1] * n + 0.5))
        n_test = int(math.floor(ratios[2] * n + 0.5))
        while n - n_val - n_test < 1:
            if n_test >= n_val:
                n_test -= 1
            else:
                n_val -= 1
        n_train = n - n_val - n_test
        parts[0].extend((u, i) for i in shuffled[:n_train])
        parts[1].extend((u, i) for i in shuffled[n_train:n_train + n_val])
        parts[2].extend((u, i) for i in shuffled[n_train + n_val:])
    if singletons:
        log.warning("%d users with a single interaction kept entirely in train", singletons)

    def build(p):
        arr = np.asarray(p, dtype=np.int64).reshape(-1, 2)
        if len(arr):
            arr = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
        return data.with_pairs(arr)

    return SplitData(build(parts[0]), build(parts[1]), build(parts[2]), seed, ratios, singletons)


def write_split_manifest(split: SplitData, path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), indent=2, sort_keys=True) + "\n")


def normalized_adjacency(train: InteractionData) -> sp.csr_matrix:
    """Symmetric D^-1/2 A D^-1/2 over users then items; shape (U+I, U+I)."""
    if len(train) == 0:
        raise EmptyDatasetError("normalized adjacency needs at least one train pair")
    nu, n = train.num_users, train.num_nodes
    u = train.pairs[:, 0]
    i = train.pairs[:, 1] + nu
    du = np.bincount(u, minlength=n).astype(np.float64)
    di = np.bincount(i, minlength=n).astype(np.float64)
    deg = du + di
    dinv = np.zeros(n)
    dinv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    w = dinv[u] * dinv[i]
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    vals = np.concatenate([w, w])
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj


class TripletSampler:
    """Owns an RNG and draws BPR triplet batches from one train set."""

    def __init__(self, train: InteractionData, seed: int = 0):
        self.train = train
        self.rng = np.random.default_rng(seed)
        self.skipped = 0

    def sample(self, batch_size: int) -> np.ndarray:
        batch = sample_triplets(self.train, batch_size, self.rng)
        self.skipped += batch_size - len(batch)
        return batch


def _pair_keys(train: InteractionData) -> np.ndarray:
    keys = getattr(train, "_keys", None)
    if keys is None:
        keys = np.sort(train.pairs[:, 0] * train.num_items + train.pairs[:, 1])
        train._keys = keys
    return keys


def _is_observed(train, users, items) -> np.ndarray:
    keys = _pair_keys(train)
    q = users * train.num_items + items
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, len(keys) - 1)
    return keys[pos] == q


def sample_triplets(train: InteractionData, batch_size: int, rng) -> np.ndarray:
    """(u, i) uniform over train pairs; j uniform over items u has not interacted with.

    Users who interacted with every item are skipped (with a warning), so the
    batch can be shorter than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = train.pairs
    idx = rng.integers(0, len(pairs), size=batch_size)
    users, pos = pairs[idx, 0], pairs[idx, 1]
    keep = train.user_degrees()[users] < train.num_items
    if not keep.all():
        log.warning("skipped %d triplets for users with no negatives", int((~keep).sum()))
        users, pos = users[keep], pos[keep]
    neg = rng.integers(0, train.num_items, size=len(users))
    bad = np.flatnonzero(_is_observed(train, users, neg))
    while len(bad):
        neg[bad] = rng.integers(0, train.num_items, size=len(bad))
        bad = bad[_is_observed(train, users[bad], neg[bad])]
    return np.stack([users, pos, neg], axis=1)


@dataclass
class PopularityGrouping:
    labels: np.ndarray  # per item, values from GROUP_LABELS
    thresholds: dict = field(default_factory=dict)  # label -> (min degree, max degree)

    def members(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def describe(self) -> dict:
        return {"rule": "equal train-interaction mass thirds, items ordered by (-degree, id)",
                "thresholds": {k: list(v) for k, v in self.thresholds.items()}}


def popularity_groups(train: InteractionData) -> PopularityGrouping:
    """Cut items, ordered by descending train degree, into three groups of ~equal interaction mass."""
    if len(train) == 0:
        raise EmptyDatasetError("popularity groups need train pairs")
    deg = train.item_degrees()
    n = len(deg)
    order = np.lexsort((np.arange(n), -deg))
    cum = np.cumsum(deg[order]) / deg.sum()
    # cut after position k (k items in the group above the cut)
    if n >= 3:
        ks = np.arange(1, n - 1)
        k1 = int(ks[np.argmin(np.abs(cum[ks - 1] - 1 / 3))])
        ks2 = np.arange(k1 + 1, n)
        k2 = int(ks2[np.argmin(np.abs(cum[ks2 - 1] - 2 / 3))])
    else:
        k1, k2 = min(1, n), n
    labels = np.empty(n, dtype=object)
    labels[order[:k1]] = POPULAR
    labels[order[k1:k2]] = NORMAL
    labels[order[k2:]] = UNPOPULAR
    thresholds = {}
    for lab, sl in ((POPULAR, order[:k1]), (NORMAL, order[k1:k2]), (UNPOPULAR, order[k2:])):
        if len(sl):
            thresholds[lab] = (int(deg[sl].min()), int(deg[sl].max()))
    return PopularityGrouping(labels.astype(str), thresholds)


def synthetic_powerlaw(num_users=1000, num_items=2000, mean_degree=50, clusters=10,
                       affinity=0.8, zipf=1.0, seed=0) -> InteractionData:
    """Clustered implicit-feedback data with power-law item popularity.

    Each user belongs to a cluster and draws ``affinity`` of its items from
    that cluster's items, the rest from the whole catalogue; item draws are
    weighted by a Zipf popularity. User degrees are lognormal around
    ``mean_degree``.
    """
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, num_items + 1) ** zipf
    pop = pop[rng.permutation(num_items)]
    item_cluster = rng.integers(0, clusters, size=num_items)
    user_cluster = rng.integers(0, clusters, size=num_users)
    sigma = 0.5
    degrees = rng.lognormal(np.log(mean_degree) - sigma ** 2 / 2, sigma, size=num_users)
    degrees = np.clip(np.round(degrees), 3, num_items // 2).astype(int)
    global_p = pop / pop.sum()
    cluster_p = []
    for c in range(clusters):
        w = np.where(item_cluster == c, pop, 0.0)
        cluster_p.append(w / w.sum() if w.sum() > 0 else global_p)  # empty cluster: no affinity
    pairs = []
    for u in range(num_users):
        p = affinity * cluster_p[user_cluster[u]] + (1 - affinity) * global_p
        k = min(degrees[u], int((p > 0).sum()))
        items = rng.choice(num_items, size=k, replace=False, p=p)
        pairs.extend((u, int(i)) for i in items)
    data = from_pairs(pairs, num_users, num_items)
    # drop items nobody picked so every id occurs
    used = np.unique(data.pairs[:, 1])
    remap = -np.ones(num_items, dtype=np.int64)
    remap[used] = np.arange(len(used))
    pairs = np.stack([data.pairs[:, 0], remap[data.pairs[:, 1]]], axis=1)
    return InteractionData(num_users, len(used), pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))],
                           item_ids=used)


def synthetic_separable(num_users=60, num_items=120, clusters=6, per_user=10, seed=0) -> InteractionData:
    """Each user interacts only with items of its own cluster."""
    rng = np.random.default_rng(seed)
    size = num_items // clusters
    pairs = []
    for u in range(num_users):
        c = u % clusters
        items = rng.choice(np.arange(c * size, (c + 1) * size), size=min(per_user, size), replace=False)
        pairs.extend((u, int(i)) for i in items)
    return from_pairs(pairs, num_users, clusters * size)
