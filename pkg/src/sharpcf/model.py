"""LightGCN-style propagation, mean readout, inner-product scores and the BPR loss."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    dim: int = 64
    readout: str = "mean"
    l2_coeff: float = 1e-4
    init_std: float = 0.1

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.readout != "mean":
            raise ValueError("only the mean readout is supported")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be nonnegative")


def init_params(num_nodes: int, dim: int, seed: int, std: float = 0.1) -> np.ndarray:
    """Embedding table for users (first) then items, i.i.d. N(0, std^2)."""
    return np.random.default_rng(seed).normal(0.0, std, size=(num_nodes, dim))


def propagate(table: ad.Node, adj, layers: int) -> list[ad.Node]:
    """E(0), A E(0), ..., A^L E(0) as graph nodes."""
    if adj.shape[1] != table.shape[0]:
        raise ValueError(f"adjacency {adj.shape} does not match {table.shape[0]} embedding rows")
    out = [table]
    for _ in range(layers):
        out.append(ad.spmm(adj, out[-1], adj))  # symmetric
    return out


def readout(layer_embs: list[ad.Node]) -> ad.Node:
    total = layer_embs[0]
    for e in layer_embs[1:]:
        total = ad.add(total, e)
    return ad.scale(total, 1.0 / len(layer_embs))


def score_pairs(final: ad.Node, users, items, num_users: int) -> ad.Node:
    """y_ui = e_u . e_i for aligned arrays of user and item ids."""
    eu = ad.gather(final, np.asarray(users))
    ei = ad.gather(final, np.asarray(items) + num_users)
    return ad.rowdot(eu, ei)


def final_embeddings(table: np.ndarray, adj, layers: int) -> np.ndarray:
    """Tape-free mean readout, used for ranking."""
    acc = table.copy()
    cur = table
    for _ in range(layers):
        cur = np.asarray(adj @ cur)
        acc += cur
    return acc / (layers + 1)


def touched_rows(batch: np.ndarray, num_users: int) -> np.ndarray:
    """Sorted embedding-row ids of the users and items appearing in a triplet batch."""
    batch = np.asarray(batch)
    return np.unique(np.concatenate([batch[:, 0], batch[:, 1] + num_users, batch[:, 2] + num_users]))


class BPRObjective:
    """Batch-mean BPR loss (+ L2 on touched rows) as an autodiff program.

    Call it as ``program(theta, delta)``; ``delta`` spans ``self.rows``
    (the rows touched by the batch) and is added onto ``theta`` before
    propagation.
    """

    def __init__(self, adj, config: ModelConfig, batch, num_users: int):
        batch = np.asarray(batch, dtype=np.int64)
        if batch.ndim != 2 or batch.shape[1] != 3 or len(batch) == 0:
            raise ValueError("batch must be a nonempty (n, 3) array of (u, i, j)")
        self.adj = adj
        self.config = config
        self.batch = batch
        self.num_users = num_users
        self.num_nodes = adj.shape[0]
        self.rows = touched_rows(batch, num_users)
        if self.rows.max() >= self.num_nodes:
            raise ad.MalformedProgramError("batch references rows outside the embedding table")

    def __call__(self, theta: ad.Node, delta: ad.Node | None = None) -> ad.Node:
        table = theta
        if delta is not None:
            if delta.shape != (len(self.rows),) + theta.shape[1:]:
                raise ad.MalformedProgramError(f"delta shape {delta.shape} does not match batch rows")
            table = ad.add(theta, ad.scatter(delta, self.rows, self.num_nodes))
        final = readout(propagate(table, self.adj, self.config.layers))
        u, i, j = self.batch.T
        diff = ad.add(score_pairs(final, u, i, self.num_users), ad.neg(score_pairs(final, u, j, self.num_users)))
        n = len(self.batch)
        loss = ad.scale(ad.sum_all(ad.neg(ad.log_sigmoid(diff))), 1.0 / n)
        if self.config.l2_coeff > 0:
            ego = ad.gather(table, self.rows)
            loss = ad.add(loss, ad.scale(ad.sum_all(ad.mul(ego, ego)), self.config.l2_coeff / n))
        return loss

    def loss(self, theta: np.ndarray, delta: np.ndarray | None = None) -> float:
        with ad.no_record():
            return float(self(ad.const(theta), None if delta is None else ad.const(delta)).value)


def bpr_loss(params, adj, config: ModelConfig, batch, offset=None, num_users: int | None = None):
    """Returns (loss, tape) evaluated at params + offset."""
    if num_users is None:
        raise ValueError("num_users is required")
    obj = BPRObjective(adj, config, batch, num_users)
    params = ad.FlatVector(np.asarray(params)) if not isinstance(params, ad.FlatVector) else params
    return ad.evaluate(obj, params, offset)


# -- checkpoint files --------------------------------------------------------------------
#
# Layout (little-endian):
#   8 bytes  magic b"SCFCKPT1"
#   int64    number of rows
#   int64    embedding dimension d
#   int64    layers L
#   float64  l2 coefficient
#   int64    seed
#   int64    number of users
#   rows*d   float64, row-major

_MAGIC = b"SCFCKPT1"
_HEADER = struct.Struct("<qqqdqq")


@dataclass
class Checkpoint:
    table: np.ndarray
    layers: int
    l2_coeff: float
    seed: int
    num_users: int

    def to_bytes(self) -> bytes:
        t = np.ascontiguousarray(self.table, dtype="<f8")
        head = _HEADER.pack(t.shape[0], t.shape[1], self.layers, self.l2_coeff, self.seed, self.num_users)
        return _MAGIC + head + t.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != _MAGIC:
            raise ValueError("not a checkpoint file")
        rows, d, layers, l2, seed, nu = _HEADER.unpack_from(data, 8)
        body = data[8 + _HEADER.size:]
        if len(body) != rows * d * 8:
            raise ValueError("truncated checkpoint")
        table = np.frombuffer(body, dtype="<f8").reshape(rows, d).astype(np.float64)
        return cls(table, layers, l2, seed, nu)

    def save(self, path) -> str:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
