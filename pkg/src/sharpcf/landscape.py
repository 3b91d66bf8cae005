"""2-D loss-surface slices along filter-normalized random directions."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import FlatVector


@dataclass
class SurfaceGrid:
    a: np.ndarray  # coordinates along d1 (columns)
    b: np.ndarray  # coordinates along d2 (rows)
    losses: np.ndarray  # losses[row=b, col=a]
    base_loss: float
    direction_seed: int
    checkpoint_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def flagged(self) -> np.ndarray:
        return ~np.isfinite(self.losses)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["b\\a"] + [repr(float(x)) for x in self.a])
            for bi, row in zip(self.b, self.losses):
                w.writerow([repr(float(bi))] + [repr(float(v)) for v in row])

    def write_manifest(self, path) -> None:
        info = {
            "direction_seed": self.direction_seed,
            "checkpoint_sha256": self.checkpoint_id,
            "a_range": [float(self.a[0]), float(self.a[-1])],
            "b_range": [float(self.b[0]), float(self.b[-1])],
            "resolution": [len(self.b), len(self.a)],
            "base_loss": self.base_loss,
            "flagged_cells": int(self.flagged.sum()),
            **self.meta,
        }
        with open(path, "w") as fh:
            json.dump(info, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_csv(path):
    """Inverse of SurfaceGrid.write_csv: returns (a, b, losses)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    a = np.array([float(x) for x in rows[0][1:]])
    b = np.array([float(r[0]) for r in rows[1:]])
    losses = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return a, b, losses


def filter_normalized_directions(params, seed: int):
    """Two random directions, each row rescaled to the norm of the matching parameter row.

    The second direction is then made orthogonal to the first over the whole vector.
    """
    table = params.values if isinstance(params, FlatVector) else np.asarray(params, dtype=np.float64)
    if table.size == 0:
        raise ValueError("empty parameter set")
    table2 = table.reshape(table.shape[0], -1)
    rng = np.random.default_rng(seed)
    row_norm = np.linalg.norm(table2, axis=1)
    dirs = []
    for _ in range(2):
        d = rng.standard_normal(table2.shape)
        dn = np.linalg.norm(d, axis=1)
        scale = np.where(row_norm < 1e-12, 0.0, row_norm / np.where(dn == 0, 1.0, dn))
        dirs.append(d * scale[:, None])
    d1, d2 = dirs
    denom = np.vdot(d1, d1)
    if denom > 0:
        d2 = d2 - (np.vdot(d2, d1) / denom) * d1
    return d1.reshape(table.shape), d2.reshape(table.shape)


def grid_coords(lo: float, hi: float, n: int) -> np.ndarray:
    # midpoint of a symmetric range comes out as exactly 0.0
    return np.array([lo + (hi - lo) * i / (n - 1) for i in range(n)])


def loss_surface_grid(loss_fn, params, d1, d2, range_a=(-1.0, 1.0), range_b=None, n: int = 25,
                      direction_seed: int = 0, checkpoint_id: str = "") -> SurfaceGrid:
    """losses[j, i] = loss_fn(theta + a_i d1 + b_j d2); non-finite cells are kept as NaN."""
    if n < 3 or n % 2 == 0:
        raise ValueError("n must be odd and >= 3")
    theta = params.values if isinstance(params, FlatVector) else np.asarray(params, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    range_b = range_a if range_b is None else range_b
    a = grid_coords(*range_a, n)
    b = grid_coords(*range_b, n)
    base = _safe(loss_fn, theta)
    losses = np.empty((n, n))
    for j, bj in enumerate(b):
        for i, ai in enumerate(a):
            losses[j, i] = _safe(loss_fn, theta + ai * d1 + bj * d2)
    return SurfaceGrid(a, b, losses, base, direction_seed, checkpoint_id)


def _safe(loss_fn, x) -> float:
    try:
        v = float(loss_fn(x))
    except FloatingPointError:
        return float("nan")
    return v if np.isfinite(v) else float("nan")
