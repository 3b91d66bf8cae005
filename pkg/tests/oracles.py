"""Independent reference computations used by the tests.

Nothing here calls the tape's backward pass: derivatives come from finite
differences of forward values, and the model/metrics are recomputed with
plain loops or dense matrices.
"""
import math

import numpy as np

from sharpcf import autodiff as ad
from sharpcf.data import from_pairs


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def fd_directional(gradf, x, v, h=1e-4):
    """(grad f(x + h v) - grad f(x - h v)) / 2h."""
    return (gradf(x + h * v) - gradf(x - h * v)) / (2 * h)


def rel_err(a, b):
    """Per-coordinate relative error, with coordinates far below the vector scale measured against that scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(b), np.abs(b).max() if b.size else 0.0)
    scale = np.where(scale == 0, 1.0, scale)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def program_value(program, theta, delta=None):
    with ad.no_record():
        out = program(ad.const(theta), None if delta is None else ad.const(delta))
    return float(out.value)


def dense_norm_adj(num_users, num_items, pairs):
    n = num_users + num_items
    a = np.zeros((n, n))
    for u, i in pairs:
        a[u, num_users + i] = 1.0
        a[num_users + i, u] = 1.0
    deg = a.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return dinv[:, None] * a * dinv[None, :]


def direct_bpr(table, adj_dense, layers, batch, num_users, l2=0.0):
    """Scalar-by-scalar BPR loss with mean readout."""
    embs = [np.array(table, dtype=np.float64)]
    for _ in range(layers):
        prev = embs[-1]
        nxt = np.zeros_like(prev)
        for r in range(adj_dense.shape[0]):
            for c in range(adj_dense.shape[1]):
                if adj_dense[r, c] != 0.0:
                    nxt[r] += adj_dense[r, c] * prev[c]
        embs.append(nxt)
    final = sum(embs) / len(embs)
    total = 0.0
    for u, i, j in batch:
        yui = sum(final[u, t] * final[num_users + i, t] for t in range(final.shape[1]))
        yuj = sum(final[u, t] * final[num_users + j, t] for t in range(final.shape[1]))
        z = yui - yuj
        total += math.log1p(math.exp(-z)) if z > -30 else -z
    loss = total / len(batch)
    if l2:
        rows = sorted({int(u) for u, _, _ in batch} | {num_users + int(i) for _, i, _ in batch}
                      | {num_users + int(j) for _, _, j in batch})
        loss += l2 * sum(float(table[r] @ table[r]) for r in rows) / len(batch)
    return loss


def random_graph(rng, num_users=5, num_items=5, density=0.4):
    pairs = [(u, i) for u in range(num_users) for i in range(num_items) if rng.random() < density]
    # every user and item gets at least one edge
    for u in range(num_users):
        pairs.append((u, int(rng.integers(num_items))))
    for i in range(num_items):
        pairs.append((int(rng.integers(num_users)), i))
    return from_pairs(pairs, num_users, num_items)


def random_batch(rng, data, size):
    sets = [set(map(int, it)) for it in data.items_of()]
    out = []
    while len(out) < size:
        k = int(rng.integers(len(data.pairs)))
        u, i = map(int, data.pairs[k])
        negs = [j for j in range(data.num_items) if j not in sets[u]]
        if not negs:
            continue
        out.append((u, i, negs[int(rng.integers(len(negs)))]))
    return np.array(out, dtype=np.int64)


def brute_metrics(ranked, relevant, k):
    """Recall/NDCG by walking rank positions."""
    relevant = set(relevant)
    hits, dcg = 0, 0.0
    for pos in range(k):
        if ranked[pos] in relevant:
            hits += 1
            dcg += 1.0 / math.log2(pos + 2)
    idcg = 0.0
    for pos in range(min(k, len(relevant))):
        idcg += 1.0 / math.log2(pos + 2)
    return hits / len(relevant), dcg / idcg


def brute_rank(scores, masked, k):
    """Full sort (score desc, id asc) with masked items removed."""
    items = [i for i in range(len(scores)) if i not in masked]
    items.sort(key=lambda i: (-scores[i], i))
    return items[:k]


class QuadraticBilevel:
    """Inner: 1/2 d'Ad - d'B t, so d*(t) = A^-1 B t. Outer: sum sigmoid(t + d) + c * sum(t * d)."""

    def __init__(self, rng, n=4, c=0.3):
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        self.A = q @ np.diag(rng.uniform(0.3, 0.95, size=n)) @ q.T
        self.B = rng.normal(size=(n, n)) / np.sqrt(n)
        self.c = c
        self.n = n

    def inner(self, theta, delta):
        quad = ad.scale(ad.sum_all(ad.mul(delta, ad.spmm(self.A, delta))), 0.5)
        return ad.add(quad, ad.neg(ad.sum_all(ad.mul(delta, ad.spmm(self.B, theta)))))

    def outer(self, theta, delta):
        return ad.add(ad.sum_all(ad.sigmoid(ad.add(theta, delta))),
                      ad.scale(ad.sum_all(ad.mul(theta, delta)), self.c))

    def solve(self, theta):
        return np.linalg.solve(self.A, self.B @ theta)

    def total(self, theta):
        d = self.solve(theta)
        return float(np.sum(1.0 / (1.0 + np.exp(-(theta + d)))) + self.c * np.dot(theta, d))


def random_spd(rng, n=10, lo=0.05, hi=0.95):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(rng.uniform(lo, hi, size=n)) @ q.T


def random_op_program(rng, n=5, d=3, depth=4):
    """A random chain over the closed op set; returns (program, theta, delta rows, delta)."""
    rows = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
    mats = [rng.normal(size=(n, n)) / np.sqrt(n) for _ in range(depth)]
    perm = rng.integers(0, n, size=n)
    weights = rng.normal(size=(n, d))
    kinds = rng.integers(0, 8, size=depth)

    def program(theta, delta):
        x = theta if delta is None else ad.add(theta, ad.scatter(delta, rows, n))
        x0 = x
        for m, kind in zip(mats, kinds):
            if kind == 0:
                x = ad.spmm(m, x)
            elif kind == 1:
                x = ad.sigmoid(x)
            elif kind == 2:
                x = ad.add(x, ad.scale(ad.mul(x, x0), 0.5))
            elif kind == 3:
                x = ad.rowscale(ad.rowdot(x, x0), ad.spmm(m, x))
            elif kind == 4:
                x = ad.log_sigmoid(x)
            elif kind == 5:
                one = ad.expand(ad.const(np.float64(1.0)), x.shape)
                x = ad.reciprocal(ad.add(one, ad.mul(x, x)))
            elif kind == 6:
                x = ad.add(ad.gather(x, perm), ad.neg(ad.log(ad.sigmoid(x))))
            else:
                x = ad.add(ad.scatter(ad.gather(x, perm), perm, n), ad.spmm(m, x, m.T))
        return ad.sum_all(ad.mul(x, ad.const(weights)))

    theta = rng.normal(0, 0.7, size=(n, d))
    delta = rng.normal(0, 0.2, size=(len(rows), d))
    return program, theta, rows, delta
