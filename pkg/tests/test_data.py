import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sharpcf import data as gd

from oracles import dense_norm_adj, random_graph


def write(tmp_path, text):
    p = tmp_path / "inter.txt"
    p.write_text(text)
    return p


class TestLoad:
    def test_small_file(self, tmp_path):
        d = gd.load_interactions(write(tmp_path, "0 1 2\n1 2\n"))
        assert (d.num_users, d.num_items, len(d)) == (2, 2, 3)
        assert d.item_ids.tolist() == [1, 2]
        assert d.pairs.tolist() == [[0, 0], [0, 1], [1, 1]]

    def test_duplicates(self, tmp_path):
        d = gd.load_interactions(write(tmp_path, "0 1 1\n"))
        assert len(d) == 1 and d.duplicates == 1

    def test_format_error_has_line(self, tmp_path):
        with pytest.raises(gd.DataFormatError, match=":2:"):
            gd.load_interactions(write(tmp_path, "0 1\n1 x\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(gd.EmptyDatasetError):
            gd.load_interactions(write(tmp_path, "\n\n"))

    def test_sparse_raw_ids_round_trip(self, tmp_path):
        d = gd.load_interactions(write(tmp_path, "10 500 7\n3 7\n"))
        assert d.user_ids.tolist() == [3, 10]
        out = tmp_path / "out.txt"
        gd.save_interactions(d, out)
        again = gd.load_interactions(out)
        assert again.pairs.tolist() == d.pairs.tolist()


class TestSplit:
    def test_ten_interactions(self):
        d = gd.from_pairs([(0, i) for i in range(10)])
        s = gd.split_holdout(d, seed=1)
        assert (len(s.train), len(s.val), len(s.test)) == (8, 1, 1)

    def test_single_interaction(self):
        d = gd.from_pairs([(0, 0), (1, 0), (1, 1)])
        s = gd.split_holdout(d, seed=0)
        assert s.singletons == 1
        assert [0, 0] in s.train.pairs.tolist()

    def test_seeded(self):
        d = gd.from_pairs([(0, i) for i in range(100)])
        a, b = gd.split_holdout(d, seed=5), gd.split_holdout(d, seed=5)
        assert a.val.pairs.tolist() == b.val.pairs.tolist()
        c = gd.split_holdout(d, seed=6)
        assert a.val.pairs.tolist() != c.val.pairs.tolist()

    def test_bad_ratios(self):
        d = gd.from_pairs([(0, 0)])
        with pytest.raises(ValueError):
            gd.split_holdout(d, (0.5, 0.5, 0.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 40))
    def test_disjoint_union(self, seed, per_user):
        rng = np.random.default_rng(seed)
        pairs = [(u, int(i)) for u in range(6) for i in rng.choice(50, size=int(rng.integers(1, per_user + 1)), replace=False)]
        d = gd.from_pairs(pairs, 6, 50)
        s = gd.split_holdout(d, seed=seed)
        sets = [set(map(tuple, p.pairs.tolist())) for p in (s.train, s.val, s.test)]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sets[0] | sets[1] | sets[2] == set(map(tuple, d.pairs.tolist()))
        deg = s.train.user_degrees()
        assert all(deg[u] >= 1 for u in range(6) if d.user_degrees()[u] >= 2)

    def test_manifest(self, tmp_path):
        d = gd.from_pairs([(0, i) for i in range(10)])
        s = gd.split_holdout(d, seed=3)
        gd.write_split_manifest(s, tmp_path / "split.json")
        m = json.loads((tmp_path / "split.json").read_text())
        assert m["seed"] == 3 and m["counts"] == {"train": 8, "val": 1, "test": 1}


class TestAdjacency:
    def test_single_edge(self):
        a = gd.normalized_adjacency(gd.from_pairs([(0, 0)]))
        assert a.toarray().tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_star(self):
        a = gd.normalized_adjacency(gd.from_pairs([(0, 0), (0, 1)])).toarray()
        assert a[0, 1] == pytest.approx(1 / np.sqrt(2)) and a[0, 2] == pytest.approx(0.70711, abs=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense(self, seed):
        d = random_graph(np.random.default_rng(seed), 20, 20, 0.2)
        a = gd.normalized_adjacency(d)
        assert a.nnz == 2 * len(d)
        np.testing.assert_array_equal(a.toarray(), dense_norm_adj(20, 20, d.pairs))
        assert (a != a.T).nnz == 0


class TestTriplets:
    def test_single_negative(self):
        train = gd.from_pairs([(0, 0)], 1, 2)
        b = gd.sample_triplets(train, 50, np.random.default_rng(0))
        assert set(b[:, 2].tolist()) == {1}

    def test_bad_batch(self):
        with pytest.raises(ValueError):
            gd.sample_triplets(gd.from_pairs([(0, 0)], 1, 2), 0, np.random.default_rng(0))

    def test_saturated_user_skipped(self):
        train = gd.from_pairs([(0, 0), (0, 1), (1, 0)], 2, 2)
        s = gd.TripletSampler(train, 0)
        b = s.sample(100)
        assert set(b[:, 0].tolist()) == {1} and s.skipped == 100 - len(b)

    def test_negatives_never_observed(self):
        d = random_graph(np.random.default_rng(3), 8, 8, 0.5)
        b = gd.sample_triplets(d, 2000, np.random.default_rng(1))
        observed = set(map(tuple, d.pairs.tolist()))
        assert all((u, i) in observed for u, i, _ in b)
        assert all((u, j) not in observed for u, _, j in b)

    def test_negative_distribution_uniform(self):
        train = gd.from_pairs([(0, 0), (0, 3), (0, 7)], 1, 10)
        b = gd.sample_triplets(train, 100_000, np.random.default_rng(11))
        counts = np.bincount(b[:, 2], minlength=10)
        negs = [j for j in range(10) if j not in (0, 3, 7)]
        assert counts[[0, 3, 7]].sum() == 0
        assert stats.chisquare(counts[negs]).pvalue > 0.01


class TestPopularity:
    def test_uniform_degrees(self):
        train = gd.from_pairs([(i % 4, i) for i in range(30)], 4, 30)
        g = gd.popularity_groups(train)
        sizes = [len(g.members(lab)) for lab in gd.GROUP_LABELS]
        assert all(abs(s - 10) <= 1 for s in sizes)

    def test_one_dominant_item(self):
        pairs = [(u, 0) for u in range(90)] + [(u, 1 + u) for u in range(10)]
        g = gd.popularity_groups(gd.from_pairs(pairs))
        assert g.members(gd.POPULAR).tolist() == [0]

    def test_power_law_masses(self):
        d = gd.synthetic_powerlaw(400, 800, 30, seed=2)
        g = gd.popularity_groups(d)
        deg = d.item_degrees()
        for lab in gd.GROUP_LABELS:
            share = deg[g.labels == lab].sum() / deg.sum()
            assert 0.28 <= share <= 0.39

    def test_monotone_labels(self):
        d = gd.synthetic_powerlaw(200, 300, 20, seed=4)
        g = gd.popularity_groups(d)
        deg = d.item_degrees()
        rank = {gd.UNPOPULAR: 0, gd.NORMAL: 1, gd.POPULAR: 2}
        r = np.array([rank[x] for x in g.labels])
        order = np.argsort(deg)
        assert np.all(np.diff(r[order]) >= 0) or all(
            r[a] <= r[b] for a in range(len(deg)) for b in range(len(deg)) if deg[a] < deg[b])
