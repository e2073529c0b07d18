import numpy as np
import pytest

import oracles
from vithash.dual_stream import HashVectorSet
from vithash.autodiff import Tensor
from vithash.errors import ContractError, FormatError
from vithash.retrieval import (
    CodeIndex,
    HashCode,
    average_precision,
    average_precision_at_n,
    binarize,
    hamming_distance,
    index_from_bytes,
    index_to_bytes,
    load_index,
    mean_ap,
    pack_bits,
    precision_at_topk,
    precision_recall_by_rank,
    precision_recall_curve,
    rank,
    save_index,
    unpack_bits,
)


def random_instance(rng, nbits=None, n_gallery=None, n_query=None):
    nbits = nbits or int(rng.integers(8, 65))
    n_gallery = n_gallery or int(rng.integers(1, 65))
    n_query = n_query or int(rng.integers(1, 6))
    classes = int(rng.integers(2, 5))
    g = np.where(rng.random((n_gallery, nbits)) < 0.5, 1, -1)
    q = np.where(rng.random((n_query, nbits)) < 0.5, 1, -1)
    # a few multi-label items exercise the overlap rule
    gl = [tuple({int(rng.integers(classes)), int(rng.integers(classes))}) for _ in range(n_gallery)]
    ql = [(int(rng.integers(classes)),) for _ in range(n_query)]
    return q, ql, g, gl


def build(values, labels, ids=None):
    codes = [HashCode.from_values(v) for v in values]
    return CodeIndex.build(codes, range(len(codes)) if ids is None else ids, labels)


class TestPacking:
    def test_roundtrip(self, rng):
        for nbits in (1, 7, 63, 64, 65, 130):
            v = rng.standard_normal((5, nbits))
            np.testing.assert_array_equal(unpack_bits(pack_bits(v), nbits), np.where(v > 0, 1, -1))

    def test_bit_layout(self):
        v = -np.ones(70)
        v[[0, 3, 64]] = 1
        words = pack_bits(v)
        assert words.tolist() == [0b1001, 1]

    def test_zero_maps_to_minus_one(self):
        assert HashCode.from_values([0.0, 1.0, -0.0]).signs().tolist() == [-1, 1, -1]

    def test_binarize_order_global_first(self):
        hset = HashVectorSet(Tensor(np.array([[1.0, -1.0]])), [Tensor(np.array([[-2.0]])), Tensor(np.array([[3.0]]))])
        (code,) = binarize(hset, expected_bits=4)
        assert code.signs().tolist() == [1, -1, -1, 1]

    def test_binarize_all_positive(self, rng):
        codes = binarize([rng.uniform(0.1, 1, (3, 10))])
        assert all(c.signs().tolist() == [1] * 10 for c in codes)

    def test_binarize_length_mismatch(self):
        with pytest.raises(ContractError):
            binarize([np.ones((1, 6))], expected_bits=8)


class TestHamming:
    def test_self_and_complement(self, rng):
        v = np.where(rng.random(64) < 0.5, 1.0, -1.0)
        a, b = HashCode.from_values(v), HashCode.from_values(-v)
        assert hamming_distance(a, a) == 0
        assert hamming_distance(a, b) == 64

    def test_against_naive_loop(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            nbits = int(rng.integers(1, 130))
            a, b = np.where(rng.random((2, nbits)) < 0.5, 1, -1)
            got = hamming_distance(HashCode.from_values(a), HashCode.from_values(b))
            assert got == oracles.hamming(a.tolist(), b.tolist())

    def test_metric_axioms(self, rng):
        for _ in range(200):
            x, y, z = (HashCode.from_values(v) for v in rng.standard_normal((3, 40)))
            assert hamming_distance(x, y) == hamming_distance(y, x)
            assert hamming_distance(x, z) <= hamming_distance(x, y) + hamming_distance(y, z)
            assert (hamming_distance(x, y) == 0) == (x == y)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            hamming_distance(HashCode.from_values(np.ones(8)), HashCode.from_values(np.ones(9)))


class TestRank:
    def test_single_item(self):
        idx = build([np.ones(8)], [(0,)], ids=[42])
        assert rank(HashCode.from_values(-np.ones(8)), idx) == [(42, 8)]

    def test_exact_match_first(self, rng):
        g = rng.standard_normal((10, 16))
        idx = build(g, [(0,)] * 10)
        assert rank(HashCode.from_values(g[6]), idx)[0] == (6, 0)

    def test_against_sort_oracle(self, rng):
        for _ in range(50):
            q, _, g, gl = random_instance(rng, nbits=8)
            idx = build(g, gl, ids=np.arange(len(g)) + 100)
            got = rank(HashCode.from_values(q[0]), idx)
            want = oracles.ranked(q[0].tolist(), g.tolist())
            assert [i - 100 for i, _ in got] == want
            dists = [d for _, d in got]
            assert dists == sorted(dists)

    def test_empty_index(self):
        idx = CodeIndex.build([], [], [])
        with pytest.raises(ContractError):
            rank(HashCode.from_values(np.ones(4)), idx)

    def test_index_is_immutable(self, rng):
        idx = build(rng.standard_normal((3, 8)), [(0,)] * 3)
        with pytest.raises(ValueError):
            idx.words[0, 0] = 1
        with pytest.raises(AttributeError):
            idx.nbits = 3

    def test_parallel_arrays_checked(self):
        with pytest.raises(ContractError):
            CodeIndex.build([HashCode.from_values(np.ones(4))], [0, 1], [(0,)])


class TestAveragePrecision:
    @pytest.mark.parametrize(
        "rel,n,expected",
        [([1, 1, 0, 0], 4, 1.0), ([0, 1], 2, 0.5), ([0, 0, 1], 2, 0.0), ([1, 0, 1], 3, (1 + 2 / 3) / 2)],
    )
    def test_hand_values(self, rel, n, expected):
        assert average_precision(rel, n) == pytest.approx(expected, abs=1e-15)

    def test_range_and_perfect_prefix(self, rng):
        rel = rng.random(30) < 0.4
        for n in range(1, 31):
            ap = average_precision(rel, n)
            top = rel[:n]
            assert 0.0 <= ap <= 1.0
            # AP is 1 exactly when the hits in the top n come before every miss
            perfect = top.any() and not np.any(np.diff(top.astype(int)) > 0)
            assert (ap == 1.0) == perfect

    def test_extending_list_keeps_prefix_ap(self, rng):
        rel = list(rng.random(20) < 0.5)
        assert average_precision(rel, 10) == average_precision(rel[:10] + [True] * 5, 10)

    def test_from_rank_output(self):
        idx = build([np.ones(4), -np.ones(4)], [(1,), (0,)], ids=[5, 9])
        ranking = rank(HashCode.from_values(np.ones(4)), idx)
        assert average_precision_at_n(ranking, (0,), 2, index=idx) == 0.5
        assert average_precision_at_n([{0}, {1}], (0,), 2) == 1.0

    def test_errors(self):
        with pytest.raises(ContractError):
            average_precision([1], 0)
        with pytest.raises(ContractError):
            average_precision_at_n([], (0,), 3)


class TestMetricsAgainstOracle:
    def test_map_precision_pr(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            q, ql, g, gl = random_instance(rng)
            qi, gi = build(q, ql), build(g, gl)
            nbits = q.shape[1]
            n = int(rng.integers(1, len(g) + 1))
            args = (q.tolist(), ql, g.tolist(), gl)
            assert abs(mean_ap(qi, gi, n) - oracles.mean_ap(*args, n)) < 1e-12
            assert abs(mean_ap(qi, gi) - oracles.mean_ap(*args, len(g))) < 1e-12
            ks = sorted({1, n, len(g)})
            for k, got in zip(ks, precision_at_topk(qi, gi, ks)):
                assert abs(got - oracles.precision_at(*args, k)) < 1e-12
            got = [(p.threshold, p.recall, p.precision) for p in precision_recall_curve(qi, gi)]
            want = oracles.pr_radius(*args, nbits)
            assert [t for t, _, _ in got] == [t for t, _, _ in want]
            for a, b in zip(got, want):
                assert abs(a[1] - b[1]) < 1e-12 and abs(a[2] - b[2]) < 1e-12

    def test_threads_do_not_change_results(self, rng, monkeypatch):
        q, ql, g, gl = random_instance(rng, nbits=32, n_gallery=40, n_query=5)
        qi, gi = build(q, ql), build(g, gl)
        single = mean_ap(qi, gi)
        monkeypatch.setenv("THASH_THREADS", "4")
        assert mean_ap(qi, gi) == single


class TestHandBuilt:
    # query +1+1+1+1; gallery at distances 0, 1, 2, 4 with relevance 1, 0, 1, 0
    gallery = np.array([[1, 1, 1, 1], [1, 1, 1, -1], [1, 1, -1, -1], [-1, -1, -1, -1]])
    labels = [(0,), (1,), (0,), (1,)]

    def indices(self):
        return build(np.ones((1, 4)), [(0,)]), build(self.gallery, self.labels)

    def test_map(self):
        assert mean_ap(*self.indices()) == pytest.approx((1 + 2 / 3) / 2)

    def test_precision_at_k(self):
        assert precision_at_topk(*self.indices(), [1, 2, 3, 4]) == pytest.approx([1.0, 0.5, 2 / 3, 0.5])

    def test_pr_points(self):
        points = precision_recall_curve(*self.indices())
        assert [(p.threshold, p.recall, p.precision) for p in points] == pytest.approx(
            [(0, 0.5, 1.0), (1, 0.5, 0.5), (2, 1.0, 2 / 3), (3, 1.0, 2 / 3), (4, 1.0, 0.5)]
        )

    def test_rank_curve(self):
        points = precision_recall_by_rank(*self.indices())
        assert [p.recall for p in points] == [0.5, 0.5, 1.0, 1.0]

    def test_perfect_codes(self):
        q = build(np.ones((2, 4)), [(0,), (0,)])
        g = build(np.array([[1, 1, 1, 1]] * 3 + [[-1, -1, -1, -1]] * 2), [(0,)] * 3 + [(1,)] * 2)
        pts = precision_recall_curve(q, g)
        assert all(p.precision == 1.0 for p in pts if p.threshold < 4)
        recalls = [p.recall for p in pts]
        assert recalls == sorted(recalls)
        assert mean_ap(q, g) == 1.0
        assert precision_at_topk(q, g, [1]) == [1.0]

    def test_k_out_of_range(self):
        with pytest.raises(ContractError):
            precision_at_topk(*self.indices(), [5])


class TestIndexFile:
    def test_roundtrip(self, rng, tmp_path):
        idx = build(rng.standard_normal((6, 70)), [(0,), (1, 4), (2,), (0,), (3,), (1,)], ids=[10, 3, 7, 1, 2, 99])
        path = tmp_path / "codes.thix"
        save_index(idx, path)
        back = load_index(path)
        np.testing.assert_array_equal(back.words, idx.words)
        np.testing.assert_array_equal(back.ids, idx.ids)
        assert back.labels == idx.labels and back.nbits == 70
        assert index_to_bytes(back) == path.read_bytes()

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="offset 0"):
            index_from_bytes(b"XXXX" + bytes(12))

    def test_truncated(self, rng):
        raw = index_to_bytes(build(rng.standard_normal((2, 16)), [(0,), (1,)]))
        with pytest.raises(FormatError, match="truncated"):
            index_from_bytes(raw[:-3])

    def test_trailing_bytes(self, rng):
        raw = index_to_bytes(build(rng.standard_normal((2, 16)), [(0,), (1,)]))
        with pytest.raises(FormatError, match="trailing"):
            index_from_bytes(raw + b"\0")
