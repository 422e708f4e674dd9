import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reuselab.model import ModelConfig, ReuseSchedule, ReuseTransformer
from reuselab.numerics import ShapeError, make_rng
from reuselab.similarity import (
    AttentionCapture,
    CaptureError,
    SimilarityAccumulator,
    adjacent_rank_profile,
    all_pairs_best,
    analyze,
    best_head_similarity,
    convergence_curve,
    heatmap_svg,
    mean_adjacent_similarity,
    read_capture,
    tv_similarity,
    write_capture,
)


def random_stochastic(rng, *shape, sharp=1.0):
    x = np.exp(sharp * rng.standard_normal(shape))
    return x / x.sum(axis=-1, keepdims=True)


def loop_tv(a, b):
    n = len(a)
    total = 0.0
    for p in range(n):
        total += 0.5 * sum(abs(a[p][q] - b[p][q]) for q in range(n))
    return 1.0 - total / n


def brute_force_all_pairs(scores):
    """Direct enumeration: for each (l, l'), max over (h, h') of mean over t of S."""
    T, L, H = scores.shape[:3]
    out = np.zeros((L, L))
    for l, lp in itertools.product(range(L), repeat=2):
        best = -1.0
        for h, hp in itertools.product(range(H), repeat=2):
            mean = sum(loop_tv(scores[t, l, h], scores[t, lp, hp]) for t in range(T)) / T
            best = max(best, mean)
        out[l, lp] = best
    return out


stochastic_pairs = st.integers(0, 2**32 - 1).flatmap(
    lambda seed: st.tuples(st.just(seed), st.integers(1, 6), st.floats(0.1, 5.0)))


class TestTV:
    def test_identity(self):
        a = random_stochastic(make_rng(0), 5, 5)
        assert tv_similarity(a, a) == 1.0

    def test_disjoint_supports(self):
        assert tv_similarity([[1, 0], [0, 1]], [[0, 1], [1, 0]]) == 0.0

    def test_half(self):
        assert tv_similarity([[0.5, 0.5]], [[1.0, 0.0]]) == 0.5

    def test_half_single_row(self):
        a = np.array([[0.5, 0.5], [0.5, 0.5]])
        b = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert tv_similarity(a, b) == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tv_similarity(np.eye(2), np.eye(3))

    def test_non_stochastic(self):
        with pytest.raises(ValueError, match="stochastic"):
            tv_similarity([[0.6, 0.6], [0.5, 0.5]], np.eye(2))

    @settings(max_examples=60)
    @given(stochastic_pairs)
    def test_properties(self, args):
        seed, n, sharp = args
        rng = make_rng(seed)
        a, b, c = (random_stochastic(rng, n, n, sharp=sharp) for _ in range(3))
        s = tv_similarity(a, b)
        assert 0.0 <= s <= 1.0
        assert s == pytest.approx(tv_similarity(b, a), abs=1e-15)
        assert s == pytest.approx(loop_tv(a, b), abs=1e-12)
        # 1 - S is a metric (mean TV distance): triangle inequality
        assert (1 - tv_similarity(a, c)) <= (1 - s) + (1 - tv_similarity(b, c)) + 1e-12


def _capture_from_rows(per_example):
    return AttentionCapture(np.asarray(per_example, dtype=float))


class TestBestHead:
    def test_average_before_max(self):
        # source head rows put all mass on column 0; a target row [1-x, x] scores 1-x
        src = [[1.0, 0.0], [1.0, 0.0]]

        def tgt(x):
            return [[1 - x, x], [1 - x, x]]

        ex1 = [[src, src], [tgt(0.1), tgt(0.4)]]  # head0: 0.9, head1: 0.6
        ex2 = [[src, src], [tgt(0.8), tgt(0.4)]]  # head0: 0.2, head1: 0.6
        cap = _capture_from_rows([ex1, ex2])
        c, arg = best_head_similarity(cap, 0, 0, 1)
        assert arg == 1
        assert c == pytest.approx(0.60, abs=1e-12)
        per_example_max = np.mean([0.9, 0.6])
        assert per_example_max == pytest.approx(0.75)
        assert c != pytest.approx(per_example_max)

    def test_identical_head_found(self):
        rng = make_rng(1)
        s = random_stochastic(rng, 4, 2, 3, 4, 4)
        s[:, 1, 2] = s[:, 0, 1]
        c, arg = best_head_similarity(AttentionCapture(s), 0, 1, 1)
        assert c == pytest.approx(1.0, abs=1e-12) and arg == 2

    def test_tie_goes_to_lowest(self):
        a = np.full((1, 2, 3, 2, 2), 0.5)
        assert best_head_similarity(AttentionCapture(a), 0, 0, 1) == (1.0, 0)

    def test_single_example(self):
        s = random_stochastic(make_rng(2), 1, 2, 3, 4, 4)
        c, _ = best_head_similarity(AttentionCapture(s), 1, 2, 0)
        assert c == pytest.approx(max(loop_tv(s[0, 1, 2], s[0, 0, j]) for j in range(3)), abs=1e-12)

    def test_out_of_range(self):
        cap = AttentionCapture(random_stochastic(make_rng(3), 1, 2, 2, 3, 3))
        with pytest.raises(IndexError):
            best_head_similarity(cap, 2, 0, 0)
        with pytest.raises(IndexError):
            best_head_similarity(cap, 0, 5, 0)


class TestAllPairs:
    def test_single_layer(self):
        cap = AttentionCapture(random_stochastic(make_rng(0), 3, 1, 2, 4, 4))
        np.testing.assert_array_equal(all_pairs_best(cap), [[1.0]])

    def test_duplicated_layer(self):
        s = random_stochastic(make_rng(1), 3, 2, 2, 4, 4)
        s[:, 1] = s[:, 0]
        cap = AttentionCapture(s)
        assert all_pairs_best(cap)[0, 1] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(adjacent_rank_profile(cap), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle(self, seed):
        s = random_stochastic(make_rng(seed), 5, 3, 2, 4, 4, sharp=2.0)
        cap = AttentionCapture(s)
        got = all_pairs_best(cap)
        np.testing.assert_allclose(got, brute_force_all_pairs(s), atol=1e-12, rtol=0)
        np.testing.assert_allclose(np.diag(got), 1.0, atol=1e-12)
        assert got.min() >= 0 and got.max() <= 1 + 1e-12

    def test_adjacent_profile_oracle(self):
        s = random_stochastic(make_rng(7), 4, 3, 3, 4, 4, sharp=2.0)
        prof = adjacent_rank_profile(AttentionCapture(s))
        assert prof.shape == (2, 3)
        for l in (1, 2):
            expected = sorted(
                max(np.mean([loop_tv(s[t, l, h], s[t, l - 1, hp]) for t in range(4)]) for hp in range(3))
                for h in range(3))
            np.testing.assert_allclose(prof[l - 1], expected, atol=1e-12)

    def test_single_head_profile(self):
        prof = adjacent_rank_profile(AttentionCapture(random_stochastic(make_rng(8), 2, 3, 1, 3, 3)))
        assert prof.shape == (2, 1)

    def test_mean_adjacent(self):
        m = np.array([[1.0, 0.2, 0.1], [0.4, 1.0, 0.3], [0.0, 0.6, 1.0]])
        assert mean_adjacent_similarity(m) == pytest.approx(0.5)


class TestCapture:
    def test_mixed_lengths_rejected(self):
        rng = make_rng(0)
        with pytest.raises(CaptureError):
            AttentionCapture.from_examples([random_stochastic(rng, 2, 2, 3, 3), random_stochastic(rng, 2, 2, 4, 4)])

    def test_mixed_heads_rejected(self):
        acc = SimilarityAccumulator(2, 2)
        with pytest.raises(CaptureError):
            acc.add(random_stochastic(make_rng(0), 2, 3, 3, 3))

    def test_non_stochastic_rejected(self):
        with pytest.raises(ValueError):
            AttentionCapture(np.full((1, 1, 1, 2, 2), 0.6))

    def test_roundtrip(self, tmp_path):
        cap = AttentionCapture(random_stochastic(make_rng(3), 3, 2, 2, 5, 5), layer_ids=(1, 3))
        write_capture(tmp_path / "c.bin", cap)
        back = read_capture(tmp_path / "c.bin")
        assert back.layer_ids == (1, 3)
        assert back.scores.tobytes() == cap.scores.tobytes()

    def test_truncated_file(self, tmp_path):
        cap = AttentionCapture(random_stochastic(make_rng(3), 2, 2, 2, 3, 3))
        write_capture(tmp_path / "c.bin", cap)
        data = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(data[:-8])
        with pytest.raises(CaptureError):
            read_capture(tmp_path / "c.bin")

    def test_from_model_drops_skip_layers(self):
        cfg = ModelConfig(4, 2, 8, 16, 10, 5, schedule=ReuseSchedule("skip", P=1), init_std=0.5)
        _, cache = ReuseTransformer(cfg, seed=0).forward(make_rng(0).integers(0, 10, (3, 5)))
        cap = AttentionCapture.from_model_scores(cache.scores)
        assert cap.layer_ids == (1, 3, 4) and cap.scores.shape == (3, 3, 2, 5, 5)


class TestConvergence:
    def test_full_size_equals_all_pairs(self):
        cap = AttentionCapture(random_stochastic(make_rng(0), 6, 3, 2, 4, 4))
        curve = convergence_curve(cap, [6])
        np.testing.assert_array_equal(curve[6], all_pairs_best(cap))

    def test_constant_capture(self):
        one = random_stochastic(make_rng(1), 1, 3, 2, 4, 4)
        cap = AttentionCapture(np.repeat(one, 5, axis=0))
        curve = convergence_curve(cap, [1, 5])
        np.testing.assert_allclose(curve[1], curve[5], atol=1e-15)

    def test_too_large(self):
        cap = AttentionCapture(random_stochastic(make_rng(2), 2, 2, 2, 3, 3))
        with pytest.raises(CaptureError):
            convergence_curve(cap, [3])

    def test_shrinking_gap(self):
        def gap(T, seed):
            cap = AttentionCapture(random_stochastic(make_rng(seed), T, 3, 2, 5, 5, sharp=2.0))
            c = convergence_curve(cap, [T // 2, T])
            return np.linalg.norm(c[T // 2] - c[T])

        small = np.mean([gap(20, s) for s in range(5)])
        large = np.mean([gap(800, s) for s in range(5)])
        assert large < small / 2


class TestReport:
    def test_report_fields(self):
        cap = AttentionCapture(random_stochastic(make_rng(0), 4, 3, 2, 4, 4))
        rep = analyze(cap, model="m", dataset="d", sample_sizes=[2, 4])
        d = json.loads(rep.to_json())
        assert d["T"] == 4 and d["model"] == "m" and d["layer_ids"] == [1, 2, 3]
        assert np.array(d["all_pairs"]).shape == (3, 3)
        assert set(d["convergence"]) == {"2", "4"}

    def test_heatmap(self):
        svg = heatmap_svg(np.array([[1.0, 0.25], [0.5, 1.0]]), title="t")
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "0.25" in svg and "rows = source layer" in svg
