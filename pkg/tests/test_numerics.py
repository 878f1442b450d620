"""Tests for the dense-tensor kernels and the RNG."""

import numpy as np
import pytest

from strata.numerics import (
    EPS_STD,
    ChannelStats,
    Rng,
    ShapeError,
    channel_stats,
    concat_seq,
    matmul,
    randn,
    softmax_rows,
    standardize,
)


def naive_matmul(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity_left_and_right_exact(self):
        rng = Rng(1)
        a = randn((4, 4), rng)
        eye = np.eye(4)
        assert np.array_equal(matmul(eye, a), a)
        assert np.array_equal(matmul(a, eye), a)

    def test_column_selection(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        assert np.array_equal(matmul(a, b), np.array([[2.0], [4.0]]))

    def test_matches_triple_loop_oracle(self):
        rng = Rng(2)
        for _ in range(20):
            a = randn((5, 4), rng)
            b = randn((4, 3), rng)
            assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_inner_dim_mismatch_raises(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_non_matrix_raises(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestSoftmaxRows:
    def test_symmetric_row(self):
        out = softmax_rows(np.array([[0.0, 0.0]]))
        assert np.array_equal(out, np.array([[0.5, 0.5]]))

    def test_shift_invariance(self):
        rng = Rng(3)
        for _ in range(50):
            row = randn((1, 7), rng)
            c = float(randn((1,), rng)[0]) * 10.0
            assert np.max(np.abs(softmax_rows(row + c) - softmax_rows(row))) < 1e-12

    def test_reference_values(self):
        # High-precision oracle for exp(1..3)/sum, frozen to 12 digits.
        expected = np.array([[0.090030573170, 0.244728471055, 0.665240955775]])
        out = softmax_rows(np.array([[1.0, 2.0, 3.0]]))
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_row_sums_one_including_large_entries(self):
        rng = Rng(4)
        for _ in range(50):
            x = randn((6, 5), rng) * 3.0
            x[0, 0] = 700.0
            out = softmax_rows(x)
            assert np.all(out >= 0.0)
            assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax_rows(np.array([[np.inf, 0.0]]))


class TestChannelStats:
    def test_constant_channel(self):
        stats = channel_stats(np.full((2, 3, 3), 3.0))
        assert np.array_equal(stats.mean, np.array([3.0, 3.0]))
        assert np.array_equal(stats.std, np.array([EPS_STD, EPS_STD]))

    def test_symmetric_pair(self):
        x = np.array([[[-1.0, 1.0]]])
        stats = channel_stats(x)
        assert stats.mean[0] == 0.0
        assert stats.std[0] == 1.0

    def test_matches_two_pass_oracle(self):
        rng = Rng(5)
        for _ in range(20):
            x = randn((3, 4, 4), rng)
            stats = channel_stats(x)
            for c in range(3):
                flat = x[c].ravel()
                mean = sum(flat) / flat.size
                var = sum((v - mean) ** 2 for v in flat) / flat.size
                assert abs(stats.mean[c] - mean) < 1e-12
                assert abs(stats.std[c] - max(np.sqrt(var), EPS_STD)) < 1e-12

    def test_empty_channel_raises(self):
        with pytest.raises(ShapeError):
            channel_stats(np.zeros((3, 0, 4)))

    def test_standardize_round_trip(self):
        rng = Rng(6)
        x = randn((3, 8, 8), rng) * 2.5 + 1.0
        out = standardize(x, channel_stats(x))
        stats = channel_stats(out)
        assert np.max(np.abs(stats.mean)) < 1e-10
        assert np.max(np.abs(stats.std - 1.0)) < 1e-10

    def test_standardize_channel_mismatch_raises(self):
        stats = ChannelStats(mean=np.zeros(2), std=np.ones(2))
        with pytest.raises(ShapeError):
            standardize(np.zeros((3, 2, 2)), stats)


class TestConcatSeq:
    def test_neutral_element(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(concat_seq(a, np.zeros((0, 2))), a)

    def test_single_rows(self):
        out = concat_seq(np.array([[1.0]]), np.array([[2.0]]))
        assert np.array_equal(out, np.array([[1.0], [2.0]]))

    def test_index_mapping_exhaustive(self):
        a = np.arange(6, dtype=float).reshape(3, 2)
        b = np.arange(10, 14, dtype=float).reshape(2, 2)
        out = concat_seq(a, b)
        for i in range(5):
            expect = a[i] if i < 3 else b[i - 3]
            assert np.array_equal(out[i], expect)

    def test_trailing_dim_mismatch_raises(self):
        with pytest.raises(ShapeError):
            concat_seq(np.zeros((2, 3)), np.zeros((2, 4)))


class TestRng:
    def test_same_seed_bit_identical(self):
        x = randn((50, 7), Rng(42))
        y = randn((50, 7), Rng(42))
        assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        x = randn((50,), Rng(1))
        y = randn((50,), Rng(2))
        assert not np.array_equal(x, y)

    def test_law_of_large_numbers(self):
        x = randn((100_000,), Rng(123))
        assert abs(x.mean()) < 0.02
        assert abs(x.std() - 1.0) < 0.02

    def test_uniform_range_and_grouping_independence(self):
        r = Rng(9)
        u = r.uniform(10_000)
        assert np.all(u >= 0.0) and np.all(u < 1.0)
        a, b = Rng(7), Rng(7)
        split = np.concatenate([a.uniform(3), a.uniform(4)])
        assert np.array_equal(split, b.uniform(7))

    def test_counter_advances_in_pairs_for_normals(self):
        r = Rng(11)
        r.normal(3)
        assert r.counter == 4
        r.normal(2)
        assert r.counter == 6

    def test_randint_bounds_and_determinism(self):
        r = Rng(13)
        draws = r.randint(2, 9, 5000)
        assert draws.min() >= 2 and draws.max() <= 8
        assert set(np.unique(draws)) == set(range(2, 9))
        assert np.array_equal(draws, Rng(13).randint(2, 9, 5000))
        with pytest.raises(ValueError):
            r.randint(3, 3, 1)

    def test_derive_streams_are_independent_and_stable(self):
        base = Rng(77)
        child_a = base.derive(0)
        child_b = base.derive(1)
        assert child_a.seed == Rng(77).derive(0).seed
        assert child_a.seed != child_b.seed
        assert not np.array_equal(randn((20,), child_a), randn((20,), child_b))

    def test_outputs_finite(self):
        x = randn((10_000,), Rng(31))
        assert np.all(np.isfinite(x))

    def test_negative_dimension_raises(self):
        with pytest.raises(ShapeError):
            randn((-1, 3), Rng(0))
