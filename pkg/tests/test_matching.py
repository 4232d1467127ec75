"""Sequence matcher vs brute-force enumeration oracles."""

import math

import numpy as np
import pytest

from mdfl.errors import DataError
from mdfl.matching import (contrast_enhance, difference_matrix, is_correct,
                           match, sequence_score, velocity_grid)

RNG = np.random.default_rng(314)


def score_oracle(d_hat, i, j, d_s, velocities):
    """Independent line enumeration: explicit loops, same anchoring rule."""
    q, r = d_hat.shape
    i0 = min(max(i - d_s // 2, 0), q - d_s)
    best = math.inf
    for v in velocities:
        total = 0.0
        ok = True
        for t in range(d_s):
            row = i0 + t
            col = int(np.rint(j + v * (row - i)))
            if col < 0 or col >= r:
                ok = False
                break
            total += d_hat[row, col]
        if ok:
            best = min(best, total / d_s)
    return best


def test_difference_matrix_self():
    x = RNG.standard_normal((8, 5))
    d = difference_matrix(x, x)
    np.testing.assert_array_equal(np.diag(d), 0.0)
    np.testing.assert_allclose(d, d.T, atol=1e-6)
    assert np.all(d >= 0) and np.all(np.isfinite(d))


def test_difference_matrix_hand_case():
    q = np.array([[0.0, 0.0], [3.0, 4.0]])
    r = np.array([[0.0, 0.0], [6.0, 8.0]])
    d = difference_matrix(q, r, "l2")
    np.testing.assert_allclose(d, [[0.0, 10.0], [5.0, 5.0]])
    ds = difference_matrix(q, r, "sad")
    np.testing.assert_allclose(ds, [[0.0, 7.0], [3.5, 3.5]])


def test_difference_matrix_rejects_empty_and_mismatch():
    with pytest.raises(DataError):
        difference_matrix(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(DataError):
        difference_matrix(np.zeros((2, 3)), np.zeros((4, 5)))


def test_contrast_enhance_constant_is_zero():
    d = np.full((6, 4), 3.7)
    np.testing.assert_allclose(contrast_enhance(d, 3), 0.0, atol=1e-12)


def test_contrast_enhance_two_entry_column():
    d = np.array([[0.0], [2.0]])
    out = contrast_enhance(d, 2)
    np.testing.assert_allclose(out, [[-1.0], [1.0]])  # population std = 1


def test_contrast_enhance_full_window_zero_mean():
    d = RNG.random((7, 5))
    out = contrast_enhance(d, 7)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)


def test_contrast_enhance_handles_zero_std():
    d = np.vstack([np.full((4, 2), 1.0), RNG.random((4, 2))])
    out = contrast_enhance(d, 4)
    assert np.all(np.isfinite(out))


def test_velocity_grid_contains_unity():
    v = velocity_grid(0.8, 1.25, 0.125)
    np.testing.assert_allclose(v, [0.875, 1.0, 1.125, 1.25])
    assert 1.0 in v.tolist()


def test_sequence_score_all_zero():
    d = np.zeros((8, 8))
    assert sequence_score(d, 4, 4, 5, velocity_grid(0.8, 1.25, 0.125)) == 0.0


def test_sequence_score_planted_diagonal():
    d = np.ones((12, 12))
    np.fill_diagonal(d, 0.0)
    v = velocity_grid(0.8, 1.25, 0.125)
    assert sequence_score(d, 6, 6, 5, v) == 0.0


def test_sequence_score_within_matrix_bounds():
    d = RNG.standard_normal((9, 9))
    v = velocity_grid(0.8, 1.25, 0.125)
    for i in range(9):
        for j in range(9):
            s = sequence_score(d, i, j, 4, v)
            if math.isfinite(s):
                assert d.min() - 1e-9 <= s <= d.max() + 1e-9


def test_sequence_score_matches_enumeration_oracle():
    v = velocity_grid(0.8, 1.25, 0.125)
    for case in range(200):
        d = np.random.default_rng(case).standard_normal((5, 5))
        for i in range(5):
            for j in range(5):
                got = sequence_score(d, i, j, 3, v)
                want = score_oracle(d, i, j, 3, v)
                assert got == pytest.approx(want, abs=1e-12) or (
                    math.isinf(got) and math.isinf(want))


def test_match_self_trajectory_perfect():
    feats = RNG.standard_normal((60, 12))
    results = match(feats, feats, d_s=10, exclusion=20, mu=0.9)
    assert all(m.ref_index == m.query_index for m in results)
    assert all(is_correct(m.ref_index, m.query_index) for m in results)


def test_match_shifted_trajectory():
    base = RNG.standard_normal((80, 10))
    query = base[:70]
    ref = base[5:75]  # query i lives at ref index i - 5
    results = match(query, ref, d_s=10, exclusion=20, mu=0.95)
    for m in results[10:60]:
        assert m.ref_index == m.query_index - 5


def test_match_mu_zero_accepts_nothing():
    feats = RNG.standard_normal((40, 6))
    results = match(feats, feats, mu=0.0)
    assert not any(m.accepted for m in results)


def test_match_rejects_short_reference():
    feats = RNG.standard_normal((30, 4))
    with pytest.raises(DataError):
        match(feats, feats[:5], d_s=10)


def test_match_scale_invariant_argmin():
    feats = RNG.standard_normal((40, 8))
    noisy = feats + RNG.standard_normal((40, 8)) * 0.05
    a = match(feats, noisy, d_s=8)
    b = match(feats * 3.5, noisy * 3.5, d_s=8)
    assert [m.ref_index for m in a] == [m.ref_index for m in b]


def test_is_correct_boundaries():
    assert is_correct(100, 100)
    assert is_correct(110, 100)
    assert is_correct(90, 100)
    assert not is_correct(111, 100)
    assert not is_correct(89, 100)
