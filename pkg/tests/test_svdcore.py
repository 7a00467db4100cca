import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hfpim.errors import InvalidInput, InvalidRank
from hfpim.svdcore import (
    SvdFactor,
    hard_threshold_rank,
    merge_sigma_vt,
    svd_decompose,
    truncate,
    truncate_to_threshold,
    truncation_error,
)


def test_identity():
    f = svd_decompose(np.eye(3))
    np.testing.assert_array_equal(f.sigma, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(f.u, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(f.v, np.eye(3), atol=1e-15)


def test_diagonal_values():
    f = svd_decompose(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(f.sigma, [3, 2, 1])


def test_unsorted_diagonal_is_sorted():
    f = svd_decompose(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(f.sigma, [3, 2, 1])
    np.testing.assert_allclose(f.dense(), np.diag([1.0, 3.0, 2.0]), atol=1e-14)


def test_random_reconstruction():
    w = np.random.default_rng(42).standard_normal((8, 6))
    f = svd_decompose(w)
    assert f.rank == 6
    assert np.linalg.norm(f.dense() - w) <= 1e-10 * np.linalg.norm(w)


def test_sign_convention_and_determinism():
    w = np.random.default_rng(1).standard_normal((7, 5))
    f1, f2 = svd_decompose(w), svd_decompose(w.copy())
    np.testing.assert_array_equal(f1.u, f2.u)
    for r in range(f1.rank):
        col = f1.u[:, r]
        assert col[np.flatnonzero(col)[0]] >= 0


def test_non_finite_rejected():
    w = np.ones((3, 3))
    w[1, 1] = np.nan
    with pytest.raises(InvalidInput):
        svd_decompose(w)
    with pytest.raises(InvalidInput):
        svd_decompose(np.ones(4))


@pytest.mark.parametrize("d1,d2,k", [(768, 768, 384), (768, 3072, 614), (1, 1, 0), (1, 9, 0)])
def test_hard_threshold_examples(d1, d2, k):
    assert hard_threshold_rank(d1, d2) == k


def test_hard_threshold_mac_preservation_grid():
    dims = np.arange(64, 4097, 7)
    for d1 in dims:
        k = np.array([hard_threshold_rank(int(d1), int(d2)) for d2 in dims])
        assert np.all(k * (d1 + dims) <= d1 * dims)


def test_truncate_diag_error():
    f = svd_decompose(np.diag([3.0, 2.0, 1.0]))
    t = truncate(f, 2)
    assert t.rank == 2
    assert truncation_error(f, 2) == pytest.approx(1.0)
    assert np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - t.dense()) == pytest.approx(1.0)
    assert truncation_error(f, 3) == 0.0


def test_truncate_error_matches_direct_frobenius():
    w = np.random.default_rng(7).standard_normal((16, 16))
    f = svd_decompose(w)
    direct = np.linalg.norm(w - truncate(f, 4).dense())
    assert abs(direct - truncation_error(f, 4)) <= 1e-10


@pytest.mark.parametrize("k", [0, 4, -1])
def test_truncate_out_of_range(k):
    f = svd_decompose(np.eye(3))
    with pytest.raises(InvalidRank):
        truncate(f, k)


def test_truncate_to_threshold_clamps():
    f = svd_decompose(np.arange(1.0, 6.0)[None, :])
    assert truncate_to_threshold(f).rank == 1
    g = svd_decompose(np.random.default_rng(0).standard_normal((12, 12)))
    assert truncate_to_threshold(g).rank == 6


def test_merge_ones_gives_vt():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    p, _ = np.linalg.qr(rng.standard_normal((4, 3)))
    b, u = merge_sigma_vt(SvdFactor(q, np.ones(3), p))
    np.testing.assert_array_equal(b, p.T)
    np.testing.assert_array_equal(u, q)


def test_merge_reconstructs():
    w = np.diag([3.0, 2.0, 1.0])
    b, u = merge_sigma_vt(svd_decompose(w))
    assert np.abs(u @ b - w).max() <= 1e-10


def test_merge_rank_one():
    f = truncate(svd_decompose(np.random.default_rng(2).standard_normal((4, 6))), 1)
    b, u = merge_sigma_vt(f)
    assert b.shape == (1, 6) and u.shape == (4, 1)


def test_eckart_young_spot_checks():
    rng = np.random.default_rng(11)
    for _ in range(20):
        w = rng.standard_normal((12, 12))
        f = svd_decompose(w)
        k = int(rng.integers(1, 12))
        direct = np.linalg.norm(w - truncate(f, k).dense())
        assert abs(direct - truncation_error(f, k)) <= 1e-10


matrices = st.tuples(st.integers(1, 9), st.integers(1, 9)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-1e3, 1e3, allow_subnormal=False)))


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_reconstruction_and_orthonormality(w):
    f = svd_decompose(w)
    assert f.rank == min(w.shape)
    assert np.all(np.diff(f.sigma) <= 0)
    assert np.linalg.norm(f.dense() - w) <= 1e-8 * max(np.linalg.norm(w), 1e-300)
    if np.all(f.sigma > 1e-12 * max(f.sigma[0], 1e-300)):
        eye = np.eye(f.rank)
        assert np.abs(f.u.T @ f.u - eye).max() <= 1e-8
        assert np.abs(f.v.T @ f.v - eye).max() <= 1e-8
