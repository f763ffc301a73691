import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_probe.factorization import (
    FactorizationOptions,
    NtdFactors,
    compression_ratio,
    concat_modes,
    mode_product,
    nmf,
    ntd,
    reconstruct,
    relative_error,
    tucker_to_tensor,
    unfold,
)
from concept_probe.factorization.tensor_ops import fold


def quadruple_loop_tucker(core, a, b, d, e):
    out = np.zeros((a.shape[0], b.shape[0], d.shape[0], e.shape[0]))
    for n in range(core.shape[0]):
        for h in range(core.shape[1]):
            for w in range(core.shape[2]):
                for c in range(core.shape[3]):
                    out += core[n, h, w, c] * np.einsum("i,j,k,l->ijkl", a[:, n], b[:, h], d[:, w], e[:, c])
    return out


def test_unfold_fold_round_trip():
    x = np.arange(120.0).reshape(2, 3, 4, 5)
    for mode in range(4):
        assert unfold(x, mode).shape == (x.shape[mode], 120 // x.shape[mode])
        np.testing.assert_array_equal(fold(unfold(x, mode), mode, x.shape), x)


def test_mode_product_matches_einsum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4))
    m = rng.normal(size=(5, 3))
    np.testing.assert_allclose(mode_product(x, m, 1), np.einsum("ijk,lj->ilk", x, m))


def test_reconstruct_2x2x2x2_rank_one_by_hand():
    a, b, d, e = (np.array([1.0, 2.0]), np.array([0.5, 1.0]), np.array([3.0, 1.0]), np.array([1.0, 4.0]))
    core = np.full((1, 1, 1, 1), 2.0)
    f = NtdFactors(core, [a[:, None], b[:, None], d[:, None], e[:, None]])
    got = reconstruct(f)
    for idx in np.ndindex(2, 2, 2, 2):
        assert got[idx] == pytest.approx(2.0 * a[idx[0]] * b[idx[1]] * d[idx[2]] * e[idx[3]])


def test_reconstruct_matches_eq_loop():
    rng = np.random.default_rng(1)
    core = rng.uniform(size=(2, 3, 2, 2))
    facs = [rng.uniform(size=(s, r)) for s, r in zip((3, 4, 3, 5), core.shape)]
    np.testing.assert_allclose(tucker_to_tensor(core, facs), quadruple_loop_tucker(core, *facs), rtol=1e-12)


def test_zero_core_gives_zero_tensor():
    facs = [np.ones((3, 2))] * 4
    assert not reconstruct(NtdFactors(np.zeros((2, 2, 2, 2)), facs)).any()


def test_relative_error_cases():
    x = np.random.default_rng(0).uniform(size=(3, 4))
    assert relative_error(x, x) == 0.0
    assert relative_error(x, np.zeros_like(x)) == 1.0
    assert relative_error(x, 2 * x) == pytest.approx(1.0)
    assert relative_error(np.zeros(3), np.array([3.0, 4.0, 0.0])) == 5.0


def test_full_rank_is_exact():
    x = np.random.default_rng(0).uniform(size=(4, 3, 5, 2))
    f = ntd(x, x.shape)
    assert f.loss_history[-1] < 1e-6
    assert relative_error(x, reconstruct(f)) < 1e-6


def test_rank_one_tensor_recovered():
    rng = np.random.default_rng(2)
    vecs = [rng.uniform(0.1, 1.0, size=s) for s in (4, 3, 5, 2)]
    x = np.einsum("i,j,k,l->ijkl", *vecs)
    f = ntd(x, (1, 1, 1, 1), FactorizationOptions(tolerance=1e-12))
    assert relative_error(x, reconstruct(f)) < 1e-6


def test_loss_history_non_increasing_and_improves():
    x = np.random.default_rng(3).uniform(size=(6, 5, 4, 3))
    f = ntd(x, (3, 3, 2, 2))
    h = np.array(f.loss_history)
    assert np.all(np.diff(h) <= 1e-10)
    assert h[-1] <= h[0]
    assert all(m.min() >= 0 for m in f.factors) and f.core.min() >= 0


def test_consistent_permutation_leaves_reconstruction_unchanged():
    rng = np.random.default_rng(4)
    f = ntd(rng.uniform(size=(5, 4, 3, 3)), (2, 3, 2, 2), FactorizationOptions(max_outer_iters=10))
    perm = [rng.permutation(r) for r in f.ranks]
    core = f.core[np.ix_(*perm)]
    facs = [m[:, p] for m, p in zip(f.factors, perm)]
    np.testing.assert_allclose(tucker_to_tensor(core, facs), reconstruct(f), rtol=1e-12)


def test_ntd_input_validation():
    with pytest.raises(ValueError, match="negative"):
        ntd(-np.ones((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError, match="rank"):
        ntd(np.ones((2, 2, 2)), (3, 1, 1))
    with pytest.raises(ValueError):
        FactorizationOptions(tolerance=0)


def test_nmf_exact_rank_recovery():
    rng = np.random.default_rng(5)
    m = rng.uniform(size=(10, 3)) @ rng.uniform(size=(3, 8))
    res = nmf(m, 3, FactorizationOptions(tolerance=1e-14, max_outer_iters=2000))
    assert relative_error(m, reconstruct(res)) < 1e-4


def multiplicative_updates(m, rank, iters=5000, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.uniform(size=(m.shape[0], rank))
    h = rng.uniform(size=(rank, m.shape[1]))
    for _ in range(iters):
        h *= (w.T @ m) / (w.T @ w @ h + 1e-12)
        w *= (m @ h.T) / (w @ h @ h.T + 1e-12)
    return relative_error(m, w @ h)


def test_nmf_close_to_multiplicative_updates_oracle():
    m = np.random.default_rng(6).uniform(size=(8, 6))
    ours = relative_error(m, reconstruct(nmf(m, 3, FactorizationOptions(tolerance=1e-10, max_outer_iters=2000))))
    oracle = min(multiplicative_updates(m, 3, seed=s) for s in range(3))
    assert ours <= oracle * 1.05


def test_nmf_validation_and_non_negativity():
    with pytest.raises(ValueError):
        nmf(-np.ones((3, 3)), 1)
    with pytest.raises(ValueError):
        nmf(np.ones((3, 3)), 4)
    res = nmf(np.random.default_rng(7).uniform(size=(5, 4)), 2)
    assert res.W.min() >= 0 and res.H.min() >= 0
    assert np.all(np.diff(res.loss_history) <= 1e-10)


def test_concat_modes_shapes_and_inverse():
    x = np.arange(120.0).reshape(2, 3, 4, 5)
    x3, m3 = concat_modes(x, "3d")
    x2, m2 = concat_modes(x, "2d")
    assert x3.shape == (2, 12, 5) and x2.shape == (24, 5)
    np.testing.assert_array_equal(m3.unflatten(x3), x)
    np.testing.assert_array_equal(m2.unflatten(x2), x)
    np.testing.assert_array_equal(x2[7], x[0, 1, 3])


def test_compression_ratio_counts_parameters():
    shape = (100, 11, 50, 32)
    ranks = (10, 4, 8, 5)
    f = NtdFactors(np.zeros(ranks), [np.zeros((s, r)) for s, r in zip(shape, ranks)])
    expected = 100 * 11 * 50 * 32 / (10 * 4 * 8 * 5 + 100 * 10 + 11 * 4 + 50 * 8 + 32 * 5)
    assert compression_ratio(f, shape) == pytest.approx(expected)
    full = NtdFactors(np.zeros((2, 3, 4, 5)), [np.zeros((s, s)) for s in (2, 3, 4, 5)])
    assert compression_ratio(full, (2, 3, 4, 5)) < 1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_nmf_agrees_with_two_mode_ntd(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(int(rng.integers(5, 10)), int(rng.integers(4, 8))))
    r = int(rng.integers(1, 4))
    # both are local optima of the same model class, so compare best-of-restarts
    opts = [FactorizationOptions(tolerance=1e-10, max_outer_iters=1000, rng_seed=seed * 10 + k) for k in range(4)]
    e_nmf = min(relative_error(m, reconstruct(nmf(m, r, o))) for o in opts)
    e_ntd = min(relative_error(m, reconstruct(ntd(m, (r, r), o))) for o in opts)
    sv = np.linalg.svd(m, compute_uv=False)
    bound = np.sqrt(np.sum(sv[r:] ** 2)) / np.linalg.norm(m)  # best unconstrained rank-r fit
    assert min(e_nmf, e_ntd) >= bound - 1e-9
    assert abs(e_nmf - e_ntd) <= 0.05 * max(e_nmf, e_ntd)
