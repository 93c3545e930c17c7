import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfofr.covariance import (
    CovarianceField,
    estimate_G_marginal,
    estimate_G_mom,
    psd_trim,
    residualize,
    smooth_covariance,
)
from lfofr.errors import InsufficientPairs, UnsupportedQ
from lfofr.inference import analytic_inference
from lfofr.pipeline import fit_model
from lfofr.simulation import SimConfig, coverage, generate_dataset


def _ids(I, J):
    return np.repeat(np.arange(I), J)


def _pair_average(R, ids):
    """Direct average of r_ij(s_l) r_ik(s_m) over the pair set, one (l, m) at a time."""
    N, L = R.shape
    G = np.zeros((L, L))
    for l in range(L):
        for m in range(L):
            tot, n = 0.0, 0
            for a in range(N):
                for b in range(N):
                    if ids[a] != ids[b] or (a == b and l == m):
                        continue
                    tot += R[a, l] * R[b, m]
                    n += 1
            G[l, m] = tot / n
    return G


@pytest.mark.oracle
def test_mom_equals_direct_averaging(rng):
    ids = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3])
    R = rng.standard_normal((ids.size, 5))
    G = estimate_G_mom(R, np.ones(ids.size), ids, np.linspace(0, 1, 5))
    np.testing.assert_allclose(G.G[0, 0], _pair_average(R, ids), atol=1e-12)


@pytest.mark.oracle
def test_mom_noiseless_intercepts(rng):
    I, J, L = 40, 3, 6
    b = rng.normal(0, np.sqrt(2.0), I)
    ids = _ids(I, J)
    R = np.repeat(b[ids][:, None], L, axis=1)
    G = estimate_G_mom(R, np.ones(ids.size), ids, np.linspace(0, 1, L)).G[0, 0]
    # every subject contributes J (J - 1) ordered pairs off the diagonal and J^2 elsewhere
    exact_diag = np.mean(b**2)
    np.testing.assert_allclose(np.diag(G), exact_diag, atol=1e-10)
    np.testing.assert_allclose(G[0, 1], np.mean(b**2), atol=1e-10)


def test_mom_white_noise_is_small():
    ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ids = _ids(200, 4)
        R = rng.standard_normal((ids.size, 8))
        G = estimate_G_mom(R, np.ones(ids.size), ids, np.linspace(0, 1, 8)).G
        ok += np.max(np.abs(G)) <= 0.1
    assert ok >= 18


def test_mom_symmetry_q1(rng):
    ids = _ids(15, 3)
    R = rng.standard_normal((ids.size, 7))
    G = estimate_G_mom(R, np.ones(ids.size), ids, np.linspace(0, 1, 7)).G[0, 0]
    np.testing.assert_array_equal(G, G.T)


def test_mom_q2_recovers_slopes(rng):
    I, J, L = 400, 5, 4
    ids = _ids(I, J)
    t = np.tile(np.linspace(-1, 1, J), I)
    Z = np.column_stack([np.ones(I * J), t])
    H = np.array([[1.0, 0.3], [0.3, 0.5]])
    u = rng.multivariate_normal([0, 0], H, size=I)
    R = np.sum(Z * u[ids], axis=1)[:, None] * np.ones(L) + 0.3 * rng.standard_normal((I * J, L))
    G = estimate_G_mom(R, Z, ids, np.linspace(0, 1, L))
    np.testing.assert_allclose(G.G[:, :, 0, 2], np.cov(u.T, bias=True), atol=0.05)
    np.testing.assert_allclose(G.G[:, :, 1, 1], np.cov(u.T, bias=True), atol=0.05)
    M = G.unfold()
    np.testing.assert_allclose(M, M.T, atol=1e-10)


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_mom_scale_equivariant(c, seed):
    rng = np.random.default_rng(seed)
    ids = _ids(6, 3)
    R = rng.standard_normal((18, 4))
    g = np.linspace(0, 1, 4)
    G1 = estimate_G_mom(R, np.ones(18), ids, g).G
    G2 = estimate_G_mom(c * R, np.ones(18), ids, g).G
    np.testing.assert_allclose(G2, c**2 * G1, rtol=1e-10, atol=1e-12)


def test_mom_errors():
    with pytest.raises(InsufficientPairs):
        estimate_G_mom(np.ones((4, 3)), np.ones(4), [0, 1, 2, 3], np.linspace(0, 1, 3))


def test_marginal_with_zero_coefficients_is_sample_covariance(rng):
    Y = rng.standard_normal((30, 5))
    X = rng.standard_normal((30, 3))
    G = estimate_G_marginal(Y, X, np.zeros((3, 5)), _ids(10, 3)).G[0, 0]
    np.testing.assert_allclose(G, np.cov(Y.T, bias=True), atol=1e-12)


@pytest.mark.oracle
def test_marginal_matches_mom_when_noiseless(rng):
    I, J, L = 50, 4, 6
    ids = _ids(I, J)
    b = rng.normal(0, 1.3, I)
    b -= b.mean()
    Y = np.repeat(b[ids][:, None], L, axis=1)
    Gm = estimate_G_marginal(Y, np.ones((I * J, 1)), np.zeros((1, L)), ids).G[0, 0]
    Go = estimate_G_mom(Y, np.ones(I * J), ids, np.linspace(0, 1, L)).G[0, 0]
    np.testing.assert_allclose(Gm, Go, atol=1e-6)


def test_marginal_rejects_q2():
    with pytest.raises(UnsupportedQ):
        estimate_G_marginal(np.zeros((4, 2)), np.ones((4, 1)), np.zeros((1, 2)), [0, 0, 1, 1], q=2)


def test_residualize():
    Y = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(residualize(Y, np.ones((3, 1)), [[1.0, 2.0]]), Y - [1.0, 2.0])


def test_psd_trim_examples(rng):
    np.testing.assert_allclose(psd_trim(np.diag([1.0, -0.5])), np.diag([1.0, 0.0]), atol=1e-15)
    A = rng.standard_normal((5, 5))
    A = A @ A.T
    np.testing.assert_allclose(psd_trim(A), A, atol=1e-10)
    S = rng.standard_normal((6, 6))
    S = (S + S.T) / 2
    out = psd_trim(S)
    w = np.linalg.eigvalsh(S)
    assert np.linalg.eigvalsh(out).min() >= -1e-10
    assert np.linalg.norm(out - S) == pytest.approx(np.linalg.norm(w[w < 0]), rel=1e-10)


def test_unfold_fold_round_trip(rng):
    G = rng.standard_normal((2, 2, 3, 3))
    f = CovarianceField(G, np.linspace(0, 1, 3))
    np.testing.assert_array_equal(CovarianceField.fold(f.unfold(), 2, f.grid_s).G, G)
    assert f.unfold()[1 * 3 + 2, 0 * 3 + 1] == G[1, 0, 2, 1]


def test_smooth_constant_field():
    g = np.linspace(0, 1, 20)
    out = smooth_covariance(CovarianceField(np.full((1, 1, 20, 20), 0.7), g), knots=6)
    np.testing.assert_allclose(out.G, 0.7, atol=1e-10)
    assert out.smoothed and out.trimmed


def test_smoothing_improves_noisy_field():
    g = np.linspace(0, 1, 25)
    wins = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        E = 0.1 * rng.standard_normal((25, 25))
        raw = 1.5 + (E + E.T) / 2
        out = smooth_covariance(CovarianceField(raw[None, None], g), knots=8)
        M = out.unfold()
        assert np.linalg.eigvalsh(M).min() >= -1e-8
        np.testing.assert_allclose(M, M.T, atol=1e-10)
        wins += np.linalg.norm(M - 1.5) < np.linalg.norm(raw - 1.5)
    assert wins >= 36


def test_field_csv(tmp_path, rng):
    f = CovarianceField(rng.standard_normal((1, 1, 4, 4)), np.linspace(0, 1, 4))
    f.to_csv(tmp_path / "G.csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "G.csv", delimiter=","), f.unfold())


@pytest.mark.slow
def test_marginal_estimator_beats_raw_outcome_covariance():
    # beta_1 coverage with the fixed-effect-corrected estimator should sit closer to nominal
    cov = {"marginal": [], "raw": []}
    for seed in range(40):
        d, truth = generate_dataset(SimConfig(seed=7000 + seed))
        model = fit_model(d)
        for g in cov:
            inf = analytic_inference(model, d, g_beta=g, cma=False)
            cov[g].append(coverage(inf.beta_pointwise[1], truth.beta1))
    gap = {g: abs(np.mean(v) - 0.95) for g, v in cov.items()}
    assert gap["marginal"] < gap["raw"]
