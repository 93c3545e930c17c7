import numpy as np
import pytest
from conftest import SMALL_MODEL, SMALL_SMOOTHING
from hypothesis import given
from hypothesis import strategies as st
from oracles import dense_eq4

from lfofr.covariance import CovarianceField
from lfofr.errors import LocationFitError, NegativeVariance
from lfofr.inference import (
    AnalyticMC,
    Bootstrap,
    BootstrapEstimates,
    analytic_inference,
    beta_star_covariance,
    bootstrap,
    bootstrap_inference,
    bootstrap_variance,
    cma_bands,
    cma_critical_value,
    cov_beta_star,
    pointwise_bands,
    propagate_smoother_variance,
    resample_indices,
    var_gamma_raw,
)
from lfofr.pipeline import fit_model
from lfofr.pointwise import penalized_gls
from lfofr.simulation import SimConfig, generate_dataset


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _field(L, value=None, rng=None):
    if value is not None:
        G = np.full((1, 1, L, L), float(value))
    else:
        A = rng.standard_normal((L, L))
        G = (A @ A.T / L)[None, None]
    return CovarianceField(G, np.linspace(0, 1, L))


# --- analytic covariance -----------------------------------------------------


@pytest.mark.oracle
def test_eq4_dense_oracle_cross_location(small_data, small_model, rng):
    d, _ = small_data
    G = _field(d.L, rng=rng)
    X, D = small_model.design.Xstar, small_model.design.D
    for l1, l2 in [(0, 1), (3, 11), (15, 2)]:
        got = cov_beta_star(small_model.fits, G, X, d.Z, l1, l2)
        ref = dense_eq4(X, D, d.Z, d.subject_id, small_model.fits[l1], small_model.fits[l2], G.G[0, 0, l1, l2])
        assert _rel(got, ref) <= 1e-8


@pytest.mark.oracle
def test_eq4_dense_oracle_same_point(small_data, small_model, rng):
    d, _ = small_data
    G = _field(d.L, rng=rng)
    X, D = small_model.design.Xstar, small_model.design.D
    f = small_model.fits[6]
    ref = dense_eq4(X, D, d.Z, d.subject_id, f, f, None, same_point=True)
    assert _rel(cov_beta_star(small_model.fits, G, X, d.Z, 6, 6, same_point="sandwich"), ref) <= 1e-8
    # the default keeps the penalty inside: (X*^T V^-1 X* + lam D)^-1
    assert _rel(cov_beta_star(small_model.fits, G, X, d.Z, 6, 6), f.xtvx_inv) <= 1e-12


def test_full_covariance_agrees_with_pairwise(small_data, small_model, rng):
    d, _ = small_data
    G = _field(d.L, rng=rng)
    C = beta_star_covariance(small_model.fits, G)
    X = small_model.design.Xstar
    for l1, l2 in [(0, 0), (2, 9), (9, 2)]:
        np.testing.assert_allclose(C[l1, l2], cov_beta_star(small_model.fits, G, X, d.Z, l1, l2), atol=1e-12)
    np.testing.assert_allclose(C[2, 9], C[9, 2].T, atol=1e-12)


def test_zero_random_effect_covariance_decouples_locations(small_data, small_model):
    d, _ = small_data
    C = beta_star_covariance(small_model.fits, _field(d.L, 0.0))
    for l in range(d.L):
        C[l, l] = 0.0
    assert np.all(C == 0.0)


def test_same_point_ols_limit(rng):
    N, P = 40, 5
    X = rng.standard_normal((N, P))
    ids = np.repeat(np.arange(8), 5)
    y = rng.standard_normal(N)
    f = penalized_gls(y, X, np.diag([0, 0, 0, 1.0, 1.0]), np.ones(N), ids, 0.0, np.zeros((1, 1)), 2.3)
    ols = 2.3 * np.linalg.inv(X.T @ X)
    G = _field(1, 0.0)
    for rule in ("mixed", "sandwich"):
        np.testing.assert_allclose(cov_beta_star([f], G, X, np.ones(N), 0, 0, rule), ols, rtol=1e-9)


def test_analytic_inference_refuses_failed_locations(small_data):
    d, _ = small_data
    Y = d.Y.copy()
    Y[:, 4] = d.X @ [0.5, -0.25]
    bad = d.with_outcome(Y)
    model = fit_model(bad, SMALL_MODEL, SMALL_SMOOTHING)
    assert 4 in model.result.failed
    with pytest.raises(LocationFitError):
        analytic_inference(model, bad)


# --- surface variance and propagation ----------------------------------------


def test_var_gamma_raw_selector_and_identity(rng):
    L, K = 3, 4
    A = rng.standard_normal((L * K, L * K))
    cov = (A @ A.T).reshape(L, K, L, K).transpose(0, 2, 1, 3)
    e1 = np.eye(K)[:1]
    np.testing.assert_allclose(var_gamma_raw(cov, e1), cov[np.arange(L), np.arange(L), 0, 0][None, :])
    phi = rng.standard_normal((5, K))
    eye = np.broadcast_to(np.eye(K), (L, L, K, K))
    np.testing.assert_allclose(var_gamma_raw(eye, phi), np.repeat(np.sum(phi**2, axis=1)[:, None], L, axis=1))


@pytest.mark.oracle
def test_var_gamma_raw_brute_force(rng):
    L, K, R = 3, 4, 5
    A = rng.standard_normal((L * K, L * K))
    cov = (A @ A.T).reshape(L, K, L, K).transpose(0, 2, 1, 3)
    phi = rng.standard_normal((R, K))
    full = var_gamma_raw(cov, phi, full=True)
    for l in range(L):
        for r in range(R):
            for m in range(L):
                for s in range(R):
                    assert full[l * R + r, m * R + s] == pytest.approx(phi[r] @ cov[l, m] @ phi[s], abs=1e-10)
    np.testing.assert_allclose(var_gamma_raw(cov, phi), np.diag(full).reshape(L, R).T, atol=1e-10)


def test_propagation_identity_and_diagonal(rng):
    L, R = 4, 3
    A = rng.standard_normal((L * R, L * R))
    V = A @ A.T
    np.testing.assert_array_equal(propagate_smoother_variance(V, np.eye(L), np.eye(R)), V)
    S1, S2 = rng.standard_normal((L, L)), rng.standard_normal((R, R))
    out = propagate_smoother_variance(2.5 * np.eye(L * R), S1, S2)
    np.testing.assert_allclose(out, 2.5 * np.kron(S1 @ S1.T, S2 @ S2.T), atol=1e-10)


@pytest.mark.oracle
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_propagation_kronecker_oracle(L, R, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((L * R, L * R))
    V = A @ A.T
    S1, S2 = rng.standard_normal((L, L)), rng.standard_normal((R, R))
    K = np.kron(S1, S2)
    np.testing.assert_allclose(propagate_smoother_variance(V, S1, S2), K @ V @ K.T, atol=1e-10)


# --- bands --------------------------------------------------------------------


def test_pointwise_band_examples():
    b = pointwise_bands(np.zeros(3), np.ones(3))
    np.testing.assert_allclose(b.upper, 1.959964, atol=1e-6)
    np.testing.assert_allclose(b.lower, -1.959964, atol=1e-6)
    b = pointwise_bands(np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(b.lower, b.upper)
    assert pointwise_bands(np.zeros(1), np.ones(1), level=0.90).critical_value == pytest.approx(1.6449, abs=1e-4)
    with pytest.raises(NegativeVariance):
        pointwise_bands(np.zeros(2), np.array([1.0, -0.1]))


def test_band_contains_estimate_and_rows():
    b = pointwise_bands(np.array([[0.0, 1.0]]), np.array([[1.0, 4.0]]))
    assert np.all(b.contains(b.estimate))
    rows = b.to_rows([0.0, 1.0], [0.5])
    assert len(rows) == 2 and rows[1]["u"] == 0.5 and rows[1]["upper"] == pytest.approx(1 + 2 * 1.959964, abs=1e-5)


def test_cma_single_point():
    q = cma_critical_value(np.zeros(1), np.ones(1), AnalyticMC(np.ones((1, 1)), N=100_000), seed=1)
    assert 1.93 <= q <= 1.99


def test_cma_rank_one_domain():
    C = np.full((12, 12), 2.0)
    q = cma_critical_value(np.zeros(12), np.full(12, 2.0), AnalyticMC(C, N=100_000), seed=2)
    assert q == pytest.approx(1.96, abs=0.03)


@pytest.mark.oracle
def test_cma_independent_points_against_brute_force():
    q = cma_critical_value(np.zeros(10), np.ones(10), AnalyticMC(np.eye(10), N=100_000), seed=3)
    draws = np.abs(np.random.default_rng(99).standard_normal((200_000, 10))).max(axis=1)
    assert q == pytest.approx(np.quantile(draws, 0.95), abs=0.02)
    # closed form: P(max |Z| <= q) = (2 Phi(q) - 1)^10
    from scipy.stats import norm

    assert (2 * norm.cdf(q) - 1) ** 10 == pytest.approx(0.95, abs=0.005)


def test_cma_marginal_variant_ignores_correlation():
    C = np.full((10, 10), 1.0)
    joint = cma_critical_value(np.zeros(10), np.ones(10), AnalyticMC(C, 50_000, joint=True), seed=4)
    marg = cma_critical_value(np.zeros(10), np.ones(10), AnalyticMC(C, 50_000, joint=False), seed=4)
    indep = cma_critical_value(np.zeros(10), np.ones(10), AnalyticMC(np.eye(10), 50_000), seed=4)
    assert joint < 2.0 and marg == pytest.approx(indep, abs=0.03)


def test_cma_monotone_in_domain_size():
    qs = [cma_critical_value(np.zeros(n), np.ones(n), AnalyticMC(np.eye(n), 40_000), seed=5) for n in (1, 5, 25)]
    assert qs[0] <= qs[1] <= qs[2]


def test_cma_bands():
    est, v = np.linspace(0, 1, 10), np.full(10, 0.3)
    pw = pointwise_bands(est, v)
    same = cma_bands(est, v, 1.959964)
    np.testing.assert_allclose(same.lower, pw.lower, atol=1e-5)
    q = cma_critical_value(est, v, AnalyticMC(0.3 * np.eye(10), 20_000), seed=6)
    wide = cma_bands(est, v, q)
    assert np.all(wide.lower < pw.lower) and np.all(wide.upper > pw.upper)
    # Monte Carlo noise below the pointwise quantile is floored
    assert cma_bands(est, v, 1.5).critical_value == pytest.approx(1.959964, abs=1e-6)


def test_cma_bootstrap_branch():
    reps = np.array([[0.0, 1.0], [2.0, 0.0], [0.5, 0.5]])
    q = cma_critical_value(np.zeros(2), np.ones(2), Bootstrap(reps), level=0.5)
    assert q == pytest.approx(np.quantile([1.0, 2.0, 0.5], 0.5))


# --- bootstrap ----------------------------------------------------------------


def _estimates(values):
    v = np.asarray(values, dtype=float)
    return BootstrapEstimates(B=v.shape[0], beta_reps=v, gamma_reps=[v[:, :1]], seed=0, indices_log=[])


def test_bootstrap_variance_examples(rng):
    bv, _ = bootstrap_variance(_estimates(np.array([[[1.0]], [[3.0]]])))
    assert bv[0, 0] == 2.0
    bv, _ = bootstrap_variance(_estimates(np.ones((4, 2, 3))))
    assert np.all(bv == 0)
    x = rng.standard_normal((7, 2, 5))
    m = x.sum(axis=0) / 7
    two_pass = ((x - m) ** 2).sum(axis=0) / 6
    np.testing.assert_allclose(bootstrap_variance(_estimates(x))[0], two_pass, atol=1e-12)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(SimConfig(I=15, J_mean=3, L=12, seed=21))[0]


TINY_MODEL = SMALL_MODEL.__class__(K_w=6, K_g=6)


def test_bootstrap_is_deterministic(tiny):
    a = bootstrap(tiny, TINY_MODEL, B=3, seed=7, smoothing=SMALL_SMOOTHING)
    b = bootstrap(tiny, TINY_MODEL, B=3, seed=7, smoothing=SMALL_SMOOTHING)
    np.testing.assert_array_equal(a.beta_reps, b.beta_reps)
    np.testing.assert_array_equal(a.gamma_reps[0], b.gamma_reps[0])
    assert [list(x) for x in a.indices_log] == [list(x) for x in b.indices_log]


def test_bootstrap_workers_do_not_matter(tiny):
    a = bootstrap(tiny, TINY_MODEL, B=4, seed=8, smoothing=SMALL_SMOOTHING, workers=1)
    b = bootstrap(tiny, TINY_MODEL, B=4, seed=8, smoothing=SMALL_SMOOTHING, workers=2)
    np.testing.assert_array_equal(a.beta_reps, b.beta_reps)


def test_identity_resample_reproduces_full_fit(tiny):
    ident = np.arange(tiny.n_subjects)
    reps = bootstrap(tiny, TINY_MODEL, B=2, smoothing=SMALL_SMOOTHING, indices=[ident, ident])
    full = fit_model(tiny, TINY_MODEL, SMALL_SMOOTHING).result
    for b in range(2):
        np.testing.assert_allclose(reps.beta_reps[b], full.beta_smooth, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(reps.gamma_reps[0][b], full.gamma_smooth[0], rtol=1e-10, atol=1e-12)


def test_resample_stream_depends_on_seed_and_index():
    a = resample_indices(20, 1, 0)
    assert np.array_equal(a, resample_indices(20, 1, 0))
    assert not np.array_equal(a, resample_indices(20, 1, 1))
    assert a.min() >= 0 and a.max() < 20


def test_bootstrap_inference_bands(tiny):
    model = fit_model(tiny, TINY_MODEL, SMALL_SMOOTHING)
    reps = bootstrap(tiny, TINY_MODEL, B=5, seed=1, smoothing=SMALL_SMOOTHING)
    inf = bootstrap_inference(model, reps)
    assert inf.method == "bootstrap" and len(inf.beta_cma) == 2
    for pw, cma in zip(inf.beta_pointwise + inf.gamma_pointwise, inf.beta_cma + inf.gamma_cma):
        assert np.all(cma.lower <= pw.lower + 1e-12) and np.all(cma.upper >= pw.upper - 1e-12)


# --- whole analytic path --------------------------------------------------------


def test_analytic_inference_outputs(small_data, small_model, tmp_path):
    d, _ = small_data
    inf = analytic_inference(small_model, d, cma_N=2000, seed=3)
    assert inf.beta_variance.shape == (2, d.L)
    assert inf.gamma_pointwise[0].estimate.shape == small_model.result.gamma_smooth[0].shape
    assert np.all(inf.gamma_cma[0].critical_value >= 1.959964)
    files = inf.save(tmp_path, d.grid_s, d.grid_u)
    assert {p.name for p in files} == {"bands_beta_0.csv", "bands_beta_1.csv", "bands_gamma_1.csv"}
    again = analytic_inference(small_model, d, cma_N=2000, seed=3)
    np.testing.assert_array_equal(again.gamma_cma[0].upper, inf.gamma_cma[0].upper)


def test_outcome_shift_moves_only_the_intercept(small_data):
    d, _ = small_data
    base = fit_model(d, SMALL_MODEL, SMALL_SMOOTHING)
    shifted_d = d.with_outcome(d.Y + 3.0)
    shifted = fit_model(shifted_d, SMALL_MODEL, SMALL_SMOOTHING)
    a = analytic_inference(base, d, cma=False)
    b = analytic_inference(shifted, shifted_d, cma=False)
    np.testing.assert_allclose(b.beta_pointwise[0].lower, a.beta_pointwise[0].lower + 3.0, atol=1e-8)
    np.testing.assert_allclose(b.beta_pointwise[1].lower, a.beta_pointwise[1].lower, atol=1e-8)
    np.testing.assert_allclose(b.gamma_pointwise[0].upper, a.gamma_pointwise[0].upper, atol=1e-8)


@pytest.mark.slow
def test_analytic_variance_agrees_with_bootstrap():
    d, _ = generate_dataset(SimConfig(seed=4242))
    model = fit_model(d)
    inf = analytic_inference(model, d, cma=False)
    reps = bootstrap(d, B=300, seed=1)
    bvar, _ = bootstrap_variance(reps)
    ratio = np.mean(inf.beta_variance, axis=1) / np.mean(bvar, axis=1)
    assert np.all(np.abs(ratio - 1) <= 0.25), ratio
