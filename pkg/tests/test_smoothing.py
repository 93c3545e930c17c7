import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scipy.interpolate import BSpline

from lfofr.errors import DimensionMismatch, TooFewPoints
from lfofr.smoothing import LAMBDA_GRID, psmooth, psmooth_matrix, sandwich_smooth

GRID = np.linspace(0, 1, 40)


@pytest.mark.oracle
@pytest.mark.parametrize("lam", [1e-4, 0.3, 50.0])
def test_smoother_equals_direct_formula(lam):
    knots = np.arange(-3, 13) / 9.0  # 8 interior knots, spacing 1/9, 3 extra on each side
    B = BSpline.design_matrix(GRID, knots, 3).toarray()
    Dm = np.diff(np.eye(B.shape[1]), n=2, axis=0)
    P = Dm.T @ Dm
    S = B @ np.linalg.solve(B.T @ B + lam * P, B.T)
    np.testing.assert_allclose(psmooth_matrix(GRID, 8, lam=lam).S, S, atol=1e-10)


@pytest.mark.oracle
def test_gcv_matches_brute_force(rng):
    y = np.sin(6 * GRID) + 0.2 * rng.standard_normal(GRID.size)
    scores = []
    for lam in LAMBDA_GRID:
        S = psmooth_matrix(GRID, 8, lam=lam).S
        scores.append(np.sum((y - S @ y) ** 2) / (1 - np.trace(S) / y.size) ** 2)
    _, sm = psmooth(y, GRID, 8)
    assert sm.lam == LAMBDA_GRID[int(np.argmin(scores))]


@pytest.mark.parametrize("lam", [0.0, 1e-3, 1.0, 1e8])
def test_linear_values_pass_through(lam):
    y = 2.5 - 1.5 * GRID
    np.testing.assert_allclose(psmooth(y, GRID, 8, lam=lam)[0], y, atol=1e-8)


def test_huge_lambda_gives_least_squares_line(rng):
    y = np.cos(4 * GRID) + rng.standard_normal(GRID.size)
    line = np.polyval(np.polyfit(GRID, y, 1), GRID)
    np.testing.assert_allclose(psmooth(y, GRID, 8, lam=1e8)[0], line, atol=1e-6)


def test_smoother_reproduces_constants_and_edf_range(rng):
    _, sm = psmooth(rng.standard_normal(GRID.size), GRID, 8)
    np.testing.assert_allclose(sm.S @ np.ones(GRID.size), 1.0, atol=1e-10)
    assert 0 < sm.edf <= GRID.size
    assert sm.edf == pytest.approx(np.trace(sm.S))


def test_edf_nonincreasing_in_lambda():
    edf = [psmooth_matrix(GRID, 10, lam=l).edf for l in LAMBDA_GRID]
    assert np.all(np.diff(edf) <= 1e-10)


@pytest.mark.slow
def test_gcv_beats_raw_on_noisy_sine():
    grid = np.linspace(0, 1, 50)
    truth = np.sin(2 * np.pi * grid)
    wins = 0
    for seed in range(100):
        y = truth + 0.1 * np.random.default_rng(seed).standard_normal(50)
        fit, _ = psmooth(y, grid, 8)
        wins += np.mean((fit - truth) ** 2) <= np.mean((y - truth) ** 2)
    assert wins >= 90


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        psmooth(np.zeros(10), np.linspace(0, 1, 10), 8)
    with pytest.raises(DimensionMismatch):
        psmooth(np.zeros(10), np.linspace(0, 1, 11), 3)


def test_saturated_basis_interpolates(rng):
    gu, gs = np.linspace(0, 1, 12), np.linspace(0, 1, 14)
    G = rng.standard_normal((12, 14))
    out, _, _ = sandwich_smooth(G, gu, gs, knots_u=8, knots_s=10, lam_u=0.0, lam_s=0.0)
    np.testing.assert_allclose(out, G, atol=1e-8)


@pytest.mark.parametrize("gcv", ["joint", "marginal"])
def test_constant_surface_is_reproduced(gcv):
    gu, gs = np.linspace(0, 1, 15), np.linspace(0, 1, 20)
    out, _, _ = sandwich_smooth(np.full((15, 20), 3.2), gu, gs, gcv=gcv)
    np.testing.assert_allclose(out, 3.2, atol=1e-10)


@pytest.mark.oracle
@given(st.integers(9, 12), st.integers(9, 12), st.integers(0, 2**31 - 1))
def test_kronecker_identity(R, L, seed):
    rng = np.random.default_rng(seed)
    gu, gs = np.linspace(0, 1, R), np.linspace(0, 1, L)
    G = rng.standard_normal((R, L))
    out, S1, S2 = sandwich_smooth(G, gu, gs, knots_u=3, knots_s=4)
    vec = np.kron(S1.S, S2.S) @ G.flatten(order="F")
    np.testing.assert_allclose(out, vec.reshape((R, L), order="F"), atol=1e-10)


@pytest.mark.oracle
def test_kronecker_identity_6x5():
    rng = np.random.default_rng(1)
    S1, S2 = rng.standard_normal((5, 5)), rng.standard_normal((6, 6))
    G = rng.standard_normal((6, 5))
    vec = np.kron(S1, S2) @ G.flatten(order="F")
    np.testing.assert_allclose(S2 @ G @ S1.T, vec.reshape((6, 5), order="F"), atol=1e-10)


def test_linearity_for_fixed_smoothers(rng):
    gu, gs = np.linspace(0, 1, 15), np.linspace(0, 1, 20)
    G1, G2 = rng.standard_normal((2, 15, 20))
    f = lambda G: sandwich_smooth(G, gu, gs, lam_u=0.5, lam_s=2.0)[0]
    np.testing.assert_allclose(f(1.5 * G1 - 0.7 * G2), 1.5 * f(G1) - 0.7 * f(G2), atol=1e-10)


@pytest.mark.oracle
def test_joint_gcv_matches_brute_force(rng):
    gu, gs = np.linspace(0, 1, 12), np.linspace(0, 1, 16)
    u, s = np.meshgrid(gu, gs, indexing="ij")
    G = np.sin(3 * u + 2 * s) + 0.3 * rng.standard_normal(u.shape)
    lams = LAMBDA_GRID[::5]
    scores = np.empty((lams.size, lams.size))
    for i, lu in enumerate(lams):
        S2 = psmooth_matrix(gu, 4, lam=lu).S
        for j, ls in enumerate(lams):
            S1 = psmooth_matrix(gs, 6, lam=ls).S
            rss = np.sum((G - S2 @ G @ S1.T) ** 2)
            scores[i, j] = rss / (1 - np.trace(S1) * np.trace(S2) / G.size) ** 2
    i, j = np.unravel_index(np.argmin(scores), scores.shape)
    arg = (lams[i], lams[j])
    import lfofr.smoothing as sm

    old = sm.LAMBDA_GRID
    sm.LAMBDA_GRID = lams
    try:
        _, S1, S2 = sandwich_smooth(G, gu, gs, 4, 6)
    finally:
        sm.LAMBDA_GRID = old
    assert (S2.lam, S1.lam) == arg


def test_marginal_gcv_pools_slices(rng):
    gu, gs = np.linspace(0, 1, 12), np.linspace(0, 1, 16)
    G = rng.standard_normal((12, 16))
    _, S1, S2 = sandwich_smooth(G, gu, gs, 4, 6, gcv="marginal")
    assert S1.lam == psmooth_matrix(gs, 6, G.T).lam
    assert S2.lam == psmooth_matrix(gu, 4, G).lam


def test_sandwich_shape_errors(rng):
    with pytest.raises(DimensionMismatch):
        sandwich_smooth(np.zeros((5, 6)), np.linspace(0, 1, 6), np.linspace(0, 1, 6))
    with pytest.raises(ValueError):
        sandwich_smooth(np.zeros((12, 16)), np.linspace(0, 1, 12), np.linspace(0, 1, 16), 4, 6, gcv="bogus")
