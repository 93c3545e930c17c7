import warnings

import numpy as np
import pytest

from lfofr.basis import trapezoid_weights
from lfofr.errors import GridMismatch, RankDeficientWarning
from lfofr.fpca import estimate_fpca, scores_for


def _orthonormal(grid, k):
    w = trapezoid_weights(grid)
    raw = np.column_stack([np.sin((j + 1) * np.pi * grid) + 0.3 * grid**j for j in range(k)])
    Q, _ = np.linalg.qr(np.sqrt(w)[:, None] * raw)
    return Q / np.sqrt(w)[:, None]


@pytest.mark.oracle
def test_rank_one_recovers_direction(rng):
    grid = np.linspace(0, 1, 41)
    psi = _orthonormal(grid, 1)[:, 0]
    W = rng.standard_normal(200)[:, None] * psi[None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        f = estimate_fpca(W, grid, K_w=5)
    assert min(np.max(np.abs(f.eigenfunctions[:, 0] - psi)), np.max(np.abs(f.eigenfunctions[:, 0] + psi))) < 1e-6
    assert np.all(f.all_eigenvalues[1:5] <= 1e-10)


def test_rank_deficiency_warns_and_truncates(rng):
    grid = np.linspace(0, 1, 30)
    psi = _orthonormal(grid, 2)
    W = rng.standard_normal((50, 2)) @ psi.T
    with pytest.warns(RankDeficientWarning):
        f = estimate_fpca(W, grid, K_w=6)
    assert f.n_components == 2 and f.rank_deficient


@pytest.mark.oracle
def test_exact_low_rank_reconstruction(rng):
    grid = np.linspace(0, 1, 51)
    psi = _orthonormal(grid, 4)
    mu = np.cos(grid)
    W = mu + rng.standard_normal((80, 4)) * [3, 2, 1, 0.5] @ psi.T
    f = estimate_fpca(W, grid, K_w=4)
    rec = f.mean + f.scores @ f.eigenfunctions.T
    assert np.max(np.abs(rec - W)) <= 1e-8
    w = trapezoid_weights(grid)
    np.testing.assert_allclose(f.eigenfunctions.T @ (w[:, None] * f.eigenfunctions), np.eye(4), atol=1e-8)


def test_scores_of_mean_and_training(rng):
    grid = np.linspace(0, 1, 25)
    W = rng.standard_normal((40, 25)).cumsum(axis=1)
    f = estimate_fpca(W, grid, K_w=5)
    np.testing.assert_allclose(scores_for(f, np.tile(f.mean, (3, 1))), 0.0, atol=1e-10)
    np.testing.assert_allclose(scores_for(f, W), f.scores, atol=1e-10)
    e1 = scores_for(f, f.mean + f.eigenfunctions[:, 0])
    np.testing.assert_allclose(e1[0], np.eye(5)[0], atol=1e-8)
    with pytest.raises(GridMismatch):
        scores_for(f, W[:, :-1])


def test_eigenvalues_sorted_and_bounded(rng):
    grid = np.linspace(0, 1, 25)
    W = rng.standard_normal((40, 25)).cumsum(axis=1)
    f = estimate_fpca(W, grid, K_w=8)
    assert np.all(np.diff(f.eigenvalues) <= 1e-12) and np.all(f.eigenvalues >= 0)
    w = trapezoid_weights(grid)
    total = np.mean(((W - W.mean(0)) ** 2) @ w)
    assert f.eigenvalues.sum() <= total + 1e-8


def test_sign_convention_and_row_permutation(rng):
    grid = np.linspace(0, 1, 25)
    W = rng.standard_normal((40, 25)).cumsum(axis=1)
    f = estimate_fpca(W, grid, K_w=4)
    idx = np.argmax(np.abs(f.eigenfunctions), axis=0)
    assert np.all(f.eigenfunctions[idx, np.arange(4)] > 0)
    perm = rng.permutation(40)
    g = estimate_fpca(W[perm], grid, K_w=4)
    np.testing.assert_allclose(g.eigenfunctions, f.eigenfunctions, atol=1e-8)
    np.testing.assert_allclose(g.scores, f.scores[perm], atol=1e-8)


def test_presmoothing_flag_reduces_noise(rng):
    grid = np.linspace(0, 1, 40)
    psi = _orthonormal(grid, 2)
    clean = rng.standard_normal((60, 2)) @ psi.T
    noisy = clean + 0.3 * rng.standard_normal(clean.shape)
    f = estimate_fpca(noisy, grid, K_w=2, presmooth=True)
    rec = f.mean + f.scores @ f.eigenfunctions.T
    assert np.mean((rec - clean) ** 2) < np.mean((noisy - clean) ** 2)


def test_bad_K_w():
    with pytest.raises(ValueError):
        estimate_fpca(np.ones((3, 5)), np.linspace(0, 1, 5), K_w=4)
