"""Nelder-Mead run on many independent problems in lockstep.

Every problem keeps its own simplex; at each iteration all still-active
problems take one Nelder-Mead step and their trial points are evaluated in
a single vectorized call.  The objective must treat rows independently so
that a problem's trajectory does not depend on which other problems share
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

RHO, CHI, PSI, SIGMA = 1.0, 2.0, 0.5, 0.5


@dataclass
class BatchResult:
    x: np.ndarray  # (n, dim)
    fun: np.ndarray  # (n,)
    nfev: np.ndarray  # (n,)
    nit: np.ndarray  # (n,)
    converged: np.ndarray  # (n,) bool


def minimize_batch(
    fun: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    *,
    step: float = 1.0,
    xatol: float = 1e-7,
    fatol: float = 1e-8,
    maxiter: int = 2000,
) -> BatchResult:
    """Minimize ``n`` problems with Nelder-Mead.

    ``fun(X, idx)`` receives trial points ``X`` of shape ``(m, dim)`` for
    problems ``idx`` (shape ``(m,)``) and returns ``m`` objective values.
    Convergence follows the usual rule: simplex diameter (max-norm, relative
    to the best vertex) below ``xatol`` and function spread below ``fatol``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, dim = x0.shape
    sim = np.repeat(x0[:, None, :], dim + 1, axis=1)
    for j in range(dim):
        sim[:, j + 1, j] += step
    fsim = fun(sim.reshape(-1, dim), np.repeat(np.arange(n), dim + 1)).reshape(n, dim + 1)
    nfev = np.full(n, dim + 1)
    nit = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)

    def order(rows):
        o = np.argsort(fsim[rows], axis=1, kind="stable")
        sim[rows] = np.take_along_axis(sim[rows], o[:, :, None], axis=1)
        fsim[rows] = np.take_along_axis(fsim[rows], o, axis=1)

    order(np.arange(n))
    while True:
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        xs, fs = sim[rows], fsim[rows]
        xdiff = np.max(np.abs(xs[:, 1:] - xs[:, :1]), axis=(1, 2))
        fdiff = np.max(np.abs(fs[:, 1:] - fs[:, :1]), axis=1)
        done = (xdiff <= xatol) & (fdiff <= fatol)
        converged[rows[done]] = True
        out_of_budget = nit[rows] >= maxiter
        active[rows[done | out_of_budget]] = False
        rows = rows[~(done | out_of_budget)]
        if rows.size == 0:
            break
        nit[rows] += 1
        xs, fs = sim[rows], fsim[rows]
        xbar = np.sum(xs[:, :-1], axis=1) / dim
        xw = xs[:, -1]
        fw = fs[:, -1]
        xr = (1 + RHO) * xbar - RHO * xw
        fr = fun(xr, rows)
        nfev[rows] += 1

        new_x = xr.copy()
        new_f = fr.copy()
        expand = fr < fs[:, 0]
        accept_r = (~expand) & (fr < fs[:, -2])
        contract = ~(expand | accept_r)
        outside = contract & (fr < fw)
        inside = contract & ~outside

        trial = np.zeros_like(xr)
        trial[expand] = (1 + RHO * CHI) * xbar[expand] - RHO * CHI * xw[expand]
        trial[outside] = (1 + PSI * RHO) * xbar[outside] - PSI * RHO * xw[outside]
        trial[inside] = (1 - PSI) * xbar[inside] + PSI * xw[inside]
        need = expand | contract
        ft = np.full(rows.size, np.inf)
        if need.any():
            ft[need] = fun(trial[need], rows[need])
            nfev[rows[need]] += 1

        take_e = expand & (ft < fr)
        new_x[take_e] = trial[take_e]
        new_f[take_e] = ft[take_e]
        take_oc = outside & (ft <= fr)
        take_ic = inside & (ft < fw)
        take_c = take_oc | take_ic
        new_x[take_c] = trial[take_c]
        new_f[take_c] = ft[take_c]
        shrink = contract & ~take_c

        keep = ~shrink
        if keep.any():
            r = rows[keep]
            sim[r, -1] = new_x[keep]
            fsim[r, -1] = new_f[keep]
        if shrink.any():
            r = rows[shrink]
            best = sim[r, :1]
            sim[r, 1:] = best + SIGMA * (sim[r, 1:] - best)
            pts = sim[r, 1:].reshape(-1, dim)
            fsim[r, 1:] = fun(pts, np.repeat(r, dim)).reshape(r.size, dim)
            nfev[r] += dim
        order(rows)

    return BatchResult(sim[:, 0].copy(), fsim[:, 0].copy(), nfev, nit, converged)
