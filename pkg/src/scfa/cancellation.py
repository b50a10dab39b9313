"""
Signal cancellation: weights that null the common-factor part of a weighted
sum of variables, judged by the correlations of that sum with all other
variables.

The weights of the free variables are set by minimizing the largest
absolute correlation of the (unit-normalized) combination with the outside
variables; the chi-square figure of merit is then computed from all those
correlations at the minimax solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import InconsistentCancellationError, SCFAError
from .stat_core import CholeskyBasis, chi2_figure

DEGENERATE_NORM = 1e-12
PAIR_SCAN_POINTS = 256
PAIR_STARTS = 3


class MinimaxResult(NamedTuple):
    x: np.ndarray
    fun: float
    converged: bool
    nfev: int


def _nelder_mead(f, x0, step, ftol, xtol, max_iter):
    n = x0.size
    simplex = np.empty((n + 1, n))
    simplex[0] = x0
    for i in range(n):
        simplex[i + 1] = x0
        simplex[i + 1, i] += step[i]
    fvals = np.array([f(x) for x in simplex])
    nfev = n + 1
    converged = False
    for _ in range(max_iter):
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        if (
            fvals[-1] - fvals[0] <= ftol
            and np.max(np.abs(simplex[1:] - simplex[0])) <= xtol * (1.0 + np.max(np.abs(simplex[0])))
        ):
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        nfev += 1
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            nfev += 1
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            nfev += 1
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            nfev += 1
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        # shrink towards the best vertex
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        fvals[1:] = [f(x) for x in simplex[1:]]
        nfev += n
    best = int(np.argmin(fvals))
    return simplex[best].copy(), float(fvals[best]), converged, nfev


def minimize_maxabs(
    objective: Callable[[np.ndarray], float],
    init,
    tol: float = 1e-8,
    max_iter: int | None = None,
    max_restarts: int = 3,
) -> MinimaxResult:
    """
    Derivative-free minimization of a piecewise-smooth criterion.

    Nelder-Mead simplex descent started from ``init``, restarted from the
    best point (with a fresh simplex) until a restart no longer improves the
    criterion by more than ``tol``.

    Parameters
    ----------
    objective : callable
        Maps a weight vector to a finite criterion value.
    init : array-like
        Starting weights.
    tol : float
        Convergence tolerance on the criterion.
    max_iter : int, optional
        Iteration cap per descent; defaults to ``200 * dim**2``.  Hitting the
        cap yields ``converged=False``.

    Raises
    ------
    SCFAError
        If the objective returns a non-finite value.
    """
    x0 = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    dim = x0.size
    if max_iter is None:
        max_iter = 200 * dim * dim

    def f(x):
        v = float(objective(x))
        if not math.isfinite(v):
            raise SCFAError(f"objective is not finite at {x}")
        return v

    if not math.isfinite(float(objective(x0))):
        raise SCFAError("objective is not finite at the initial point")

    step = np.where(np.abs(x0) > 1e-3, 0.1 * np.abs(x0), 0.05)
    x, fx, converged, nfev = _nelder_mead(f, x0, step, tol * 1e-2, 1e-10, max_iter)
    all_converged = converged
    for _ in range(max_restarts):
        step = np.where(np.abs(x) > 1e-3, 0.02 * np.abs(x), 0.01)
        x1, f1, converged, k = _nelder_mead(f, x, step, tol * 1e-2, 1e-10, max_iter)
        nfev += k
        all_converged = converged
        improved = f1 < fx - tol
        if f1 < fx:
            x, fx = x1, f1
        if not improved:
            break
    return MinimaxResult(x, fx, all_converged, nfev)


@dataclass(frozen=True)
class CancellationResult:
    """
    Outcome of one signal-cancellation attempt.

    ``weights`` includes the fixed ``-1`` entry.  A degenerate attempt
    (near-duplicate variables) carries ``chi2 = inf`` so that it never
    passes a significance gate.
    """

    weights: dict
    max_abs_corr: float
    chi2: float
    df: int
    converged: bool
    degenerate: bool = False


class CancellationProblem:
    """
    Criterion for one combination ``sum(w_k * free_k) - fixed``.

    Inner products are taken from the Cholesky basis once, so each
    evaluation costs two small matrix-vector products.
    """

    def __init__(self, basis: CholeskyBasis, free_vars: Sequence[int], fixed_var: int,
                 outside: Sequence[int]):
        free_vars = list(free_vars)
        outside = list(outside)
        if not free_vars:
            raise SCFAError("at least one free variable is required")
        if fixed_var in free_vars:
            raise SCFAError("the fixed variable cannot also be free")
        if len(set(free_vars)) != len(free_vars):
            raise SCFAError("free variables must be distinct")
        if not outside:
            raise SCFAError("no outside variables left to judge cancellation")
        combo = free_vars + [fixed_var]
        if set(combo).intersection(outside):
            raise SCFAError("outside variables overlap the combination")
        self.basis = basis
        self.free_vars = free_vars
        self.fixed_var = fixed_var
        self.outside = outside
        tc = basis.columns(combo)
        self.cross = basis.columns(outside).T @ tc
        self.gram = tc.T @ tc

    def _full(self, w):
        return np.append(np.asarray(w, dtype=float), -1.0)

    def norm(self, w) -> float:
        wf = self._full(w)
        return math.sqrt(max(float(wf @ self.gram @ wf), 0.0))

    def correlations(self, w) -> np.ndarray:
        wf = self._full(w)
        nrm = math.sqrt(max(float(wf @ self.gram @ wf), 0.0))
        if nrm < DEGENERATE_NORM:
            return np.ones(len(self.outside))
        return (self.cross @ wf) / nrm

    def criterion(self, w) -> float:
        return float(np.max(np.abs(self.correlations(w))))

    def criterion_scan(self, ws: np.ndarray) -> np.ndarray:
        """Vectorized criterion for a one-dimensional problem at every weight in ``ws``."""
        ws = np.asarray(ws, dtype=float)
        num = np.outer(self.cross[:, 0], ws) - self.cross[:, 1:2]
        g = self.gram
        den = np.sqrt(np.maximum(g[0, 0] * ws ** 2 - 2.0 * g[0, 1] * ws + g[1, 1], 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            crit = np.max(np.abs(num), axis=0) / den
        crit[~(den >= DEGENERATE_NORM)] = 1.0
        return crit

    def initial_ls(self) -> np.ndarray:
        """Least-squares weights nulling the unnormalized outside correlations."""
        a = self.cross[:, :-1]
        b = self.cross[:, -1]
        w, *_ = np.linalg.lstsq(a, b, rcond=None)
        return w


def _solve(problem: CancellationProblem, init, n: int, tol: float,
           objective=None) -> CancellationResult:
    res = minimize_maxabs(objective or problem.criterion, init, tol=tol)
    weights = {v: float(w) for v, w in zip(problem.free_vars, res.x)}
    weights[problem.fixed_var] = -1.0
    df = len(problem.outside)
    if problem.norm(res.x) < DEGENERATE_NORM:
        return CancellationResult(weights, 1.0, math.inf, df, False, degenerate=True)
    corrs = problem.correlations(res.x)
    chi2, df = chi2_figure(corrs, n)
    return CancellationResult(weights, float(np.max(np.abs(corrs))), chi2, df, res.converged)


def pair_initial_weight(basis: CholeskyBasis, i: int, j: int, outside: Sequence[int], n: int) -> float:
    """
    Median over informative outside variables of ``r_vj / r_vi``; falls back
    to ``r_ij`` when no outside variable correlates noticeably with ``i``.
    """
    ti, tj = basis.columns([i])[:, 0], basis.columns([j])[:, 0]
    to = basis.columns(outside)
    r_vi = to.T @ ti
    r_vj = to.T @ tj
    keep = np.abs(r_vi) > 2.0 / math.sqrt(n - 1)
    if np.any(keep):
        return float(np.median(r_vj[keep] / r_vi[keep]))
    return float(ti @ tj)


def admissible_interval(r_ij: float) -> tuple[float, float] | None:
    """
    Weights of ``w * i - j`` that give loadings no larger than 1 in magnitude.

    With ``a = sqrt(r/w)`` and ``b = sqrt(r*w)`` both bounded by 1, ``w`` has
    the sign of ``r`` and ``|r| <= |w| <= 1/|r|``.  ``None`` when ``r`` is
    zero to rounding, since its sign then carries no information.
    """
    if abs(r_ij) < DEGENERATE_NORM:
        return None
    lo, hi = sorted((r_ij, 1.0 / r_ij))
    return lo, hi


def cancel_pair(basis: CholeskyBasis, i: int, j: int, outside: Sequence[int], n: int,
                tol: float = 1e-8, constrain: bool = True) -> CancellationResult:
    """
    Optimize ``w`` in ``w * i - j``.

    With ``constrain`` (the default) the search stays inside
    ``admissible_interval(r_ij)``, so the weight always maps to loadings of
    magnitude at most 1.  Swapping ``i`` and ``j`` yields the reciprocal
    weight and the same chi-square (up to optimizer tolerance).
    """
    if i == j:
        raise SCFAError("cannot cancel a variable against itself")
    outside = list(outside)
    problem = CancellationProblem(basis, [i], j, outside)
    r_ij = float(problem.gram[0, 1])
    if 1.0 - abs(r_ij) < DEGENERATE_NORM:
        w = 1.0 if r_ij > 0 else -1.0
        return CancellationResult({i: w, j: -1.0}, 1.0, math.inf, len(outside), False, True)
    w0 = pair_initial_weight(basis, i, j, outside, n)
    bounds = admissible_interval(r_ij) if constrain else None
    if bounds is None:
        grid = np.tan(np.linspace(-np.pi / 2, np.pi / 2, PAIR_SCAN_POINTS + 2)[1:-1])

        def objective(w):
            return problem.criterion(w)
    else:
        lo, hi = bounds
        w0 = min(max(w0, lo), hi)
        grid = math.copysign(1.0, r_ij) * np.geomspace(abs(lo), abs(hi), PAIR_SCAN_POINTS)

        def objective(w):
            x = float(w[0])
            excess = max(lo - x, x - hi, 0.0)
            if excess > 0:
                return 1.0 + excess
            return problem.criterion(w)

    # The sampled criterion can have several local minima of similar depth:
    # descend from the initial guess and from the best local minima of a scan.
    grid = np.append(grid, w0)
    crit = problem.criterion_scan(grid)
    order = np.argsort(grid)
    g, cval = grid[order], crit[order]
    is_min = np.ones(g.size, dtype=bool)
    is_min[1:] &= cval[1:] <= cval[:-1]
    is_min[:-1] &= cval[:-1] <= cval[1:]
    minima = g[is_min][np.argsort(cval[is_min], kind="stable")][:PAIR_STARTS]
    starts = [w0] + [float(x) for x in minima if x != w0]
    best = None
    for start in starts:
        res = _solve(problem, [start], n, tol, objective)
        if best is None or res.max_abs_corr < best.max_abs_corr - 1e-15:
            best = res
    return best


def cancel_multi(basis: CholeskyBasis, cancellers: Sequence[int], target: int,
                 outside: Sequence[int], n: int, tol: float = 1e-8) -> CancellationResult:
    """
    Optimize the canceller weights in ``sum(w_k * canceller_k) - target``.

    The search starts from the least-squares weights that null the
    (unnormalized) correlations of the combination with the outside set.
    """
    problem = CancellationProblem(basis, cancellers, target, outside)
    return _solve(problem, problem.initial_ls(), n, tol)


def pair_loadings(w: float, r_ij: float) -> tuple[float, float]:
    """
    Loadings of ``i`` and ``j`` from the cancelling weight of ``w * i - j``.

    Since ``w * a = b`` and ``r_ij = a * b``, ``a = sqrt(r_ij / w)`` and
    ``b = r_ij / a``; ``a`` is positive and ``b`` takes the sign of ``r_ij``.

    Raises
    ------
    InconsistentCancellationError
        If ``r_ij / w <= 0``.
    """
    if w == 0:
        raise InconsistentCancellationError("cancelling weight is zero")
    ratio = r_ij / w
    if not ratio > 0:
        raise InconsistentCancellationError(
            f"correlation {r_ij:+.4f} has the opposite sign of the weight {w:+.4f}"
        )
    a = math.sqrt(ratio)
    return a, r_ij / a


def multifactor_loadings(
    result: CancellationResult,
    canceller_loadings: Mapping[int, float],
    canceller_factors: Mapping[int, int] | None = None,
) -> dict[int, float]:
    """
    Loadings of a cancelled target on the factors of its cancellers.

    The loading on canceller ``B``'s factor is ``w_B * loading(B)``.  Keys of
    the result are factor ids from ``canceller_factors`` (or the canceller
    variables themselves when no mapping is given).
    """
    out: dict[int, float] = {}
    for var, loading in canceller_loadings.items():
        if var not in result.weights:
            raise SCFAError(f"variable {var} did not take part in the cancellation")
        factor = var if canceller_factors is None else canceller_factors[var]
        if factor in out:
            raise SCFAError(f"two cancellers represent the same factor {factor}")
        out[factor] = result.weights[var] * loading
    return out
