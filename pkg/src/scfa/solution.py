"""
Assembly of the factor solution and the end-to-end pipeline.

Stages, in order: orphan detection, pairwise cancellation distances,
complete-linkage clustering with significance gating, coplanar cluster
rejection, unifactorial loadings, factor correlations, multifactorial
loadings, and the residual report.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Mapping, Sequence

import numpy as np

from .cancellation import CancellationResult, cancel_multi, multifactor_loadings, pair_loadings
from .clustering import (
    ClusterSet,
    Dendrogram,
    DistanceMatrix,
    build_distances,
    complete_linkage,
    coplanarity_scan,
    gate_clusters,
)
from .exceptions import EmptyModelError, InconsistentCancellationError, SCFAError
from .stat_core import (
    CholeskyBasis,
    CorrelationInput,
    SignificanceConfig,
    chi_square_inv,
    cholesky_basis,
    correlation_from_data,
    residual_z,
    sidak_level,
    two_sided_z,
)

log = logging.getLogger(__name__)

UNEXPLAINED_MESSAGE = (
    "some variables cannot be explained through signal cancellation; "
    "a factor may lack two exclusive indicator variables"
)
MIN_CORRECTION_LOADING = 0.05
CHI2_FLOOR_PER_DF = 1e-6


@dataclass(frozen=True)
class Explanation:
    """How a multifactorial target was explained."""

    target: int
    cardinality: int
    n_combinations: int
    successes: tuple[tuple[tuple[int, ...], float], ...]
    loadings: dict


@dataclass(frozen=True, eq=False)
class FactorSolution:
    """
    Pattern matrix (all original variables, orphans as zero rows), factor
    correlations, and the bookkeeping of how every variable was handled.

    ``factors[k]`` lists the unifactorial variables defining factor ``k``.
    Variable indices are zero-based column positions.
    """

    pattern: np.ndarray
    phi: np.ndarray
    factors: tuple[tuple[int, ...], ...]
    orphans: tuple[int, ...]
    multifactorial: tuple[int, ...]
    unexplained_after: tuple[int, ...]
    clusters: ClusterSet
    dendrogram: Dendrogram
    n: int
    labels: tuple[str, ...]
    explanations: tuple[Explanation, ...] = field(default=())

    @property
    def n_factors(self) -> int:
        return self.pattern.shape[1]

    @property
    def fully_explained(self) -> bool:
        return not self.unexplained_after

    def message(self) -> str | None:
        return UNEXPLAINED_MESSAGE if self.unexplained_after else None


@dataclass(frozen=True)
class MergedIndicator:
    member_vars: tuple[int, ...]
    weights: tuple[float, ...]
    loading: float
    k: int


@dataclass(frozen=True)
class ResidualRow:
    i: int
    j: int
    r_obs: float
    r_sol: float
    z: float


@dataclass(frozen=True)
class ResidualReport:
    rows: tuple[ResidualRow, ...]
    z_crit_var: float
    z_crit_global: float
    listed: tuple[ResidualRow, ...]
    se_mode: str = "model_fixed"

    @property
    def max_z(self) -> float:
        return max((row.z for row in self.rows), default=0.0)


def orphan_threshold(p: int, n: int, alpha: float = 0.05) -> float:
    """Smallest absolute correlation that is significant for a variable among ``p - 1``."""
    crit = chi_square_inv(1.0 - sidak_level(alpha, p - 1), 1)
    return math.sqrt(crit / (n - 1))


def orphan_statistics(c: CorrelationInput) -> np.ndarray:
    """Largest absolute correlation of each variable with all others."""
    r = np.abs(np.array(c.r))
    np.fill_diagonal(r, 0.0)
    return r.max(axis=1)


def detect_orphans(c: CorrelationInput, alpha: float = 0.05) -> tuple[int, ...]:
    """
    Variables none of whose correlations is significant after a Sidak
    correction for the ``p - 1`` correlations each variable has.

    Raises
    ------
    EmptyModelError
        If every variable is an orphan.
    """
    crit = chi_square_inv(1.0 - sidak_level(alpha, c.p - 1), 1)
    stat = (c.n - 1) * orphan_statistics(c) ** 2
    orphans = tuple(int(v) for v in np.flatnonzero(stat < crit))
    if len(orphans) == c.p:
        raise EmptyModelError("no variable correlates significantly with any other")
    return orphans


def _cluster_signs(cluster: Sequence[int], r: np.ndarray) -> dict[int, float]:
    lead = cluster[0]
    return {v: 1.0 if v == lead or r[lead, v] >= 0 else -1.0 for v in cluster}


def unifactorial_loadings(clusters: ClusterSet | Sequence[Sequence[int]], d: DistanceMatrix,
                          c: CorrelationInput) -> dict[int, float]:
    """
    Loadings of the clustered variables on their own factor.

    Each within-cluster pair gives one estimate per member from its
    cancelling weight; a member's loading is the plain mean of its
    estimates.  Signs are set relative to the smallest-index member, which
    is positive.
    """
    factors = clusters.factors if isinstance(clusters, ClusterSet) else clusters
    out: dict[int, float] = {}
    for cluster in factors:
        cluster = sorted(cluster)
        signs = _cluster_signs(cluster, c.r)
        estimates: dict[int, list[float]] = {v: [] for v in cluster}
        for u, v in combinations(cluster, 2):
            try:
                a, b = pair_loadings(d.weight(u, v), float(c.r[u, v]))
            except InconsistentCancellationError as exc:
                raise InconsistentCancellationError(
                    f"cluster {[x + 1 for x in cluster]}, pair ({u + 1}, {v + 1}): {exc}"
                ) from None
            estimates[u].append(abs(a))
            estimates[v].append(abs(b))
        for v in cluster:
            out[v] = signs[v] * float(np.mean(estimates[v]))
    return out


def factor_correlations(factors: Sequence[Sequence[int]], loadings: Mapping[int, float],
                        c: CorrelationInput, alpha: float = 0.05) -> np.ndarray:
    """
    Factor correlations from cross-cluster variable correlations.

    For each pair of factors the (sign-aligned) cross correlations are
    averaged; a mean that is not significant at the Sidak level for the
    number of factor pairs gives a null factor correlation.  Otherwise the
    estimate is the mean of ``r_uv / (l_u * l_v)``, clipped to [-1, 1].
    """
    m = len(factors)
    phi = np.eye(m)
    if m < 2:
        return phi
    z_crit = two_sided_z(alpha, m * (m - 1) // 2)
    root_n = math.sqrt(c.n - 1)
    for fa, fb in combinations(range(m), 2):
        aligned = []
        corrected = []
        for u, v in product(factors[fa], factors[fb]):
            r_uv = float(c.r[u, v])
            lu, lv = loadings[u], loadings[v]
            aligned.append(r_uv * math.copysign(1.0, lu) * math.copysign(1.0, lv))
            if min(abs(lu), abs(lv)) < MIN_CORRECTION_LOADING:
                warnings.warn(
                    f"loading below {MIN_CORRECTION_LOADING} for pair ({u + 1}, {v + 1}); "
                    "excluded from the factor correlation",
                    stacklevel=2,
                )
                continue
            corrected.append(r_uv / (lu * lv))
        if abs(np.mean(aligned)) * root_n < z_crit or not corrected:
            continue
        phi[fa, fb] = phi[fb, fa] = float(np.clip(np.mean(corrected), -1.0, 1.0))
    return phi


def explain_multifactorial(
    targets: Sequence[int],
    factors: Sequence[Sequence[int]],
    loadings: Mapping[int, float],
    basis: CholeskyBasis,
    n: int,
    alpha: float = 0.05,
) -> tuple[dict[int, Explanation], tuple[int, ...]]:
    """
    Cancel each target's signal with one unifactorial representative per
    factor, over factor subsets of increasing size.

    At a given subset size every combination of representatives is tried;
    a combination succeeds when its chi-square is not significant at the
    Sidak level for the number of combinations of that size.  The first
    size with a success ends the search.  Successful combinations are
    grouped by factor subset; within the subset of largest total weight the
    loadings are averaged with weights ``1 / chi2**2``.

    Returns the explanations by target and the targets left unexplained.
    """
    factor_of = {v: k for k, cl in enumerate(factors) for v in cl}
    pool = basis.variables
    m = len(factors)
    explained: dict[int, Explanation] = {}
    unexplained = []
    for target in targets:
        found = None
        for size in range(1, m + 1):
            combos = [
                reps
                for subset in combinations(range(m), size)
                for reps in product(*(factors[k] for k in subset))
            ]
            if not combos:
                continue
            level = sidak_level(alpha, len(combos))
            successes: list[tuple[tuple[int, ...], CancellationResult]] = []
            crit = None
            for reps in combos:
                outside = [v for v in pool if v != target and v not in reps]
                if not outside:
                    continue
                res = cancel_multi(basis, list(reps), target, outside, n)
                if crit is None:
                    crit = chi_square_inv(1.0 - level, res.df)
                if res.chi2 <= crit:
                    successes.append((reps, res))
            if successes:
                found = (size, len(combos), successes)
                break
        if found is None:
            unexplained.append(target)
            continue
        size, count, successes = found
        # Pool only estimates of the same loadings: when several factor
        # subsets succeed, keep the one carrying the largest total weight.
        by_subset: dict[tuple[int, ...], list] = {}
        for reps, res in successes:
            chi2 = max(res.chi2, res.df * CHI2_FLOOR_PER_DF)
            key = tuple(sorted(factor_of[v] for v in reps))
            by_subset.setdefault(key, []).append((reps, res, 1.0 / chi2 ** 2))
        best = max(by_subset, key=lambda key: (sum(w for *_, w in by_subset[key]), [-k for k in key]))
        acc: dict[int, float] = {}
        total = 0.0
        for reps, res, weight in by_subset[best]:
            est = multifactor_loadings(res, {v: loadings[v] for v in reps}, factor_of)
            for k, val in est.items():
                acc[k] = acc.get(k, 0.0) + weight * val
            total += weight
        final = {k: val / total for k, val in sorted(acc.items())}
        explained[target] = Explanation(
            target, size, count, tuple((reps, res.chi2) for reps, res in successes), final
        )
    return explained, tuple(unexplained)


def merge_indicators(member_vars: Sequence[int], loadings: Mapping[int, float],
                     c: CorrelationInput) -> MergedIndicator:
    """
    Merge unifactorial indicators of one factor into a single indicator.

    Each member is scaled to unit unique variance (and sign-aligned), so the
    noise variance of the sum is ``k``; the merged loading is
    ``sqrt(SS - k) / sqrt(SS)`` with ``SS`` the variance of the sum.

    Raises
    ------
    SCFAError
        If the sum carries no signal (``SS <= k``).
    """
    members = list(member_vars)
    k = len(members)
    if k < 1:
        raise SCFAError("at least one member is required")
    lam = np.array([loadings[v] for v in members], dtype=float)
    if np.any(np.abs(lam) >= 1.0):
        raise SCFAError("member loadings must be below 1 in magnitude")
    weights = np.sign(lam) / np.sqrt(1.0 - lam ** 2)
    weights[lam == 0] = 1.0
    ss = float(weights @ c.r[np.ix_(members, members)] @ weights)
    if ss <= k:
        raise SCFAError("merged indicator carries no signal")
    return MergedIndicator(tuple(members), tuple(float(w) for w in weights),
                           math.sqrt(ss - k) / math.sqrt(ss), k)


def implied_correlations(pattern: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Solution-implied correlations ``L Phi L^T`` with a unit diagonal."""
    lam = np.asarray(pattern, dtype=float)
    r = lam @ np.asarray(phi, dtype=float) @ lam.T
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def residual_critical_values(p_nonorphan: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided critical residual z per variable and over all pairs."""
    pairs = max(1, p_nonorphan * (p_nonorphan - 1) // 2)
    return two_sided_z(alpha, p_nonorphan), two_sided_z(alpha, pairs)


def residual_report(c: CorrelationInput, solution: FactorSolution,
                    cfg: SignificanceConfig | None = None, min_rows: int = 5) -> ResidualReport:
    """
    Fisher-z differences between observed and implied correlations over all
    non-orphan pairs, sorted by decreasing z.  Rows with ``z > 2`` are
    listed, with at least ``min_rows`` rows.
    """
    cfg = cfg or SignificanceConfig()
    implied = implied_correlations(solution.pattern, solution.phi)
    orphans = set(solution.orphans)
    keep = [v for v in range(c.p) if v not in orphans]
    rows = []
    for i, j in combinations(keep, 2):
        r_obs = float(c.r[i, j])
        r_sol = float(np.clip(implied[i, j], -1.0 + 1e-15, 1.0 - 1e-15))
        r_obs_c = float(np.clip(r_obs, -1.0 + 1e-15, 1.0 - 1e-15))
        rows.append(ResidualRow(i, j, r_obs, r_sol, residual_z(r_obs_c, r_sol, c.n, cfg.residual_se_mode)))
    rows.sort(key=lambda row: (-row.z, row.i, row.j))
    z_var, z_global = residual_critical_values(len(keep), cfg.alpha)
    listed = [row for row in rows if row.z > 2.0]
    if len(listed) < min_rows:
        listed = rows[:min_rows]
    return ResidualReport(tuple(rows), z_var, z_global, tuple(listed), cfg.residual_se_mode)


def run_scfa(data, cfg: SignificanceConfig | None = None, n: int | None = None,
             threads: int | None = None) -> tuple[FactorSolution, ResidualReport]:
    """
    Run the full signal cancellation factor analysis.

    Parameters
    ----------
    data : CorrelationInput or array-like
        Either a correlation input, a raw ``n x p`` data matrix, or a
        correlation matrix (in which case ``n`` is required).
    cfg : SignificanceConfig, optional
    n : int, optional
        Sample size for a bare correlation matrix.
    threads : int, optional
        Worker threads for the pairwise scan (see ``resolve_threads``).

    Returns
    -------
    solution : FactorSolution
    report : ResidualReport
    """
    cfg = cfg or SignificanceConfig()
    if isinstance(data, CorrelationInput):
        c = data
    elif n is not None:
        c = CorrelationInput(np.asarray(data, dtype=float), n)
    else:
        c = correlation_from_data(data)
    alpha = cfg.alpha

    orphans = detect_orphans(c, alpha)
    non_orphans = [v for v in range(c.p) if v not in orphans]
    if len(non_orphans) < 3:
        raise EmptyModelError(f"only {len(non_orphans)} non-orphan variable(s) remain")
    basis = cholesky_basis(c, non_orphans)
    d = build_distances(basis, non_orphans, c.n, threads=threads)
    dend = complete_linkage(d)
    gated = gate_clusters(dend, d, alpha)
    clusters = coplanarity_scan(gated, basis, c.n, alpha, r=np.asarray(c.r))
    factors = tuple(tuple(sorted(f)) for f in sorted(clusters.factors, key=min))
    loadings = unifactorial_loadings(factors, d, c)
    phi = factor_correlations(factors, loadings, c, alpha)

    m = len(factors)
    pattern = np.zeros((c.p, m))
    for k, cluster in enumerate(factors):
        for v in cluster:
            pattern[v, k] = loadings[v]

    if m:
        explained, unexplained = explain_multifactorial(
            clusters.unexplained, factors, loadings, basis, c.n, alpha
        )
    else:
        explained, unexplained = {}, tuple(clusters.unexplained)
    for target, ex in explained.items():
        for k, val in ex.loadings.items():
            pattern[target, k] = val
    if unexplained:
        log.warning("%s: %s", UNEXPLAINED_MESSAGE, ", ".join(c.labels[v] for v in unexplained))
    multifactorial = tuple(sorted(t for t, ex in explained.items() if len(ex.loadings) >= 2))

    pattern.setflags(write=False)
    phi.setflags(write=False)
    solution = FactorSolution(
        pattern=pattern,
        phi=phi,
        factors=factors,
        orphans=tuple(orphans),
        multifactorial=multifactorial,
        unexplained_after=tuple(sorted(unexplained)),
        clusters=clusters,
        dendrogram=clusters.dendrogram,
        n=c.n,
        labels=c.labels,
        explanations=tuple(explained[t] for t in sorted(explained)),
    )
    return solution, residual_report(c, solution, cfg)
