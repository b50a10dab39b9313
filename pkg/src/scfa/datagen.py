"""
Population correlation matrices from a common-factor structure, and seeded
multivariate-normal samples drawn from them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidStructureError
from .stat_core import CorrelationInput

MIN_COMMUNALITY = 0.25


@dataclass(frozen=True, eq=False)
class FactorStructureSpec:
    """Population loadings (p x m) and factor correlations (m x m)."""

    loadings: np.ndarray
    factor_corr: np.ndarray

    def __post_init__(self):
        lam = np.array(self.loadings, dtype=float)
        phi = np.array(self.factor_corr, dtype=float)
        if lam.ndim != 2:
            raise InvalidStructureError("loadings must be a 2-D matrix")
        m = lam.shape[1]
        if phi.shape != (m, m):
            raise InvalidStructureError(
                f"factor correlations must be {m}x{m} to match the loadings, got {phi.shape}"
            )
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(phi))):
            raise InvalidStructureError("structure contains non-finite values")
        if np.max(np.abs(phi - phi.T)) > 1e-12:
            raise InvalidStructureError("factor correlation matrix is not symmetric")
        if np.max(np.abs(np.diag(phi) - 1.0)) > 1e-12:
            raise InvalidStructureError("factor correlation matrix needs a unit diagonal")
        if np.linalg.eigvalsh(phi)[0] < -1e-10:
            raise InvalidStructureError("factor correlation matrix is not positive semidefinite")
        lam.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "factor_corr", phi)

    @property
    def communalities(self) -> np.ndarray:
        lam = self.loadings
        return np.einsum("ij,jk,ik->i", lam, self.factor_corr, lam)


@dataclass(frozen=True, eq=False)
class PopulationModel:
    spec: FactorStructureSpec
    r_pop: np.ndarray
    uniqueness: np.ndarray
    signal_eigenvalues: np.ndarray
    full_eigenvalues: np.ndarray

    @property
    def p(self) -> int:
        return self.r_pop.shape[0]

    def correlation_input(self, n: int) -> CorrelationInput:
        """The population matrix labelled with a nominal sample size."""
        return CorrelationInput(self.r_pop, n)


def population_model(spec: FactorStructureSpec) -> PopulationModel:
    """
    Build ``R = L Phi L^T + diag(uniqueness)`` with unit variances.

    Raises
    ------
    InvalidStructureError
        If a communality exceeds 1.
    """
    comm = spec.communalities
    bad = np.flatnonzero(comm > 1.0 + 1e-12)
    if bad.size:
        raise InvalidStructureError(
            "communality above 1 for variable(s) " + ", ".join(str(i + 1) for i in bad)
        )
    weak = np.flatnonzero((comm > 0) & (comm < MIN_COMMUNALITY))
    if weak.size:
        warnings.warn(
            "communality below 0.25 for variable(s) " + ", ".join(str(i + 1) for i in weak),
            stacklevel=2,
        )
    uniq = np.clip(1.0 - comm, 0.0, 1.0)
    signal = spec.loadings @ spec.factor_corr @ spec.loadings.T
    signal = 0.5 * (signal + signal.T)
    r = signal + np.diag(uniq)
    np.fill_diagonal(r, 1.0)
    m = min(spec.loadings.shape[1], np.linalg.matrix_rank(spec.loadings))
    sig_eigs = np.sort(np.linalg.eigvalsh(signal))[::-1][:m]
    full_eigs = np.sort(np.linalg.eigvalsh(r))[::-1]
    for arr in (r, uniq, sig_eigs, full_eigs):
        arr.setflags(write=False)
    return PopulationModel(spec, r, uniq, sig_eigs, full_eigs)


def _factor_root(phi: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(phi)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(phi)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_data(model: PopulationModel, n: int, seed: int, stream: int = 0,
                return_scores: bool = False):
    """
    Draw ``n`` rows ``X = F L^T + E diag(sqrt(uniqueness))``.

    Factor scores ``F`` have covariance ``Phi`` and unit-normal noise ``E``
    is independent of them, so rows follow N(0, R).  Draws come from a
    Philox counter-based generator keyed by ``(seed, stream)``; the same
    pair reproduces the same bytes on every platform.
    """
    lam = model.spec.loadings
    p, m = lam.shape
    if n < p + 2:
        raise InvalidStructureError(f"sample size {n} too small for {p} variables")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))
    scores = rng.standard_normal((n, m)) @ _factor_root(model.spec.factor_corr).T
    noise = rng.standard_normal((n, p))
    x = scores @ lam.T + noise * np.sqrt(model.uniqueness)
    if return_scores:
        return x, scores
    return x


CHALLENGE_LOADINGS = np.array([
    [.5, 0, 0, 0, 0, 0],
    [.6, 0, 0, 0, 0, 0],
    [.55, 0, 0, 0, 0, 0],
    [0, .5, 0, 0, 0, 0],
    [0, .6, 0, 0, 0, 0],
    [0, .5, .75, 0, 0, 0],
    [0, -.4, -.6, 0, 0, 0],
    [0, 0, .5, 0, 0, 0],
    [0, 0, .6, 0, 0, 0],
    [0, 0, 0, .5, 0, 0],
    [0, 0, 0, .6, 0, 0],
    [0, .4, .6, .4, 0, 0],
    [0, 0, 0, 0, .5, 0],
    [0, 0, 0, 0, .8, 0],
    [0, 0, 0, 0, 0, .5],
    [0, 0, 0, 0, 0, .8],
    [0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0],
])

CHALLENGE_FACTOR_CORR = np.array([
    [1, .4, -.3, 0, .4, 0],
    [.4, 1, 0, -.3, .3, 0],
    [-.3, 0, 1, 0, -.5, 0],
    [0, -.3, 0, 1, 0, 0],
    [.4, .3, -.5, 0, 1, 0],
    [0, 0, 0, 0, 0, 1],
], dtype=float)


def builtin_challenge_spec() -> FactorStructureSpec:
    """The 18-variable, 6-factor challenge structure with two orphan variables."""
    return FactorStructureSpec(CHALLENGE_LOADINGS, CHALLENGE_FACTOR_CORR)
