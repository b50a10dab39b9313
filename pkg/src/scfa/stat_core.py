"""
Correlation inputs, the Cholesky basis, and the distribution arithmetic
shared by every stage of the analysis.

The chi-square and normal functions are implemented here rather than taken
from scipy so that critical values are reproducible to ~1e-12 independent
of the installed scipy version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .exceptions import DegenerateCombinationError, NotCorrelationError, SCFAError

ResidualSEMode = Literal["model_fixed", "paired"]

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-8
PIVOT_DROP_TOL = 1e-10
ATANH_CLAMP = 1.0 - 1e-15


@dataclass(frozen=True, eq=False)
class CorrelationInput:
    """
    A correlation matrix together with the sample size it was computed from.

    Parameters
    ----------
    r : ndarray of shape (p, p)
        Symmetric Pearson correlation matrix with unit diagonal.
    n : int
        Number of observations.
    labels : tuple of str, optional
        Variable names; defaults to ``"1" .. "p"``.
    """

    r: np.ndarray
    n: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise SCFAError(f"correlation matrix must be square, got shape {r.shape}")
        p = r.shape[0]
        if p < 3:
            raise SCFAError(f"at least 3 variables are required, got {p}")
        if not np.all(np.isfinite(r)):
            raise SCFAError("correlation matrix contains non-finite entries")
        if np.max(np.abs(r - r.T)) > SYMMETRY_TOL:
            raise SCFAError("correlation matrix is not symmetric")
        if np.max(np.abs(np.diag(r) - 1.0)) > SYMMETRY_TOL:
            raise SCFAError("correlation matrix must have a unit diagonal")
        n = int(self.n)
        if n < p + 2:
            raise SCFAError(f"sample size {n} is too small for {p} variables (need n >= p + 2)")
        min_eig = float(np.linalg.eigvalsh(r)[0])
        if min_eig < -PSD_TOL:
            raise NotCorrelationError(
                f"matrix is not positive semidefinite (smallest eigenvalue {min_eig:.3g})"
            )
        r = 0.5 * (r + r.T)
        np.fill_diagonal(r, 1.0)
        r.setflags(write=False)
        labels = self.labels
        if labels is None:
            labels = tuple(str(i + 1) for i in range(p))
        elif len(labels) != p:
            raise SCFAError(f"{len(labels)} labels given for {p} variables")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "labels", tuple(str(s) for s in labels))

    @property
    def p(self) -> int:
        return self.r.shape[0]

    def subset(self, variables: Sequence[int]) -> "CorrelationInput":
        idx = list(variables)
        return CorrelationInput(
            self.r[np.ix_(idx, idx)], self.n, tuple(self.labels[i] for i in idx)
        )


@dataclass(frozen=True, eq=False)
class CholeskyBasis:
    """
    Column basis ``t`` with ``t.T @ t == r``.

    Column ``k`` of ``t`` represents variable ``column_index[k]`` (an index
    into the original correlation matrix).  Weighted sums of columns have the
    same correlations with the other columns as the same weighted sums of the
    standardized raw data would have.
    """

    t: np.ndarray
    column_index: tuple[int, ...]
    _position: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_position", {v: k for k, v in enumerate(self.column_index)}
        )

    @property
    def variables(self) -> tuple[int, ...]:
        return self.column_index

    def columns(self, variables: Iterable[int]) -> np.ndarray:
        """Return the basis columns of the given variables."""
        try:
            cols = [self._position[v] for v in variables]
        except KeyError as exc:
            raise SCFAError(f"variable {exc.args[0]} is not part of this basis") from None
        return self.t[:, cols]


@dataclass(frozen=True)
class SignificanceConfig:
    """Overall type-I risk and the residual standard-error convention."""

    alpha: float = 0.05
    residual_se_mode: ResidualSEMode = "model_fixed"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise SCFAError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.residual_se_mode not in ("model_fixed", "paired"):
            raise SCFAError(f"unknown residual_se_mode {self.residual_se_mode!r}")


def correlation_from_data(data, labels: Sequence[str] | None = None) -> CorrelationInput:
    """
    Pearson correlation matrix of the columns of ``data``.

    Raises
    ------
    SCFAError
        If the data contain non-finite values, fewer than 3 rows, or a
        column with zero variance.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise SCFAError(f"data must be a 2-D matrix, got {x.ndim} dimension(s)")
    if x.shape[0] < 3:
        raise SCFAError(f"at least 3 observations are required, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise SCFAError("data contain non-finite entries")
    centered = x - x.mean(axis=0)
    scale = np.sqrt(np.einsum("ij,ij->j", centered, centered))
    for j, s in enumerate(scale):
        if s <= 1e-12 * max(1.0, float(np.max(np.abs(x[:, j])))):
            name = labels[j] if labels is not None else str(j + 1)
            raise SCFAError(f"column {name} has zero variance")
    z = centered / scale
    r = z.T @ z
    r = 0.5 * (r + r.T)
    np.clip(r, -1.0, 1.0, out=r)
    np.fill_diagonal(r, 1.0)
    return CorrelationInput(r, x.shape[0], None if labels is None else tuple(labels))


def correlation_from_covariance(cov, n: int, labels=None) -> CorrelationInput:
    """Normalize a covariance matrix to a correlation matrix."""
    c = np.asarray(cov, dtype=float)
    d = np.diag(c)
    if np.any(d <= 0):
        raise SCFAError("covariance matrix has a non-positive variance")
    s = 1.0 / np.sqrt(d)
    r = c * np.outer(s, s)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return CorrelationInput(r, n, labels)


def _pivoted_cholesky(r: np.ndarray, tol: float) -> np.ndarray:
    # Outer-product Cholesky with diagonal pivoting; returns L (p x rank).
    p = r.shape[0]
    a = r.copy()
    diag = np.diag(a).copy()
    cols = []
    remaining = list(range(p))
    while remaining:
        k = max(remaining, key=lambda i: diag[i])
        if diag[k] <= tol:
            break
        col = np.zeros(p)
        col[k] = math.sqrt(diag[k])
        rest = [i for i in remaining if i != k]
        if rest:
            col[rest] = a[rest, k] / col[k]
            a[np.ix_(rest, rest)] -= np.outer(col[rest], col[rest])
            diag[rest] -= col[rest] ** 2
        cols.append(col)
        remaining = rest
    return np.column_stack(cols) if cols else np.zeros((p, 0))


def cholesky_basis(c: CorrelationInput, variables: Sequence[int] | None = None) -> CholeskyBasis:
    """
    Upper-triangular Cholesky basis of (a subset of) ``c``.

    Positive definite inputs use the plain factorization.  Semidefinite
    inputs fall back to a pivoted factorization that drops dimensions whose
    residual variance is below 1e-10; the resulting basis has fewer rows
    than columns, which is harmless because only inner products of columns
    are ever used.
    """
    idx = tuple(range(c.p)) if variables is None else tuple(variables)
    r = c.r[np.ix_(idx, idx)]
    min_eig = float(np.linalg.eigvalsh(r)[0])
    if min_eig < -PSD_TOL:
        raise NotCorrelationError(
            f"matrix is not positive semidefinite (smallest eigenvalue {min_eig:.3g})"
        )
    try:
        t = np.linalg.cholesky(r).T
    except np.linalg.LinAlgError:
        t = _pivoted_cholesky(r, PIVOT_DROP_TOL).T
    norms = np.sqrt(np.einsum("ij,ij->j", t, t))
    t = t / norms
    t.setflags(write=False)
    return CholeskyBasis(t, idx)


def project_combination(
    basis: CholeskyBasis, weights: Mapping[int, float], outside: Iterable[int]
) -> np.ndarray:
    """
    Correlations of the weighted sum of ``weights`` variables with each
    ``outside`` variable.

    Raises
    ------
    DegenerateCombinationError
        If the weighted sum has norm below 1e-12.
    """
    if not weights:
        raise SCFAError("weights must name at least one variable")
    outside = list(outside)
    overlap = set(weights).intersection(outside)
    if overlap:
        raise SCFAError(f"outside variables overlap the combination: {sorted(overlap)}")
    combo = basis.columns(weights.keys()) @ np.array(list(weights.values()), dtype=float)
    norm = float(np.linalg.norm(combo))
    if norm < 1e-12:
        raise DegenerateCombinationError("weighted sum of variables has zero norm")
    return basis.columns(outside).T @ (combo / norm)


# ---------------------------------------------------------------------------
# Distribution functions


def _gamma_series(a: float, x: float) -> float:
    # Lower regularized gamma P(a, x) by its power series; used for x < a + 1.
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    # Upper regularized gamma Q(a, x) by modified Lentz; used for x >= a + 1.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma(a: float, x: float) -> tuple[float, float]:
    """Return ``(P(a, x), Q(a, x))``, the regularized incomplete gamma pair."""
    if a <= 0:
        raise SCFAError(f"shape parameter must be positive, got {a}")
    if x < 0:
        raise SCFAError(f"argument must be non-negative, got {x}")
    if x == 0:
        return 0.0, 1.0
    if x < a + 1.0:
        lower = _gamma_series(a, x)
        return lower, 1.0 - lower
    upper = _gamma_continued_fraction(a, x)
    return 1.0 - upper, upper


def _check_df(k) -> int:
    if int(k) != k or k < 1:
        raise SCFAError(f"degrees of freedom must be a positive integer, got {k}")
    return int(k)


def chi_square_cdf(x: float, k: int) -> float:
    """Chi-square cumulative distribution function with ``k`` degrees of freedom."""
    k = _check_df(k)
    if x < 0:
        raise SCFAError(f"chi-square argument must be non-negative, got {x}")
    if math.isinf(x):
        return 1.0
    return regularized_gamma(0.5 * k, 0.5 * x)[0]


def chi_square_sf(x: float, k: int) -> float:
    """Survival function ``1 - chi_square_cdf(x, k)`` without cancellation."""
    k = _check_df(k)
    if x < 0:
        raise SCFAError(f"chi-square argument must be non-negative, got {x}")
    if math.isinf(x):
        return 0.0
    return regularized_gamma(0.5 * k, 0.5 * x)[1]


def _chi_square_pdf(x: float, k: int) -> float:
    if x <= 0:
        return 0.0
    h = 0.5 * k
    return math.exp((h - 1.0) * math.log(x) - 0.5 * x - h * math.log(2.0) - math.lgamma(h))


def chi_square_inv(p: float, k: int) -> float:
    """
    Quantile of the chi-square distribution: the ``x`` with ``cdf(x, k) = p``.

    Bracketed Newton iteration with bisection fallback.
    """
    k = _check_df(k)
    if not 0.0 < p < 1.0:
        raise SCFAError(f"probability must lie in (0, 1), got {p}")
    upper_tail = p > 0.5
    target = 1.0 - p if upper_tail else p

    def g(x):
        if upper_tail:
            return target - chi_square_sf(x, k)
        return chi_square_cdf(x, k) - target

    lo, hi = 0.0, max(1.0, float(k))
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        gx = g(x)
        if gx == 0:
            return x
        if gx < 0:
            lo = x
        else:
            hi = x
        dens = _chi_square_pdf(x, k)
        step_ok = False
        if dens > 0:
            cand = x - gx / dens
            if lo < cand < hi:
                step_ok = True
        if not step_ok:
            cand = 0.5 * (lo + hi)
        if abs(cand - x) <= 1e-15 * max(1.0, x) or hi - lo <= 1e-15 * max(1.0, hi):
            return cand
        x = cand
    return x


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


# Acklam's rational approximation coefficients.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)


def normal_quantile(p: float) -> float:
    """
    Inverse of the standard normal CDF.

    A rational approximation (relative error ~1e-9) refined by a Halley
    step; the result satisfies ``|normal_cdf(z) - p| < 1e-10``.
    """
    if not 0.0 < p < 1.0:
        raise SCFAError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        z = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    elif p <= 1.0 - p_low:
        q = p - 0.5
        s = q * q
        z = (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * q / (
            ((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        z = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    # Halley refinement; the tail branch works on the complement for accuracy.
    if z > 0:
        e = -(0.5 * math.erfc(z / math.sqrt(2.0)) - (1.0 - p))
    else:
        e = 0.5 * math.erfc(-z / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * z * z)
    return z - u / (1.0 + 0.5 * z * u)


def sidak_level(alpha: float, d: int) -> float:
    """Per-test level ``1 - (1 - alpha)**(1/d)`` keeping the family-wise risk at alpha."""
    if d < 1:
        raise SCFAError(f"test count must be at least 1, got {d}")
    return -math.expm1(math.log1p(-alpha) / d)


def two_sided_z(alpha: float, d: int = 1) -> float:
    """Two-sided normal critical value at the Sidak-corrected level for ``d`` tests."""
    return normal_quantile(1.0 - 0.5 * sidak_level(alpha, d))


def chi2_figure(corrs, n: int) -> tuple[float, int]:
    """
    Chi-square figure of merit ``(n - 1) * sum(r**2)`` and its degrees of freedom.
    """
    r = np.asarray(corrs, dtype=float).ravel()
    if r.size == 0:
        raise SCFAError("no remaining variables to test the combination against")
    if np.any(np.abs(r) > 1.0 + 1e-12):
        raise SCFAError("correlations must lie in [-1, 1]")
    return float((n - 1) * np.dot(r, r)), int(r.size)


def residual_z(r_obs: float, r_sol: float, n: int, mode: ResidualSEMode = "model_fixed") -> float:
    """
    Absolute z score of the difference between Fisher-transformed observed
    and solution-implied correlations.

    ``model_fixed`` uses SE ``1/sqrt(n-3)``; ``paired`` uses ``sqrt(2/(n-3))``.
    """
    if n <= 3:
        raise SCFAError(f"sample size must exceed 3, got {n}")
    for r in (r_obs, r_sol):
        if abs(r) >= 1.0:
            raise SCFAError(f"Fisher transform is infinite for |r| = {abs(r)}")
    if mode == "model_fixed":
        se = 1.0 / math.sqrt(n - 3)
    elif mode == "paired":
        se = math.sqrt(2.0 / (n - 3))
    else:
        raise SCFAError(f"unknown residual SE mode {mode!r}")
    a = math.atanh(max(-ATANH_CLAMP, min(ATANH_CLAMP, r_obs)))
    b = math.atanh(max(-ATANH_CLAMP, min(ATANH_CLAMP, r_sol)))
    return abs(a - b) / se
