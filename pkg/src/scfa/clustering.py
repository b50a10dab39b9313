"""
Clustering of variables into factors.

Pairwise cancellation chi-squares serve as distances for complete-linkage
agglomeration.  A merge is accepted as "same factor" only while its linkage
distance is a non-significant chi-square, Sidak-corrected for the number of
between-cluster pairs.  Accepted clusters are then screened for coplanarity:
a two-variable cluster with proportional loadings on two factors lies in the
plane of the clusters of those factors.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations, product
from typing import Sequence

import numpy as np

from .cancellation import cancel_multi, cancel_pair
from .exceptions import SCFAError
from .stat_core import CholeskyBasis, chi_square_inv, sidak_level


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit value, else ``SCFA_THREADS``, else 1; 0 means all CPUs."""
    if threads is None:
        threads = int(os.environ.get("SCFA_THREADS", "1") or 1)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """
    Pairwise cancellation chi-squares over the non-orphan ``variables``.

    ``weights[a, b]`` is the optimized weight ``w`` of ``w * a - b`` (so
    ``weights[b, a] == 1 / weights[a, b]``).  Rows and columns are positions
    in ``variables``.
    """

    chi2: np.ndarray
    weights: np.ndarray
    variables: tuple[int, ...]
    df: int
    n: int

    def index(self, var: int) -> int:
        return self.variables.index(var)

    def between(self, a: int, b: int) -> float:
        return float(self.chi2[self.index(a), self.index(b)])

    def weight(self, a: int, b: int) -> float:
        return float(self.weights[self.index(a), self.index(b)])


@dataclass(frozen=True)
class Merge:
    left: tuple[int, ...]
    right: tuple[int, ...]
    chi2: float
    allowed: bool = False
    critical: float = math.nan

    @property
    def height(self) -> float:
        return math.sqrt(self.chi2)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self.left + self.right))


@dataclass(frozen=True)
class Dendrogram:
    """Complete-linkage merge history; heights are on the square-root chi-square scale."""

    merges: tuple[Merge, ...]
    variables: tuple[int, ...]
    threshold_height: float | None = None

    def leaf_order(self) -> list[int]:
        """Leaves ordered so that every merge joins adjacent runs."""
        seqs: dict[tuple[int, ...], list[int]] = {(v,): [v] for v in self.variables}
        for m in self.merges:
            seqs[m.members] = seqs.pop(m.left) + seqs.pop(m.right)
        out: list[int] = []
        for key in sorted(seqs, key=min):
            out.extend(seqs[key])
        return out


@dataclass(frozen=True)
class ClusterSet:
    """
    Factor clusters (variable tuples, ordered by smallest member), variables
    left to be explained by multifactorial cancellation, and the members of
    clusters rejected as coplanar.
    """

    factors: tuple[tuple[int, ...], ...]
    unexplained: tuple[int, ...]
    coplanar_rejected: tuple[int, ...] = ()
    dendrogram: Dendrogram | None = None
    coplanar_triplets: tuple = field(default=(), compare=False)


def build_distances(basis: CholeskyBasis, non_orphans: Sequence[int], n: int,
                    threads: int | None = None) -> DistanceMatrix:
    """Cancel every pair of non-orphan variables against all the others."""
    variables = tuple(non_orphans)
    q = len(variables)
    if q < 3:
        raise SCFAError(f"at least 3 non-orphan variables are needed, got {q}")
    pairs = list(combinations(range(q), 2))

    def work(ab):
        a, b = ab
        i, j = variables[a], variables[b]
        outside = [v for v in variables if v != i and v != j]
        return cancel_pair(basis, i, j, outside, n)

    results = _map(work, pairs, resolve_threads(threads))
    chi2 = np.zeros((q, q))
    weights = np.ones((q, q))
    for (a, b), res in zip(pairs, results):
        w = res.weights[variables[a]]
        chi2[a, b] = chi2[b, a] = res.chi2
        weights[a, b] = w
        weights[b, a] = 1.0 / w if w != 0 else math.inf
    chi2.setflags(write=False)
    weights.setflags(write=False)
    return DistanceMatrix(chi2, weights, variables, q - 2, n)


def complete_linkage(d: DistanceMatrix) -> Dendrogram:
    """
    Complete-linkage agglomeration down to a single cluster.

    Ties are broken by the lexicographically smallest pair of
    (smallest member) indices.
    """
    q = len(d.variables)
    clusters: list[tuple[int, ...] | None] = [(v,) for v in d.variables]
    dist = np.array(d.chi2, dtype=float)
    np.fill_diagonal(dist, math.inf)
    active = list(range(q))
    merges = []
    while len(active) > 1:
        best = None
        for x, y in combinations(active, 2):
            val = dist[x, y]
            key = (val, min(clusters[x]), min(clusters[y]))
            if best is None or key < best[0]:
                best = (key, x, y)
        (val, _, _), x, y = best
        merges.append(Merge(clusters[x], clusters[y], float(val)))
        # cluster x becomes the union; complete linkage takes the max distance
        for z in active:
            if z not in (x, y):
                dist[x, z] = dist[z, x] = max(dist[x, z], dist[y, z])
        clusters[x] = tuple(sorted(clusters[x] + clusters[y]))
        clusters[y] = None
        active.remove(y)
    return Dendrogram(tuple(merges), d.variables)


def merge_critical(size_a: int, size_b: int, df: int, alpha: float) -> float:
    """Chi-square critical value for merging clusters of the given sizes."""
    return chi_square_inv(1.0 - sidak_level(alpha, size_a * size_b), df)


def gate_clusters(dend: Dendrogram, d: DistanceMatrix, alpha: float = 0.05) -> ClusterSet:
    """
    Keep the maximal merges that only join variables of the same factor.

    A merge is allowed when both of its children are allowed (singletons
    always are) and its linkage distance does not exceed the Sidak-corrected
    critical chi-square for ``|A| * |B|`` between-cluster pairs.  The
    dendrogram threshold is the square root of the critical value of the
    last allowed merge.
    """
    homogeneous = {(v,) for v in dend.variables}
    gated = []
    last_critical = None
    for m in dend.merges:
        crit = merge_critical(len(m.left), len(m.right), d.df, alpha)
        ok = m.left in homogeneous and m.right in homogeneous and m.chi2 <= crit
        if ok:
            homogeneous.discard(m.left)
            homogeneous.discard(m.right)
            homogeneous.add(m.members)
            last_critical = crit
        gated.append(replace(m, allowed=ok, critical=crit))
    factors = sorted((c for c in homogeneous if len(c) >= 2), key=min)
    singles = sorted(c[0] for c in homogeneous if len(c) == 1)
    threshold = None if last_critical is None else math.sqrt(last_critical)
    dendrogram = Dendrogram(tuple(gated), dend.variables, threshold)
    return ClusterSet(tuple(factors), tuple(singles), (), dendrogram)


def _mean_abs_corr(r: np.ndarray, a: Sequence[int], b: Sequence[int]) -> float:
    return float(np.mean(np.abs(r[np.ix_(list(a), list(b))])))


def triplet_is_coplanar(basis: CholeskyBasis, triplet, n: int, alpha: float) -> tuple[bool, list]:
    """
    Test whether the third cluster's variables are cancelled by one
    representative of each of the first two clusters, for every choice of
    representatives.  Stops at the first significant attempt.
    """
    a, b, c = triplet
    attempts = list(product(a, b, c))
    pool = basis.variables
    level = None
    results = []
    for va, vb, vc in attempts:
        outside = [v for v in pool if v not in (va, vb, vc)]
        res = cancel_multi(basis, [va, vb], vc, outside, n)
        if level is None:
            level = chi_square_inv(1.0 - sidak_level(alpha, len(attempts)), res.df)
        results.append(((va, vb, vc), res))
        if not res.chi2 <= level:
            return False, results
    return True, results


def coplanarity_scan(clusters: ClusterSet, basis: CholeskyBasis, n: int,
                     alpha: float = 0.05, r: np.ndarray | None = None) -> ClusterSet:
    """
    Reject clusters that are coplanar with two other clusters.

    Triplets are scanned in canonical order (clusters sorted by smallest
    member; the first two cancel the third).  For a coplanar triplet, the
    pair of clusters with the smallest mean absolute correlation is kept and
    the third cluster's variables move to ``unexplained``.  The scan restarts
    after each rejection until no coplanar triplet remains.

    ``r`` is the correlation matrix indexed by original variable ids; when
    omitted it is rebuilt from the basis.
    """
    if r is None:
        tb = basis.t
        size = max(basis.variables) + 1
        r = np.zeros((size, size))
        idx = list(basis.variables)
        r[np.ix_(idx, idx)] = tb.T @ tb
    factors = sorted(clusters.factors, key=min)
    unexplained = list(clusters.unexplained)
    rejected = list(clusters.coplanar_rejected)
    found = list(clusters.coplanar_triplets)
    changed = True
    while changed and len(factors) >= 3:
        changed = False
        for triplet in combinations(factors, 3):
            coplanar, _ = triplet_is_coplanar(basis, triplet, n, alpha)
            if not coplanar:
                continue
            pairs = list(combinations(range(3), 2))
            strength = [_mean_abs_corr(r, triplet[x], triplet[y]) for x, y in pairs]
            keep = pairs[int(np.argmin(strength))]
            drop = triplet[({0, 1, 2} - set(keep)).pop()]
            factors.remove(drop)
            rejected.extend(drop)
            unexplained.extend(drop)
            found.append(tuple(triplet))
            changed = True
            break
    dend = clusters.dendrogram
    return ClusterSet(
        tuple(factors), tuple(sorted(unexplained)), tuple(sorted(rejected)), dend, tuple(found)
    )


# ---------------------------------------------------------------------------
# Rendering


def _label(var: int, labels, rejected) -> str:
    text = labels[var] if labels is not None else str(var + 1)
    if var in rejected:
        text = "-" + text
    return text


def render_dendrogram(dend: Dendrogram, labels: Sequence[str] | None = None,
                      fmt: str = "ascii", rejected: Sequence[int] = (),
                      width: int = 60) -> str:
    """
    Text rendering of a dendrogram.

    ``ascii`` draws leaves top to bottom with merge heights growing to the
    right and the decision threshold as a ``:`` column; ``dot`` emits a
    Graphviz digraph.  Labels of coplanar-rejected variables are negated.
    """
    rejected = set(rejected)
    if fmt == "dot":
        return _render_dot(dend, labels, rejected)
    if fmt != "ascii":
        raise SCFAError(f"unknown dendrogram format {fmt!r}")
    return _render_ascii(dend, labels, rejected, width)


def _render_dot(dend, labels, rejected) -> str:
    lines = ["digraph dendrogram {", "  rankdir=BT;", '  node [shape=plaintext];']
    if dend.threshold_height is not None:
        lines.append(f'  label="threshold sqrt(chi2) = {dend.threshold_height:.4f}";')
    for v in dend.variables:
        lines.append(f'  v{v} [label="{_label(v, labels, rejected)}"];')
    node_of = {(v,): f"v{v}" for v in dend.variables}
    for k, m in enumerate(dend.merges):
        name = f"m{k}"
        h = "inf" if math.isinf(m.chi2) else f"{m.height:.4f}"
        style = "solid" if m.allowed else "dashed"
        lines.append(f'  {name} [shape=point, xlabel="{h}"];')
        for child in (m.left, m.right):
            lines.append(f"  {node_of[child]} -> {name} [style={style}];")
        node_of[m.members] = name
    lines.append("}")
    return "\n".join(lines) + "\n"


def _render_ascii(dend, labels, rejected, width) -> str:
    leaves = dend.leaf_order()
    finite = [m.height for m in dend.merges if math.isfinite(m.chi2)]
    top = max(finite + [dend.threshold_height or 0.0, 1e-12])
    cap = width - 1

    def col(h):
        if not math.isfinite(h):
            return cap
        return min(cap, int(round(h / top * (cap - 1))))

    rows = 2 * len(leaves) - 1
    grid = [[" "] * width for _ in range(rows)]
    row_of = {(v,): 2 * k for k, v in enumerate(leaves)}
    col_of = {(v,): 0 for v in leaves}
    for m in dend.merges:
        c = col(m.height)
        ra, rb = row_of[m.left], row_of[m.right]
        for child, rr in ((m.left, ra), (m.right, rb)):
            for x in range(col_of[child], c):
                grid[rr][x] = "-"
        lo, hi = sorted((ra, rb))
        for y in range(lo, hi + 1):
            grid[y][c] = "|"
        row_of[m.members] = (ra + rb) // 2
        col_of[m.members] = c
    if dend.threshold_height is not None:
        tc = col(dend.threshold_height)
        for y in range(rows):
            if grid[y][tc] == " ":
                grid[y][tc] = ":"
    names = {v: _label(v, labels, rejected) for v in leaves}
    pad = max(len(s) for s in names.values())
    out = []
    for y in range(rows):
        name = names[leaves[y // 2]] if y % 2 == 0 else ""
        out.append(f"{name:>{pad}} " + "".join(grid[y]).rstrip())
    scale = f"{'':>{pad}} 0{'':{max(0, cap - 2 - len(f'{top:.2f}'))}}{top:.2f}"
    out.append(scale)
    if dend.threshold_height is not None:
        out.append(f"{'':>{pad}} threshold (:) at sqrt(chi2) = {dend.threshold_height:.4f}")
    return "\n".join(out) + "\n"
