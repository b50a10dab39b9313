import math

import numpy as np
import pytest

from scfa.clustering import (
    ClusterSet,
    DistanceMatrix,
    build_distances,
    complete_linkage,
    coplanarity_scan,
    gate_clusters,
    merge_critical,
    render_dendrogram,
    resolve_threads,
    triplet_is_coplanar,
)
from scfa.datagen import FactorStructureSpec, builtin_challenge_spec, population_model
from scfa.stat_core import chi_square_inv, cholesky_basis

from oracles import brute_force_complete_linkage, parse_dot

NON_ORPHANS = list(range(16))


def distance(chi2, variables=None, df=10, n=1000):
    chi2 = np.asarray(chi2, dtype=float)
    variables = tuple(range(chi2.shape[0])) if variables is None else tuple(variables)
    return DistanceMatrix(chi2, np.ones_like(chi2), variables, df, n)


@pytest.fixture(scope="module")
def fix_a():
    model = population_model(builtin_challenge_spec())
    c = model.correlation_input(100000)
    basis = cholesky_basis(c, NON_ORPHANS)
    d = build_distances(basis, NON_ORPHANS, c.n)
    return c, basis, d


class TestBuildDistances:
    def test_fix_a_population(self, fix_a):
        _, _, d = fix_a
        assert d.chi2.shape == (16, 16)
        assert d.df == 14
        iu = np.triu_indices(16, 1)
        assert len(iu[0]) == 120
        assert d.between(0, 1) < 1e-6
        assert d.between(0, 3) > chi_square_inv(0.95, 14) * 10

    def test_weights_reciprocal(self, fix_a):
        _, _, d = fix_a
        assert d.weight(0, 1) * d.weight(1, 0) == pytest.approx(1.0)
        assert d.weight(0, 1) == pytest.approx(0.6 / 0.5, abs=1e-4)

    def test_permutation_equivariance(self):
        model = population_model(builtin_challenge_spec())
        c = model.correlation_input(100000)
        perm = [4, 0, 9, 1, 3, 2, 8, 5, 7, 6]
        sub = c.subset(perm)
        d_ref = build_distances(cholesky_basis(c, list(range(10))), list(range(10)), c.n)
        d_perm = build_distances(cholesky_basis(sub), list(range(10)), c.n)
        expected = d_ref.chi2[np.ix_(perm, perm)]
        assert np.allclose(d_perm.chi2, expected, atol=1e-6, rtol=1e-6)

    def test_threads_identical(self, fix_a):
        c, basis, d = fix_a
        d4 = build_distances(basis, NON_ORPHANS, c.n, threads=4)
        assert np.array_equal(d.chi2, d4.chi2)

    def test_resolve_threads(self, monkeypatch):
        monkeypatch.setenv("SCFA_THREADS", "3")
        assert resolve_threads() == 3
        assert resolve_threads(2) == 2
        assert resolve_threads(0) >= 1
        monkeypatch.delenv("SCFA_THREADS")
        assert resolve_threads() == 1


class TestCompleteLinkage:
    def test_textbook_three_points(self):
        dend = complete_linkage(distance([[0, 1, 9], [1, 0, 9], [9, 9, 0]]))
        assert [(m.members, m.chi2) for m in dend.merges] == [((0, 1), 1.0), ((0, 1, 2), 9.0)]

    def test_uses_maximum(self):
        dend = complete_linkage(distance([[0, 1, 2, 9], [1, 0, 8, 9], [2, 8, 0, 3], [9, 9, 3, 0]]))
        assert [(m.members, m.chi2) for m in dend.merges] == [
            ((0, 1), 1.0), ((2, 3), 3.0), ((0, 1, 2, 3), 9.0)]

    def test_tie_break_smallest_pair(self):
        d = distance(np.full((4, 4), 5.0) - 5 * np.eye(4))
        merges = [m.members for m in complete_linkage(d).merges]
        assert merges == [(0, 1), (0, 1, 2), (0, 1, 2, 3)]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(50):
            q = int(rng.integers(3, 13))
            a = rng.exponential(10, (q, q))
            if trial % 5 == 0:
                a = np.round(a)  # ties
            chi2 = np.triu(a, 1)
            chi2 = chi2 + chi2.T
            dend = complete_linkage(distance(chi2))
            ours = [(m.members, m.chi2) for m in dend.merges]
            assert ours == brute_force_complete_linkage(chi2, list(range(q)))

    def test_heights_monotone(self, fix_a):
        dend = complete_linkage(fix_a[2])
        heights = [m.height for m in dend.merges]
        assert len(dend.merges) == 15
        assert all(b >= a for a, b in zip(heights, heights[1:]))


class TestGate:
    def test_all_zero_one_cluster(self):
        d = distance(np.zeros((5, 5)))
        cs = gate_clusters(complete_linkage(d), d)
        assert cs.factors == ((0, 1, 2, 3, 4),)
        assert cs.unexplained == ()

    def test_critical_formula(self):
        assert merge_critical(2, 3, 14, 0.05) == pytest.approx(chi_square_inv(0.95 ** (1 / 6), 14))

    def test_blocked_child_blocks_parent(self):
        crit1 = merge_critical(1, 1, 10, 0.05)
        chi2 = np.array([[0, 1, 2 * crit1], [1, 0, 2 * crit1], [2 * crit1, 2 * crit1, 0]])
        d = distance(chi2)
        cs = gate_clusters(complete_linkage(d), d)
        assert cs.factors == ((0, 1),)
        assert cs.unexplained == (2,)
        assert cs.dendrogram.threshold_height == pytest.approx(math.sqrt(crit1))
        assert [m.allowed for m in cs.dendrogram.merges] == [True, False]

    def test_fix_a_population(self, fix_a):
        _, _, d = fix_a
        cs = gate_clusters(complete_linkage(d), d)
        assert set(cs.factors) == {(0, 1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (12, 13), (14, 15)}
        assert cs.unexplained == (11,)

    def test_partition(self, fix_a):
        _, _, d = fix_a
        cs = gate_clusters(complete_linkage(d), d)
        members = [v for f in cs.factors for v in f] + list(cs.unexplained)
        assert sorted(members) == NON_ORPHANS
        assert all(len(f) >= 2 for f in cs.factors)

    def test_relabel_invariance(self):
        rng = np.random.default_rng(5)
        q = 8
        a = rng.exponential(20, (q, q))
        chi2 = np.triu(a, 1) + np.triu(a, 1).T
        d = distance(chi2)
        base = gate_clusters(complete_linkage(d), d)
        perm = rng.permutation(q)
        d2 = distance(chi2[np.ix_(perm, perm)])
        other = gate_clusters(complete_linkage(d2), d2)
        mapped = {tuple(sorted(int(perm[v]) for v in f)) for f in other.factors}
        assert mapped == set(base.factors)
        assert sorted(int(perm[v]) for v in other.unexplained) == list(base.unexplained)


class TestCoplanarity:
    def test_fix_a_rejects_6_7(self, fix_a):
        c, basis, d = fix_a
        gated = gate_clusters(complete_linkage(d), d)
        cs = coplanarity_scan(gated, basis, c.n, r=np.asarray(c.r))
        assert cs.coplanar_rejected == (5, 6)
        assert cs.unexplained == (5, 6, 11)
        assert (5, 6) not in cs.factors
        assert len(cs.factors) == 6
        assert ((3, 4), (5, 6), (7, 8)) in cs.coplanar_triplets

    def test_eight_attempts(self, fix_a):
        c, basis, _ = fix_a
        coplanar, attempts = triplet_is_coplanar(basis, ((3, 4), (5, 6), (7, 8)), c.n, 0.05)
        assert coplanar
        assert len(attempts) == 8
        assert all(res.df == 13 for _, res in attempts)

    def test_orthogonal_factors_not_coplanar(self):
        lam = np.zeros((9, 3))
        for k in range(3):
            lam[3 * k:3 * k + 3, k] = [0.7, 0.6, 0.8]
        c = population_model(FactorStructureSpec(lam, np.eye(3))).correlation_input(5000)
        basis = cholesky_basis(c)
        clusters = ClusterSet(((0, 1, 2), (3, 4, 5), (6, 7, 8)), ())
        cs = coplanarity_scan(clusters, basis, c.n)
        assert cs.coplanar_rejected == ()
        assert len(cs.factors) == 3

    def test_skipped_below_three(self, fix_a):
        c, basis, _ = fix_a
        clusters = ClusterSet(((0, 1, 2), (3, 4)), (5,))
        assert coplanarity_scan(clusters, basis, c.n) == clusters


class TestRender:
    def test_two_variables(self):
        d = distance([[0, 1.0], [1.0, 0]], df=1)
        dend = complete_linkage(d)
        text = render_dendrogram(dend)
        assert text.count("|") >= 1
        assert "1" in text and "2" in text
        nodes, edges = parse_dot(render_dendrogram(dend, fmt="dot"))
        assert len(edges) == 2

    def test_dot_grammar_fix_a(self, fix_a):
        c, basis, d = fix_a
        gated = gate_clusters(complete_linkage(d), d)
        cs = coplanarity_scan(gated, basis, c.n, r=np.asarray(c.r))
        text = render_dendrogram(cs.dendrogram, c.labels, fmt="dot", rejected=cs.coplanar_rejected)
        nodes, edges = parse_dot(text)
        assert len(edges) == 2 * 15
        assert 'label="-6"' in text and 'label="-7"' in text
        assert "threshold" in text

    def test_ascii_threshold_placement(self, fix_a):
        c, basis, d = fix_a
        gated = gate_clusters(complete_linkage(d), d)
        dend = gated.dendrogram
        allowed = [m for m in dend.merges if m.allowed]
        assert len(allowed) == 15 - 7  # 15 clustered variables end in seven clusters
        twelve = next(m for m in dend.merges if 11 in m.members and len(m.members) > 1)
        assert all(m.height <= dend.threshold_height for m in allowed)
        assert twelve.height > dend.threshold_height
        text = render_dendrogram(dend, c.labels, rejected=(5, 6))
        assert ":" in text and "-6" in text and "-7" in text
        assert text == render_dendrogram(dend, c.labels, rejected=(5, 6))

    def test_unknown_format(self, fix_a):
        with pytest.raises(ValueError):
            render_dendrogram(complete_linkage(fix_a[2]), fmt="svg")
