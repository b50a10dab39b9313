"""Step through the pipeline on the built-in 18-variable population matrix."""

import numpy as np

from scfa import (
    builtin_challenge_spec,
    build_distances,
    cholesky_basis,
    complete_linkage,
    coplanarity_scan,
    detect_orphans,
    gate_clusters,
    population_model,
    render_dendrogram,
    run_scfa,
)
from scfa.cli import format_report

model = population_model(builtin_challenge_spec())
c = model.correlation_input(100000)
print("signal eigenvalues:", np.round(model.signal_eigenvalues, 2))

orphans = detect_orphans(c)
print("orphans (1-based):", [v + 1 for v in orphans])

rest = [v for v in range(c.p) if v not in orphans]
basis = cholesky_basis(c, rest)
d = build_distances(basis, rest, c.n)
gated = gate_clusters(complete_linkage(d), d)
print("clusters before coplanarity:", [[v + 1 for v in f] for f in gated.factors])

clusters = coplanarity_scan(gated, basis, c.n, r=np.asarray(c.r))
print("coplanar-rejected:", [v + 1 for v in clusters.coplanar_rejected])
print(render_dendrogram(clusters.dendrogram, c.labels, rejected=clusters.coplanar_rejected))

solution, report = run_scfa(c)
print(format_report(solution, report))
