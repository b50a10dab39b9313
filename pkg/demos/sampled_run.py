"""Analyse one sampled data set and compare the loadings with the generating structure."""

import sys

import numpy as np

from scfa import builtin_challenge_spec, population_model, run_scfa, sample_data

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
model = population_model(builtin_challenge_spec())
x = sample_data(model, 2000, seed)
solution, report = run_scfa(x)

lam = model.spec.loadings
print(f"seed {seed}: factors {[[v + 1 for v in f] for f in solution.factors]}")
print("orphans:", [v + 1 for v in solution.orphans])
if solution.pattern.shape == lam.shape:
    dev = np.abs(solution.pattern - lam)
    print(f"largest loading deviation {dev.max():.3f} at variable {np.unravel_index(dev.argmax(), dev.shape)[0] + 1}")
else:
    print(f"{solution.pattern.shape[1]} factors found, generating structure has {lam.shape[1]}")
print(f"residuals beyond the per-variable bound: {len(report.listed)}")
