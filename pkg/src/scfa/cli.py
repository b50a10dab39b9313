"""Command-line front end: ``scfa run``, ``scfa simulate`` and ``scfa selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import io
from .clustering import render_dendrogram
from .datagen import builtin_challenge_spec, population_model, sample_data
from .exceptions import SCFAError
from .solution import FactorSolution, ResidualReport, orphan_threshold, residual_critical_values, run_scfa
from .stat_core import SignificanceConfig

EXIT_OK, EXIT_INPUT, EXIT_UNEXPLAINED, EXIT_SELFTEST = 0, 1, 2, 3

# Published values for the built-in challenge structure.
SIGNAL_EIGENVALUES = (2.51, 1.50, 0.89, 0.77, 0.51, 0.26)
FULL_EIGENVALUES = (2.96, 2.13, 1.42, 1.40, 1.13, 1.00, 1.00, 0.93, 0.73, 0.72,
                    0.70, 0.70, 0.67, 0.60, 0.59, 0.58, 0.47, 0.29)
Z_CRIT = {16: (2.9478, 3.5226), 10: (2.7996, 3.2537)}


@dataclass(frozen=True)
class RunConfig:
    input_kind: Literal["data_csv", "corr_csv"] = "data_csv"
    n_override: int | None = None
    alpha: float = 0.05
    residual_se_mode: str = "model_fixed"
    seed: int | None = None
    output_format: Literal["text", "json"] = "text"
    dendrogram_format: Literal["none", "ascii", "dot"] = "none"

    def __post_init__(self):
        if self.input_kind == "corr_csv" and self.n_override is None:
            raise SCFAError("a correlation matrix input needs --n")


def _fmt_loading(x: float) -> str:
    return f"{x:+.3f}" if x != 0 else "     ."


def format_report(solution: FactorSolution, report: ResidualReport) -> str:
    """Human-readable report; byte-identical for identical inputs."""
    labels = solution.labels
    width = max(4, max(len(s) for s in labels))
    m = solution.n_factors
    out = [f"Pattern matrix (n = {solution.n}, {len(labels)} variables, {m} factors)"]
    out.append(" " * width + "".join(f"  {'F' + str(k + 1):>6}" for k in range(m)))
    for v, row in enumerate(solution.pattern):
        out.append(f"{labels[v]:>{width}}" + "".join(f"  {_fmt_loading(x)}" for x in row))
    out.append("")
    out.append("Factor correlations")
    out.append(" " * 4 + "".join(f"  {'F' + str(k + 1):>7}" for k in range(m)))
    for k, row in enumerate(solution.phi):
        out.append(f"{'F' + str(k + 1):>4}" + "".join(f"  {x:+.4f}" for x in row))
    out.append("")

    def names(vs):
        return ", ".join(labels[v] for v in vs) or "none"

    out.append(f"Orphans: {names(solution.orphans)}")
    out.append(f"Multifactorial: {names(solution.multifactorial)}")
    out.append(f"Coplanar-rejected: {names(solution.clusters.coplanar_rejected)}")
    if solution.unexplained_after:
        out.append(f"Unexplained: {names(solution.unexplained_after)}")
        out.append(f"Note: {solution.message()}")
    out.append("")
    out.append(f"r\tc\tRobs\tRsol\tz_diff\tz_crit(/var,global) = "
               f"({report.z_crit_var:.4f}, {report.z_crit_global:.4f})")
    for row in report.listed:
        out.append(f"{labels[row.i]}\t{labels[row.j]}\t{row.r_obs:+.3f}\t{row.r_sol:+.3f}\t{row.z:.4f}")
    return "\n".join(out) + "\n"


def load_input(path, cfg: RunConfig):
    if cfg.input_kind == "corr_csv":
        return io.load_correlation_csv(path, cfg.n_override)
    return io.load_data_csv(path)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(cfg: RunConfig, path, out: str | None = None) -> int:
    try:
        c = load_input(path, cfg)
        sig = SignificanceConfig(cfg.alpha, cfg.residual_se_mode)
        solution, report = run_scfa(c, sig)
    except (SCFAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    rejected = solution.clusters.coplanar_rejected
    dend = None
    if cfg.dendrogram_format != "none" and solution.dendrogram is not None:
        dend = render_dendrogram(solution.dendrogram, solution.labels, fmt=cfg.dendrogram_format,
                                 rejected=rejected)
    if cfg.output_format == "json":
        doc = io.solution_to_dict(solution, report)
        if dend is not None:
            doc["dendrogram_render"] = dend
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        text = format_report(solution, report)
        if dend is not None:
            text += "\n" + dend + ("" if dend.endswith("\n") else "\n")
    _emit(text, out)
    if solution.unexplained_after:
        print(f"warning: {solution.message()}", file=sys.stderr)
        return EXIT_UNEXPLAINED
    return EXIT_OK


def cmd_simulate(spec_path, n: int, seed: int, out_path) -> int:
    try:
        spec = builtin_challenge_spec() if spec_path in (None, "builtin") else io.load_structure_spec(spec_path)
        model = population_model(spec)
        x = sample_data(model, n, seed)
    except (SCFAError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out_path = Path(out_path)
    io.write_csv_matrix(out_path, x, header=[f"v{i + 1}" for i in range(model.p)])
    sidecar = out_path.with_name(out_path.name + ".eigenvalues.json")
    sidecar.write_text(json.dumps({
        "seed": seed,
        "n": n,
        "signal_eigenvalues": model.signal_eigenvalues.tolist(),
        "full_eigenvalues": model.full_eigenvalues.tolist(),
    }, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out_path} ({n} x {model.p}) and {sidecar.name}")
    return EXIT_OK


def _selftest_checks():
    for p, expected in Z_CRIT.items():
        got = residual_critical_values(p)
        ok = all(abs(g - e) <= 5e-4 for g, e in zip(got, expected))
        yield ok, f"z_crit p'={p}: ({got[0]:.4f}, {got[1]:.4f})"

    thr = orphan_threshold(18, 2000)
    yield abs(thr - 0.0663) <= 5e-4, f"orphan threshold p=18 n=2000: {thr:.4f}"

    model = population_model(builtin_challenge_spec())
    sig_ok = np.allclose(model.signal_eigenvalues, SIGNAL_EIGENVALUES, atol=0.005, rtol=0)
    full_ok = np.allclose(model.full_eigenvalues, FULL_EIGENVALUES, atol=0.005, rtol=0)
    yield sig_ok and full_ok, (f"eigenvalues: first {model.full_eigenvalues[0]:.2f}, "
                               f"signal {', '.join(f'{v:.2f}' for v in model.signal_eigenvalues)}")

    t0 = time.perf_counter()
    solution, _ = run_scfa(model.correlation_input(100000))
    lam = model.spec.loadings
    pat = solution.pattern
    shape_ok = pat.shape == lam.shape and np.array_equal(pat != 0, lam != 0)
    ok = shape_ok and solution.orphans == (16, 17)
    if ok:
        # the orthogonal doublet only identifies the product of its loadings
        identified = np.ones(lam.shape[0], dtype=bool)
        identified[[14, 15]] = False
        ok = (np.max(np.abs(pat[identified] - lam[identified])) <= 0.01
              and abs(pat[14, 5] * pat[15, 5] - lam[14, 5] * lam[15, 5]) <= 0.01
              and np.max(np.abs(solution.phi - model.spec.factor_corr)) <= 0.01)
    yield ok, f"population recovery: {solution.n_factors} factors in {time.perf_counter() - t0:.1f} s"


def cmd_selftest() -> int:
    failed = 0
    for ok, text in _selftest_checks():
        print(f"{'PASS' if ok else 'FAIL'}  {text}")
        failed += not ok
    return EXIT_SELFTEST if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scfa", description="Signal cancellation factor analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="analyse a data or correlation CSV")
    run.add_argument("path", help="CSV of raw data, or of a correlation/covariance matrix with --n")
    run.add_argument("--n", type=int, help="sample size; marks the input as a correlation matrix")
    run.add_argument("--alpha", type=float, default=0.05)
    run.add_argument("--se-mode", choices=("model-fixed", "paired"), default="model-fixed")
    run.add_argument("--seed", type=int, help="accepted for symmetry; the analysis is deterministic")
    run.add_argument("--format", choices=("text", "json"), default="text")
    run.add_argument("--dendrogram", choices=("none", "ascii", "dot"), default="none")
    run.add_argument("--out", help="write the report here instead of stdout")

    sim = sub.add_parser("simulate", help="sample data from a factor structure")
    sim.add_argument("spec", nargs="?", default="builtin",
                     help="JSON structure file, or 'builtin' for the challenge structure")
    sim.add_argument("--n", type=int, default=2000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output CSV path")

    sub.add_parser("selftest", help="check the built-in reference values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s: %(message)s")
    if os.environ.get("SCFA_THREADS") is not None:
        try:
            int(os.environ["SCFA_THREADS"])
        except ValueError:
            print("error: SCFA_THREADS must be an integer", file=sys.stderr)
            return EXIT_INPUT
    if args.command == "run":
        try:
            cfg = RunConfig(
                input_kind="corr_csv" if args.n is not None else "data_csv",
                n_override=args.n,
                alpha=args.alpha,
                residual_se_mode=args.se_mode.replace("-", "_"),
                seed=args.seed,
                output_format=args.format,
                dendrogram_format=args.dendrogram,
            )
        except SCFAError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        return cmd_run(cfg, args.path, args.out)
    if args.command == "simulate":
        return cmd_simulate(args.spec, args.n, args.seed, args.out)
    return cmd_selftest()


if __name__ == "__main__":
    sys.exit(main())
