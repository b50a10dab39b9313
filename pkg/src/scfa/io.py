"""
File formats: CSV matrices, JSON structure specs and JSON solution documents.

CSV files are comma-separated UTF-8 with an optional header row, detected
as a first row that does not parse as numbers.  Solution documents use
zero-based variable indices.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .clustering import ClusterSet, Dendrogram, Merge
from .datagen import FactorStructureSpec
from .exceptions import SCFAError
from .solution import Explanation, FactorSolution, ResidualReport, ResidualRow
from .stat_core import CorrelationInput, correlation_from_covariance, correlation_from_data

SYMMETRY_READ_TOL = 1e-6


class InputFormatError(SCFAError):
    """A file could not be parsed; the message carries row/column context."""


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv_matrix(path) -> tuple[np.ndarray, tuple[str, ...] | None]:
    """Numeric matrix and header labels (``None`` without a header row)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    if not rows:
        raise InputFormatError(f"{path}: file is empty")
    header = None
    if not all(_is_number(cell.strip()) for cell in rows[0]):
        header = tuple(cell.strip() for cell in rows[0])
        rows = rows[1:]
    if not rows:
        raise InputFormatError(f"{path}: no numeric rows")
    width = len(rows[0])
    if header is not None and len(header) != width:
        raise InputFormatError(f"{path}: header has {len(header)} fields, data rows have {width}")
    out = np.empty((len(rows), width))
    first = 2 if header is not None else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise InputFormatError(f"{path}: row {i + first} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise InputFormatError(
                    f"{path}: row {i + first}, column {j + 1}: not a number: {cell!r}"
                ) from None
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise InputFormatError(f"{path}: row {i + first}, column {j + 1}: non-finite value")
    return out, header


def load_data_csv(path) -> CorrelationInput:
    data, header = read_csv_matrix(path)
    return correlation_from_data(data, labels=header)


def load_correlation_csv(path, n: int) -> CorrelationInput:
    """
    Square correlation or covariance matrix.  Asymmetry up to 1e-6 is
    averaged away; a non-unit diagonal is treated as a covariance matrix.
    """
    m, header = read_csv_matrix(path)
    if m.shape[0] != m.shape[1]:
        raise InputFormatError(f"{path}: matrix is {m.shape[0]}x{m.shape[1]}, not square")
    asym = np.max(np.abs(m - m.T))
    if asym > SYMMETRY_READ_TOL:
        i, j = np.unravel_index(np.argmax(np.abs(m - m.T)), m.shape)
        raise InputFormatError(
            f"{path}: not symmetric at row {i + 1}, column {j + 1} (difference {asym:.3g})"
        )
    m = 0.5 * (m + m.T)
    if np.max(np.abs(np.diag(m) - 1.0)) > 1e-12:
        return correlation_from_covariance(m, n, labels=header)
    return CorrelationInput(m, n, labels=header)


def load_structure_spec(path) -> FactorStructureSpec:
    """JSON document with ``loadings`` (p x m) and ``factor_correlations`` (m x m)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or "loadings" not in doc:
        raise InputFormatError(f"{path}: expected an object with a 'loadings' key")
    lam = np.array(doc["loadings"], dtype=float)
    m = lam.shape[1] if lam.ndim == 2 else 0
    phi = np.array(doc.get("factor_correlations", np.eye(m).tolist()), dtype=float)
    return FactorStructureSpec(lam, phi)


def dump_structure_spec(spec: FactorStructureSpec, path) -> None:
    doc = {"loadings": spec.loadings.tolist(), "factor_correlations": spec.factor_corr.tolist()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _num(x: float):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _unnum(x) -> float:
    return float(x)


def _merge_to_dict(m: Merge) -> dict:
    return {"left": list(m.left), "right": list(m.right), "chi2": _num(m.chi2),
            "allowed": m.allowed, "critical": _num(m.critical)}


def _merge_from_dict(d: dict) -> Merge:
    return Merge(tuple(d["left"]), tuple(d["right"]), _unnum(d["chi2"]), bool(d["allowed"]),
                 _unnum(d["critical"]))


def _dendrogram_to_dict(dend: Dendrogram | None):
    if dend is None:
        return None
    return {"variables": list(dend.variables),
            "threshold_height": None if dend.threshold_height is None else _num(dend.threshold_height),
            "merges": [_merge_to_dict(m) for m in dend.merges]}


def _dendrogram_from_dict(d) -> Dendrogram | None:
    if d is None:
        return None
    th = d["threshold_height"]
    return Dendrogram(tuple(_merge_from_dict(m) for m in d["merges"]), tuple(d["variables"]),
                      None if th is None else _unnum(th))


def solution_to_dict(solution: FactorSolution, report: ResidualReport | None = None) -> dict:
    """Stable JSON-ready document for a solution and, optionally, its residual report."""
    cl = solution.clusters
    doc = {
        "n": solution.n,
        "labels": list(solution.labels),
        "pattern": solution.pattern.tolist(),
        "phi": solution.phi.tolist(),
        "factors": [list(f) for f in solution.factors],
        "orphans": list(solution.orphans),
        "multifactorial": list(solution.multifactorial),
        "unexplained_after": list(solution.unexplained_after),
        "message": solution.message(),
        "clusters": {
            "factors": [list(f) for f in cl.factors],
            "unexplained": list(cl.unexplained),
            "coplanar_rejected": list(cl.coplanar_rejected),
        },
        "dendrogram": _dendrogram_to_dict(solution.dendrogram),
        "explanations": [
            {"target": e.target, "cardinality": e.cardinality, "n_combinations": e.n_combinations,
             "successes": [{"representatives": list(reps), "chi2": _num(chi2)} for reps, chi2 in e.successes],
             "loadings": {str(k): v for k, v in e.loadings.items()}}
            for e in solution.explanations
        ],
    }
    if report is not None:
        doc["residuals"] = {
            "se_mode": report.se_mode,
            "z_crit_var": report.z_crit_var,
            "z_crit_global": report.z_crit_global,
            "rows": [[r.i, r.j, r.r_obs, r.r_sol, r.z] for r in report.rows],
            "listed": len(report.listed),
        }
    return doc


def solution_from_dict(doc: dict) -> tuple[FactorSolution, ResidualReport | None]:
    """Inverse of :func:`solution_to_dict`."""
    dend = _dendrogram_from_dict(doc["dendrogram"])
    cl = doc["clusters"]
    clusters = ClusterSet(tuple(tuple(f) for f in cl["factors"]), tuple(cl["unexplained"]),
                          tuple(cl["coplanar_rejected"]), dend)
    pattern = np.array(doc["pattern"], dtype=float).reshape(len(doc["labels"]), -1)
    phi = np.array(doc["phi"], dtype=float).reshape(pattern.shape[1], pattern.shape[1])
    pattern.setflags(write=False)
    phi.setflags(write=False)
    explanations = tuple(
        Explanation(e["target"], e["cardinality"], e["n_combinations"],
                    tuple((tuple(s["representatives"]), _unnum(s["chi2"])) for s in e["successes"]),
                    {int(k): v for k, v in e["loadings"].items()})
        for e in doc["explanations"]
    )
    solution = FactorSolution(
        pattern=pattern, phi=phi,
        factors=tuple(tuple(f) for f in doc["factors"]),
        orphans=tuple(doc["orphans"]),
        multifactorial=tuple(doc["multifactorial"]),
        unexplained_after=tuple(doc["unexplained_after"]),
        clusters=clusters, dendrogram=dend, n=doc["n"], labels=tuple(doc["labels"]),
        explanations=explanations,
    )
    report = None
    if "residuals" in doc:
        res = doc["residuals"]
        rows = tuple(ResidualRow(int(i), int(j), r_obs, r_sol, z) for i, j, r_obs, r_sol, z in res["rows"])
        report = ResidualReport(rows, res["z_crit_var"], res["z_crit_global"], rows[:res["listed"]],
                                res["se_mode"])
    return solution, report


def dumps_solution(solution: FactorSolution, report: ResidualReport | None = None) -> str:
    return json.dumps(solution_to_dict(solution, report), indent=2, sort_keys=True) + "\n"


def loads_solution(text: str) -> tuple[FactorSolution, ResidualReport | None]:
    return solution_from_dict(json.loads(text))


def write_csv_matrix(path, matrix: np.ndarray, header=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in np.asarray(matrix):
            w.writerow([repr(float(x)) for x in row])
