"""Functional connectivity from ROI series.

Ledoit-Wolf shrinkage toward a scaled identity, conversion to correlation,
strongest-edge thresholding and group comparisons.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArtifactIOError, ValidationError


@dataclass
class FcMatrix:
    values: np.ndarray
    tau: float | None = None
    kept_edges: int | None = None

    @property
    def D(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    weight: float


def ledoit_wolf_cov(series, biased: bool = True) -> tuple[np.ndarray, float]:
    """Shrunk covariance of a (D, T) matrix whose columns are observations.

    Returns ``(1 - a) S + a (tr(S)/D) I`` and the shrinkage ``a`` in [0, 1].
    S is mean-centred with divisor T (or T - 1 when ``biased=False``).
    """
    X = np.asarray(series, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("series must be a (D, T) matrix")
    D, T = X.shape
    if T < 2:
        raise ValidationError("Ledoit-Wolf needs T >= 2 observations")
    Z = X - X.mean(axis=1, keepdims=True)
    S = Z @ Z.T / T
    mu = np.trace(S) / D
    target = mu * np.eye(D)
    delta2 = np.sum((S - target) ** 2) / D
    # beta2 = (1/T^2) sum_t ||z_t z_t' - S||^2 / D, expanded to avoid T outer products.
    sq = np.sum(Z * Z, axis=0)
    beta2 = (np.sum(sq * sq) / T - np.sum(S * S)) / (T * D)
    if delta2 <= 0:
        alpha = 0.0
    else:
        alpha = float(min(max(beta2, 0.0), delta2) / delta2)
    alpha = min(max(alpha, 0.0), 1.0)
    if not biased:
        S = Z @ Z.T / (T - 1)
        target = (np.trace(S) / D) * np.eye(D)
    cov = (1.0 - alpha) * S + alpha * target
    return 0.5 * (cov + cov.T), alpha


def cov_to_corr(cov) -> FcMatrix:
    cov = np.asarray(cov, dtype=np.float64)
    d = np.diag(cov)
    if np.any(d <= 0):
        raise ValidationError("covariance diagonal must be positive")
    s = np.sqrt(d)
    corr = cov / np.outer(s, s)
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return FcMatrix(corr)


def threshold_strongest(fc: FcMatrix, tau: float) -> FcMatrix:
    """Keep the ceil(tau * D(D-1)/2) largest-|value| upper-triangle edges.

    Ties are broken toward the lexicographically smaller (i, j).
    """
    if not 0.0 < tau <= 1.0:
        raise ValidationError("tau must lie in (0, 1]")
    v = np.array(fc.values, dtype=np.float64)
    D = v.shape[0]
    iu, ju = np.triu_indices(D, k=1)
    count = len(iu)
    keep = int(math.ceil(tau * count - 1e-12))
    # triu_indices is already lexicographic, so a stable sort on -|w| breaks ties by (i, j).
    order = np.argsort(-np.abs(v[iu, ju]), kind="stable")
    mask = np.zeros(count, dtype=bool)
    mask[order[:keep]] = True
    out = np.zeros_like(v)
    np.fill_diagonal(out, np.diag(v))
    out[iu[mask], ju[mask]] = v[iu[mask], ju[mask]]
    out[ju[mask], iu[mask]] = v[iu[mask], ju[mask]]
    return FcMatrix(out, tau, keep)


def subject_fc(series, tau: float | None = 0.4) -> FcMatrix:
    cov, _ = ledoit_wolf_cov(series)
    fc = cov_to_corr(cov)
    return threshold_strongest(fc, tau) if tau is not None else fc


def group_average(fcs: Sequence[FcMatrix], threshold: float = 0.6) -> tuple[FcMatrix, np.ndarray]:
    if not fcs:
        raise ValidationError("group_average needs at least one matrix")
    D = fcs[0].D
    if any(f.D != D for f in fcs):
        raise ValidationError("matrices differ in size")
    # Fixed-order summation so the result does not depend on thread scheduling.
    total = np.zeros((D, D))
    for f in fcs:
        total += f.values
    mean = total / len(fcs)
    mask = (np.abs(mean) >= threshold).astype(np.uint8)
    np.fill_diagonal(mask, 0)
    return FcMatrix(mean), mask


def fc_difference_edges(group_a: FcMatrix, group_b: FcMatrix, top_n: int,
                        min_abs_diff: float | None = None) -> list[Edge]:
    """Top edges by |a - b|, with signed difference a - b as weight.

    Edges with |a - b| <= ``min_abs_diff`` are dropped when it is given.
    """
    a = np.asarray(getattr(group_a, "values", group_a), dtype=np.float64)
    b = np.asarray(getattr(group_b, "values", group_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("group matrices differ in size")
    iu, ju = np.triu_indices(a.shape[0], k=1)
    diff = a[iu, ju] - b[iu, ju]
    order = np.argsort(-np.abs(diff), kind="stable")
    edges = []
    for idx in order[:max(top_n, 0)]:
        if min_abs_diff is not None and abs(diff[idx]) <= min_abs_diff:
            break
        edges.append(Edge(int(iu[idx]), int(ju[idx]), float(diff[idx])))
    return edges


def write_edges(path, edges: Sequence[Edge], roi_names: Sequence[str] | None = None) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            header = ["roi_i", "roi_j", "weight"]
            if roi_names is not None:
                header += ["name_i", "name_j"]
            w.writerow(header)
            for e in edges:
                row = [e.i, e.j, f"{e.weight:.9g}"]
                if roi_names is not None:
                    row += [roi_names[e.i], roi_names[e.j]]
                w.writerow(row)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_roi_names(path) -> list[str]:
    try:
        return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
