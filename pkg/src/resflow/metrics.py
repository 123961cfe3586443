"""Accuracy metrics used throughout evaluation: relative L2 error and the
coefficient of determination (R^2)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MetricReport", "relative_l2", "r2_score", "compare",
           "per_field_reports"]


@dataclass(frozen=True)
class MetricReport:
    relative_l2: float
    r2: float
    n_points: int


def _paired(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def relative_l2(pred, ref) -> float:
    """||pred - ref||_2 / ||ref||_2."""
    pred, ref = _paired(pred, ref)
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(pred - ref)) / denom


def r2_score(pred, ref) -> float:
    """1 - sum((pred - ref)^2) / sum((ref - mean(ref))^2)."""
    pred, ref = _paired(pred, ref)
    centered = ref - ref.mean()
    ss_tot = float(np.vdot(centered, centered).real)
    if ss_tot == 0.0:
        raise ValueError("reference is constant; R^2 undefined")
    diff = pred - ref
    return 1.0 - float(np.vdot(diff, diff).real) / ss_tot


def compare(pred, ref) -> MetricReport:
    """Both metrics over a flattened (pooled) pair of arrays."""
    pred, ref = _paired(pred, ref)
    return MetricReport(relative_l2=relative_l2(pred, ref),
                        r2=r2_score(pred, ref), n_points=ref.size)


def per_field_reports(pred, ref) -> list[MetricReport]:
    """One report per leading-axis slice — the per-realization granularity
    used for ensemble evaluation (pooled numbers come from :func:`compare`)."""
    pred, ref = _paired(pred, ref)
    if pred.ndim < 2:
        raise ValueError("need a leading realization axis")
    return [compare(p, r) for p, r in zip(pred, ref)]
