"""Monte Carlo uncertainty quantification over stochastic permeability
ensembles: pointwise pressure statistics per snapshot and per-well rate/BHP
statistics per step.

Moments are accumulated in a single streaming pass (memory stays O(grid)
regardless of ensemble size) using the numerically stable update, and two
partial accumulations combine exactly via the parallel-moments formula, so
ensembles can be split across workers and merged in any order. Variances use
the population convention (divisor N).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core_model import UNITS
from .randfield import CovarianceSpec, KleBasis, KleSample, draw_samples, sample_field

__all__ = ["StreamingMoments", "EnsembleStats", "merge_stats", "run_ensemble"]


@dataclass
class StreamingMoments:
    """Single-pass mean and centered-sum-of-squares accumulator."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, shape) -> "StreamingMoments":
        return cls(n=0, mean=np.zeros(shape), m2=np.zeros(shape))

    def push(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != self.mean.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {self.mean.shape}")
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "StreamingMoments") -> "StreamingMoments":
        if other.mean.shape != self.mean.shape:
            raise ValueError(
                f"shape mismatch: {other.mean.shape} vs {self.mean.shape}")
        if self.n == 0:
            return StreamingMoments(other.n, other.mean.copy(), other.m2.copy())
        if other.n == 0:
            return StreamingMoments(self.n, self.mean.copy(), self.m2.copy())
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return StreamingMoments(n=n, mean=mean, m2=m2)

    @property
    def variance(self) -> np.ndarray:
        """Population variance (divisor N); zeros for an empty accumulator."""
        if self.n == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.n


@dataclass(frozen=True)
class EnsembleStats:
    """Ensemble statistics: pressure mean/variance per (snapshot, cell) and
    rate/BHP mean/variance per (well, step); population variances."""

    n: int
    mean_pressure: np.ndarray    # (n_steps + 1, nx, ny, nz), Pa
    var_pressure: np.ndarray
    mean_rate: np.ndarray        # (n_wells, n_steps), m^3/s
    var_rate: np.ndarray
    mean_bhp: np.ndarray         # (n_wells, n_steps), Pa
    var_bhp: np.ndarray

    def __post_init__(self):
        for name in ("var_pressure", "var_rate", "var_bhp"):
            v = getattr(self, name)
            if v.size and v.min() < 0:
                raise ValueError(f"{name} has negative entries")

    @classmethod
    def _from_moments(cls, pressure: StreamingMoments, rate: StreamingMoments,
                      bhp: StreamingMoments) -> "EnsembleStats":
        return cls(n=pressure.n,
                   mean_pressure=pressure.mean, var_pressure=pressure.variance,
                   mean_rate=rate.mean, var_rate=rate.variance,
                   mean_bhp=bhp.mean, var_bhp=bhp.variance)

    def _moments(self) -> tuple[StreamingMoments, StreamingMoments,
                                StreamingMoments]:
        return (
            StreamingMoments(self.n, self.mean_pressure.copy(),
                             self.var_pressure * self.n),
            StreamingMoments(self.n, self.mean_rate.copy(),
                             self.var_rate * self.n),
            StreamingMoments(self.n, self.mean_bhp.copy(),
                             self.var_bhp * self.n),
        )


def merge_stats(a: EnsembleStats, b: EnsembleStats) -> EnsembleStats:
    """Exact pooled statistics of two disjoint ensembles (commutative and
    associative up to roundoff)."""
    merged = [ma.merge(mb) for ma, mb in zip(a._moments(), b._moments())]
    return EnsembleStats._from_moments(*merged)


def _solution_payload(solution):
    rates = (np.stack([ws.rates for ws in solution.well_solutions])
             if solution.well_solutions
             else np.zeros((0, solution.scenario.n_steps)))
    bhps = (np.stack([ws.bhp for ws in solution.well_solutions])
            if solution.well_solutions
            else np.zeros((0, solution.scenario.n_steps)))
    return solution.pressures, rates, bhps


def run_ensemble(basis: KleBasis, cov: CovarianceSpec, scenario_template,
                 n_real: int, seed: int, forward=None, workers: int = 1,
                 samples: list[KleSample] | None = None,
                 skip_failures: bool = False) -> EnsembleStats:
    """Draw ``n_real`` permeability realizations, run the forward model on
    each, and stream the ensemble moments.

    The realization set is fixed by (seed, n_real) — it is drawn up front —
    and accumulation follows realization order, so the result is independent
    of ``workers``. ``forward`` maps (perm_field_m2, scenario) -> Solution and
    defaults to the built-in simulator; realization failures raise (naming the
    realization) unless ``skip_failures`` is set.
    """
    if n_real < 2:
        raise ValueError("n_real must be at least 2")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if forward is None:
        from .simulator import run as forward_run

        def forward(perm, scenario):
            return forward_run(replace(scenario, perm=perm))

    if samples is None:
        samples = draw_samples(seed, n_real, basis.n_modes)
    elif len(samples) != n_real:
        raise ValueError(f"expected {n_real} samples, got {len(samples)}")

    def realize(idx_sample):
        idx, s = idx_sample
        lnk = sample_field(basis, s, cov)
        perm = UNITS.perm_to_si(np.exp(lnk.values))
        return _solution_payload(forward(perm, scenario_template))

    pressure_acc = rate_acc = bhp_acc = None
    n_failed = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for idx, outcome in enumerate(
                pool.map(_guarded(realize, skip_failures),
                         enumerate(samples))):
            if outcome is None:
                n_failed += 1
                continue
            pressures, rates, bhps = outcome
            if pressure_acc is None:
                pressure_acc = StreamingMoments.empty(pressures.shape)
                rate_acc = StreamingMoments.empty(rates.shape)
                bhp_acc = StreamingMoments.empty(bhps.shape)
            pressure_acc.push(pressures)
            rate_acc.push(rates)
            bhp_acc.push(bhps)
    if pressure_acc is None:
        raise RuntimeError(f"all {n_real} realizations failed")
    return EnsembleStats._from_moments(pressure_acc, rate_acc, bhp_acc)


def _guarded(fn, skip_failures: bool):
    def wrapped(idx_sample):
        idx, _ = idx_sample
        try:
            return fn(idx_sample)
        except Exception as exc:
            if skip_failures:
                return None
            raise RuntimeError(f"realization {idx} failed: {exc}") from exc
    return wrapped
