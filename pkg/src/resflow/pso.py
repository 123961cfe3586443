"""Particle swarm optimization over stochastic-field coefficients (and
optionally covariance hyperparameters) to invert permeability from well
observations.

The swarm is synchronous: all fitness evaluations of a generation may run
concurrently, then positions, personal bests, and the global best update at a
serial barrier. Every particle carries its own RNG stream derived from the
master seed, so trajectories are identical regardless of worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core_model import UNITS, ScalarField3D
from .randfield import CovarianceSpec, KleSample, build_basis, sample_field
from .simulator import Scenario, SolverOptions, run as run_forward
from .wells import ConstantBHP

__all__ = [
    "PsoParams", "Particle", "SwarmState", "FitnessSpec", "KnownStats",
    "UnknownStats", "InversionProblem", "InversionResult", "init_swarm",
    "pso_step", "minimize", "fitness_value", "perf_cells",
    "synthetic_observations", "invert",
]


@dataclass(frozen=True)
class PsoParams:
    """Swarm hyperparameters. Bounds may be scalars or per-dimension arrays;
    velocities and positions are clamped (not reflected) at their bounds."""

    omega: float = 0.9
    c1: float = 2.0
    c2: float = 2.0
    maxgen: int = 50
    sizepop: int = 20
    vmax: float | np.ndarray = 1.0
    vmin: float | np.ndarray = -1.0
    xmax: float | np.ndarray = 4.0
    xmin: float | np.ndarray = -4.0
    seed: int = 0

    def __post_init__(self):
        if self.maxgen < 1:
            raise ValueError("maxgen must be at least 1")
        if self.sizepop < 2:
            raise ValueError("sizepop must be at least 2")
        if min(self.omega, self.c1, self.c2) < 0:
            raise ValueError("omega, c1, c2 must be non-negative")
        if not (np.all(np.less(self.vmin, self.vmax))
                and np.all(np.less(self.xmin, self.xmax))):
            raise ValueError("need vmin < vmax and xmin < xmax")

    def resolve_bounds(self, dim: int):
        """(xmin, xmax, vmin, vmax) broadcast to per-dimension arrays."""
        return tuple(
            np.broadcast_to(np.asarray(b, dtype=float), (dim,)).copy()
            for b in (self.xmin, self.xmax, self.vmin, self.vmax))


@dataclass
class Particle:
    """One swarm member: position, velocity, personal best, and a private
    RNG stream."""

    x: np.ndarray
    v: np.ndarray
    pbest_x: np.ndarray
    pbest_f: float
    rng: np.random.Generator = field(repr=False)


@dataclass
class SwarmState:
    particles: list[Particle]
    gbest_x: np.ndarray
    gbest_f: float


def _evaluate(fitness_fn, positions, workers: int) -> list[float]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return [float(f) for f in pool.map(fitness_fn, positions)]
    return [float(fitness_fn(x)) for x in positions]


def init_swarm(fitness_fn, dim: int, params: PsoParams,
               workers: int = 1) -> SwarmState:
    """Uniform random initial positions within bounds, zero velocities,
    personal bests at the initial positions."""
    xmin, xmax, _, _ = params.resolve_bounds(dim)
    streams = np.random.SeedSequence(params.seed).spawn(params.sizepop)
    particles = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        x = xmin + (xmax - xmin) * rng.random(dim)
        particles.append(Particle(x=x, v=np.zeros(dim), pbest_x=x.copy(),
                                  pbest_f=np.inf, rng=rng))
    fitnesses = _evaluate(fitness_fn, [p.x for p in particles], workers)
    for p, f in zip(particles, fitnesses):
        p.pbest_f = f
    best = int(np.argmin(fitnesses))
    return SwarmState(particles=particles,
                      gbest_x=particles[best].x.copy(),
                      gbest_f=fitnesses[best])


def pso_step(state: SwarmState, params: PsoParams, fitness_fn,
             workers: int = 1) -> SwarmState:
    """One synchronous generation: move every particle, evaluate, then update
    personal and global bests by strict improvement (ties keep incumbents)."""
    dim = state.gbest_x.size
    xmin, xmax, vmin, vmax = params.resolve_bounds(dim)
    for p in state.particles:
        r1 = p.rng.random(dim)
        r2 = p.rng.random(dim)
        v = (params.omega * p.v + params.c1 * r1 * (p.pbest_x - p.x)
             + params.c2 * r2 * (state.gbest_x - p.x))
        np.clip(v, vmin, vmax, out=v)
        x = p.x + v
        np.clip(x, xmin, xmax, out=x)
        p.x, p.v = x, v
    fitnesses = _evaluate(fitness_fn, [p.x for p in state.particles], workers)
    for p, f in zip(state.particles, fitnesses):
        if f < p.pbest_f:
            p.pbest_f = f
            p.pbest_x = p.x.copy()
    for p in state.particles:
        if p.pbest_f < state.gbest_f:
            state.gbest_f = p.pbest_f
            state.gbest_x = p.pbest_x.copy()
    return state


def minimize(fitness_fn, dim: int, params: PsoParams, workers: int = 1,
             callback=None) -> tuple[np.ndarray, float, np.ndarray]:
    """Run ``params.maxgen`` generations; returns (best position, best
    fitness, per-generation best-fitness trace). The trace starts at the
    initial population's best and is monotone non-increasing."""
    state = init_swarm(fitness_fn, dim, params, workers)
    trace = [state.gbest_f]
    for gen in range(params.maxgen):
        state = pso_step(state, params, fitness_fn, workers)
        trace.append(state.gbest_f)
        if callback is not None:
            callback(gen, state)
    return state.gbest_x.copy(), state.gbest_f, np.asarray(trace)


@dataclass(frozen=True)
class FitnessSpec:
    """Observation sets and weights for the history-matching objective.

    References are in reporting units: rates in m^3/day (production
    positive), permeability in ln-mD at observed cells, BHP in bar. Any
    reference left as None drops that term. The value is

        lambda_rate/(N_t*N_well) * sum (q - q_ref)^2
      + lambda_perm/(N_well*N_k) * sum (lnk - lnk_ref)^2
      + lambda_bhp/(N_t*N_well)  * sum (BHP - BHP_ref)^2
    """

    rate_ref: np.ndarray | None = None   # (n_well, n_t)
    perm_ref: np.ndarray | None = None   # (n_well, n_k)
    bhp_ref: np.ndarray | None = None    # (n_well, n_t)
    lambda_rate: float = 1.0
    lambda_perm: float = 1000.0
    lambda_bhp: float = 10.0

    def __post_init__(self):
        if min(self.lambda_rate, self.lambda_perm, self.lambda_bhp) < 0:
            raise ValueError("fitness weights must be non-negative")
        for name in ("rate_ref", "perm_ref", "bhp_ref"):
            v = getattr(self, name)
            if v is not None:
                arr = np.asarray(v, dtype=float)
                if arr.ndim != 2:
                    raise ValueError(f"{name} must be 2-D (wells x entries)")
                object.__setattr__(self, name, arr)
        wells = {v.shape[0] for v in (self.rate_ref, self.perm_ref,
                                      self.bhp_ref) if v is not None}
        if len(wells) > 1:
            raise ValueError("observation sets disagree on well count")


def fitness_value(spec: FitnessSpec, rate_pred=None, perm_pred=None,
                  bhp_pred=None) -> float:
    """Evaluate the objective for predictions matching the reference shapes."""
    total = 0.0
    for ref, pred, lam in ((spec.rate_ref, rate_pred, spec.lambda_rate),
                           (spec.perm_ref, perm_pred, spec.lambda_perm),
                           (spec.bhp_ref, bhp_pred, spec.lambda_bhp)):
        if ref is None or lam == 0.0:
            continue
        pred = np.asarray(pred, dtype=float)
        if pred.shape != ref.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match "
                             f"reference shape {ref.shape}")
        diff = pred - ref
        total += lam * float(np.vdot(diff, diff).real) / ref.size
    return total


@dataclass(frozen=True)
class KnownStats:
    """Search over coefficient space only; covariance statistics fixed."""

    n_modes: int = 13


@dataclass(frozen=True)
class UnknownStats:
    """Search over coefficients plus (variance, correlation length); the two
    hyperparameters are appended to the particle position vector."""

    n_modes: int = 13
    variance_bounds: tuple[float, float] = (0.0, 1.0)
    eta_bounds: tuple[float, float] = (130.0, 190.0)   # meters, isotropic


@dataclass(frozen=True)
class InversionProblem:
    """Everything the objective needs: the flow scenario (its perm field is
    replaced per candidate), the covariance model, observations, and the
    window covered by the rate/BHP references."""

    scenario: Scenario
    cov: CovarianceSpec
    spec: FitnessSpec
    n_obs_steps: int
    solver_options: SolverOptions = SolverOptions()

    def __post_init__(self):
        if not 1 <= self.n_obs_steps <= self.scenario.n_steps:
            raise ValueError("n_obs_steps must lie in [1, n_steps]")


@dataclass(frozen=True)
class InversionResult:
    best_x: np.ndarray
    best_fitness: float
    trace: np.ndarray
    lnk_field: ScalarField3D          # reconstructed ln-permeability (ln-mD)
    cov: CovarianceSpec               # covariance of the best candidate


def perf_cells(wells) -> list[tuple[int, int, np.ndarray]]:
    """(i, j, layers) per well — the cells whose permeability is observed."""
    return [(w.i, w.j, w.perf_layers) for w in wells]


def _predictions(solution, lnk_values: np.ndarray, n_obs_steps: int):
    """Predictions in reporting units over the observation window."""
    rate = np.stack([ws.rates[:n_obs_steps] for ws in solution.well_solutions])
    bhp = np.stack([ws.bhp[:n_obs_steps] for ws in solution.well_solutions])
    perm = np.stack([lnk_values[i, j, layers] for i, j, layers
                     in perf_cells(solution.scenario.wells)])
    return (UNITS.rate_from_si(rate), perm, UNITS.pressure_from_si(bhp))


def _candidate_cov(problem: InversionProblem, search, x: np.ndarray):
    """Covariance model and coefficient vector encoded by a particle."""
    if isinstance(search, UnknownStats):
        xi, (variance, eta) = x[:search.n_modes], x[search.n_modes:]
        cov = replace(problem.cov, variance=float(variance),
                      eta_x=float(eta), eta_y=float(eta), eta_z=float(eta))
        return cov, xi
    return problem.cov, x


def make_objective(problem: InversionProblem, search):
    """Callable mapping a particle position to the fitness value. Rebuilds
    the modal basis whenever hyperparameters are part of the search."""
    fixed_basis = build_basis(problem.scenario.grid, problem.cov,
                              search.n_modes)

    def objective(x: np.ndarray) -> float:
        cov, xi = _candidate_cov(problem, search, np.asarray(x, dtype=float))
        if isinstance(search, UnknownStats):
            if cov.variance == 0.0:
                return np.inf   # degenerate candidate: no modal basis exists
            basis = build_basis(problem.scenario.grid, cov, search.n_modes)
        else:
            basis = fixed_basis
        lnk = sample_field(basis, KleSample(xi=xi), cov)
        perm = UNITS.perm_to_si(np.exp(lnk.values))
        solution = run_forward(replace(problem.scenario, perm=perm),
                               problem.solver_options)
        rate, perm_pred, bhp = _predictions(solution, lnk.values,
                                            problem.n_obs_steps)
        return fitness_value(problem.spec, rate_pred=rate,
                             perm_pred=perm_pred, bhp_pred=bhp)

    return objective


def _search_params(problem: InversionProblem, params: PsoParams, search):
    """Per-dimension bounds: coefficient dimensions keep the configured
    bounds; hyperparameter dimensions use their own physical bounds with
    velocity limits set to 1/8 of the range."""
    if not isinstance(search, UnknownStats):
        return params, search.n_modes
    dim = search.n_modes + 2
    xmin, xmax, vmin, vmax = params.resolve_bounds(search.n_modes)
    lows = np.array([search.variance_bounds[0], search.eta_bounds[0]])
    highs = np.array([search.variance_bounds[1], search.eta_bounds[1]])
    vcap = (highs - lows) / 8.0
    return replace(params,
                   xmin=np.concatenate([xmin, lows]),
                   xmax=np.concatenate([xmax, highs]),
                   vmin=np.concatenate([vmin, -vcap]),
                   vmax=np.concatenate([vmax, vcap])), dim


def invert(problem: InversionProblem, params: PsoParams,
           search=KnownStats(), workers: int = 1) -> InversionResult:
    """History-match by PSO; returns the best candidate, the non-increasing
    best-fitness trace, and the reconstructed ln-permeability field."""
    eff_params, dim = _search_params(problem, params, search)
    objective = make_objective(problem, search)
    best_x, best_f, trace = minimize(objective, dim, eff_params, workers)
    cov, xi = _candidate_cov(problem, search, best_x)
    basis = build_basis(problem.scenario.grid, cov, search.n_modes)
    lnk = sample_field(basis, KleSample(xi=xi), cov)
    return InversionResult(best_x=best_x, best_fitness=best_f, trace=trace,
                           lnk_field=lnk, cov=cov)


def synthetic_observations(problem_scenario: Scenario, basis, cov,
                           xi_true: np.ndarray, n_obs_steps: int,
                           noise_frac: float = 0.0, seed: int = 0,
                           solver_options: SolverOptions | None = None,
                           lambda_rate: float = 1.0,
                           lambda_perm: float = 1000.0,
                           lambda_bhp: float = 10.0) -> FitnessSpec:
    """Observations from a known truth: forward-run the true field, record
    rates/BHP over the first ``n_obs_steps`` and ln-permeability at the
    perforated cells, optionally perturbed by multiplicative Gaussian noise
    value*(1 + noise_frac*N(0,1)).

    When every well is BHP-controlled the BHP series carries no information
    (it equals the control), so the BHP term is dropped.
    """
    lnk = sample_field(basis, KleSample(xi=np.asarray(xi_true, float)), cov)
    perm = UNITS.perm_to_si(np.exp(lnk.values))
    truth = run_forward(replace(problem_scenario, perm=perm),
                        solver_options or SolverOptions())
    rate, perm_ref, bhp = _predictions(truth, lnk.values, n_obs_steps)
    if noise_frac > 0:
        rng = np.random.default_rng(seed)
        rate = rate * (1.0 + noise_frac * rng.standard_normal(rate.shape))
        bhp = bhp * (1.0 + noise_frac * rng.standard_normal(bhp.shape))
    all_bhp_controlled = all(isinstance(w.control, ConstantBHP)
                             for w in problem_scenario.wells)
    return FitnessSpec(rate_ref=rate, perm_ref=perm_ref,
                       bhp_ref=None if all_bhp_controlled else bhp,
                       lambda_rate=lambda_rate, lambda_perm=lambda_perm,
                       lambda_bhp=0.0 if all_bhp_controlled else lambda_bhp)
