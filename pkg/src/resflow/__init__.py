"""resflow: forward and inverse modeling toolkit for single-phase 3D
subsurface flow in stochastic permeability fields.

Building blocks: an implicit finite-difference simulator on gravity-adjusted
potential, spectral (modal) Gaussian random-field generation, Peaceman well
coupling, a physics-residual/loss evaluator sharing the simulator's exact
discretization, Monte Carlo ensemble statistics, particle-swarm history
matching, and a reproducible dataset-bundle format with a CLI on top.
"""

from .core_model import (UNITS, FormationProps, Grid3D, ScalarField3D,
                         UnitRegistry, init_hydrostatic,
                         potential_from_pressure, pressure_from_potential)
from .discretize import StencilOperator, build_operator, transmissibility
from .metrics import MetricReport, compare, per_field_reports, r2_score, relative_l2
from .randfield import (CovarianceSpec, KleBasis, KleSample, build_basis,
                        draw_samples, energy_fraction, sample_field,
                        truncated_pointwise_variance)
from .residual_loss import (DirichletCells, LossWeights, NeumannFace,
                            ResidualReport, bc_loss, data_loss,
                            evaluate_sequences, hard_ic_transform,
                            outer_noflow_faces, pde_residual,
                            report_for_solution, residual_scale, total_loss)
from .simulator import (LinearSolver, Scenario, Solution, SolverError,
                        SolverOptions, assemble_step, run, solve_linear)
from .uq import EnsembleStats, StreamingMoments, merge_stats, run_ensemble
from .pso import (FitnessSpec, InversionProblem, InversionResult, KnownStats,
                  Particle, PsoParams, SwarmState, UnknownStats, fitness_value,
                  invert, minimize, pso_step, synthetic_observations)
from .wells import (ConstantBHP, ConstantRate, WellSolution, WellSpec,
                    allocate_rate, bhp_potential, drainage_radius,
                    perf_well_indices, report_bhp, well_image, well_index)
from .cli_io import (Bundle, ConfigError, ScenarioConfig, dumps_config,
                     export_parity_cases, export_solution,
                     export_training_set, load_config, loads_config,
                     read_bundle, write_bundle)

__version__ = "0.1.0"
