"""Construction and verification of contraction metrics for periodic orbits."""

__version__ = "0.1.0"

from .errors import (CmtkError, ConfigError, EquilibriumError, IntegrationError, EscapeError,
                     NoOrbitError, NoDecayError, MetricDegenerateError, HypothesisViolated,
                     CertificationFailed, EmptyRegionError, PerturbationTooLarge)
from .systems import (SystemDef, FlowResult, TransitionMatrix, CompactSetStats, circle_system,
                      vdp_system, polynomial_system, load_polynomial_system, get_system, eval_rhs,
                      flow, transition_matrix, compact_set_stats)
from .projection import (Projector, MetricField, AnalyticMetric, projection, perp_basis, apply_L,
                         rank_one_metric, constant_metric, orbital_derivative)
from .metric import (QuadratureConfig, BField, IntegralMetric, MetricSample, build_metric, rhs_C,
                     tail_bound)
from .orbit import PeriodicOrbitRecord, find_periodic_orbit, floquet_exponents
from .verify import (ContractionSample, CertificationReport, DecayFit, SyncExperiment,
                     contraction_measure, pde_residual, certify_region, decay_fit, psi_decay_check,
                     conservation_checks, uniqueness_convergence, gronwall_check,
                     sync_contraction_experiment)
