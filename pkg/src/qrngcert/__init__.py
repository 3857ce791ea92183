"""Min-entropy certification of homodyne random number generators probed with coherent states."""
from .certify import (
    CertificationReport,
    amplitude_audit,
    certify_coherent,
    certify_finite,
    certify_tomography,
    evaluate_certificate,
    finite_size_bound,
    hoeffding_deviation,
    min_entropy,
)
from .fock import coherent_state, povm_element, povm_elements
from .problems import DualCertificate, build_dual, build_finite_dual, build_primal, build_tomo_dual, build_tomo_primal
from .quadrature import (
    BinningScheme,
    NoiseModel,
    OutcomeDistribution,
    ProbeEnsemble,
    equal_probability_edges,
    fixed_width_bins,
    gamma_map,
    model_distribution,
    outcome_probability,
)
from .solver import SolverOptions, check_feasibility, solve

__version__ = "0.1.0"
