"""Monte Carlo and quadrature tooling for BSDEs stopped at domain exits.

The package simulates forward Euler-Maruyama chains with random exit
times, solves the associated discrete backward equations by implicit
fixed-point iteration, and verifies the contraction, exponential-moment,
and convergence-rate estimates that justify the scheme.
"""

__version__ = "1.0.0"

from ._accel import HAS_NUMBA, numba_enabled, resolve_backend
from .backward import (
    ErrorReport,
    PathSequence,
    PicardDiagnostics,
    TruncationHorizon,
    ValueSlices,
    backward_induction,
    error_functionals,
    implicit_node_solve,
    load_value_slices,
    majorant_check,
    picard_operator_apply,
    solve_picard,
    truncation_horizon,
    weighted_seq_norm,
    zero_sequence,
)
from .checks import (
    EmSlopeReport,
    FiniteChain,
    GronwallReport,
    TwoStoppingReport,
    chain_from_text,
    discrete_gronwall_verify,
    em_strong_error_slope,
    kolmogorov_ratio_fit,
    random_hypothesis_chain,
    two_stopping_gap_check,
)
from .exceptions import (
    CatalogError,
    ConfigurationError,
    DomainError,
    EstimationError,
    ExitBsdeError,
    FitError,
    InvalidInput,
    NonContraction,
    ResolutionError,
    StageFailure,
    UnsupportedConfiguration,
)
from .forward import (
    CHUNK_STEPS,
    ExitGapStats,
    FineBundle,
    PathBundle,
    coupled_fine_reference,
    detect_cutoff_exit,
    detect_discrete_exit,
    dump_bundle,
    exit_gap_moments,
    export_exit_times,
    load_bundle,
    simulate_paths,
)
from .harness import (
    DEFAULT_WINDOWS,
    STAGES,
    ExperimentConfig,
    RateFit,
    RateTable,
    auto_horizon,
    build_rate_table,
    fit_rate,
    load_config,
    parse_config,
    run_experiment,
    verify_run_dir,
)
from .moments import (
    ExpMomentScan,
    FreidlinReport,
    ball_cutoff_threshold,
    exp_moment_scan,
    freidlin_check,
    gaussian_tail_ok,
    one_d_threshold,
    power_from_exp,
)
from .problems import (
    BenchmarkProblem,
    DomainSpec,
    GridSpec,
    MomentBudget,
    ProblemSpec,
    StepsizeVerdict,
    TaperedConstantCoeffs,
    analytic_value,
    catalog_benchmark,
    lipschitz_warnings,
    make_tapered_problem,
    pde_residual,
    probe_lipschitz,
    sample_interior,
    taper_factor,
    validate_moment_budget,
    validate_stepsize,
)
from .rng import derive_seed, path_generator, path_generators

__all__ = [name for name in dir() if not name.startswith("_")]
