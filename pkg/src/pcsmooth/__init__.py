"""Polynomial-chaos smoothing of chaotic dynamics, with sparse Bayesian
regression and adaptive bases.

The package estimates past states of a nonlinear dynamical system from a
later noisy measurement. States are carried as polynomial chaos
expansions; updates are Gauss-Newton iterated Kalman maps acting on
expansion coefficients; regression onto the polynomial bases runs
through a relevance vector machine; long integration windows can switch
to sample-adapted bases.
"""

from .basis_adapt import (
    EmpiricalCdf,
    NatafTransform,
    build_nmap_features,
    fit_cdf,
    kl_check,
    mgs_orthonormalize,
    nataf_apply,
    nataf_fit,
    reexpand_hermite,
)
from .dynsys import (
    IntegrationError,
    IntegratorConfig,
    SystemParams,
    integrate,
    lorenz84,
    lorenz84_rhs,
    propagate_ensemble,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    PriorChain,
    RunSummary,
    basis_study,
    build_prior_chain,
    config_hash,
    jacobian_check,
    load_config,
    run_experiment,
    run_smoother,
    run_sweep,
    synthesize_measurement,
    truth_trajectory,
    write_simulation,
)
from .filtering import (
    AffineForwardMap,
    AffineInverseMap,
    FilterConfig,
    GnmkResult,
    MeasurementModel,
    SmootherProblem,
    SmootherResult,
    SmootherStep,
    bias_correct,
    direct_smooth,
    estimate_forward_map_bayes,
    estimate_forward_map_projection,
    estimate_inverse_map,
    forecast_measurement,
    gmk_update,
    gnmk_iterate,
    posterior_cov_rv,
    ps1_smooth,
    ps2_smooth,
    report_times,
)
from .pce import (
    GaussianDensity,
    HermiteBasis,
    MgsOrthonormalBasis,
    MultiIndexSet,
    NmapMonomialBasis,
    PCExpansion,
    affine_of_expansion,
    combine_expansions,
    dump_pce,
    embed_expansion,
    ensure_psd,
    gaussianize,
    hermite_eval,
    load_pce,
    pce_cov,
    pce_eval,
    pce_mean,
    read_pce,
    sample_germ,
    total_degree_index_set,
    write_pce,
)
from .sparse_bayes import (
    DesignMatrix,
    RvmConfig,
    RvmResult,
    fit_pce,
    fit_pce_full,
    rvm_fit,
    rvm_predict,
)

__version__ = "0.1.0"
