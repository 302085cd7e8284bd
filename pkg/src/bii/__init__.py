"""Bayesian indirect inference toolkit.

Likelihood-free posterior inference built on a tractable auxiliary model:
ABC with auxiliary-parameter, auxiliary-likelihood and auxiliary-score
discrepancies; the replicate-estimated auxiliary likelihood for full data;
and the Gaussian synthetic likelihood for summary statistics.
"""

__version__ = "0.1.0"

from .abc_ii import (
    AssumptionViolation,
    EpsilonCalibration,
    KernelSpec,
    ObservedSummary,
    calibrate_epsilon,
    disc_il,
    disc_ip,
    disc_is,
    kernel_weight,
    precompute_observed,
)
from .auxiliary import (
    AuxiliaryModel,
    BetaBinomialRegressionAux,
    FixedVarNormalAux,
    GaussianMixtureAux,
    MleFailure,
    NormalAux,
)
from .core import (
    Dataset,
    Phi,
    Prior,
    ReplicateSet,
    RngState,
    Theta,
    normal_quantile,
    prior_logpdf,
    prior_sample,
)
from .generative import (
    GandKModel,
    GridDensity,
    MacroparasiteModel,
    PoissonModel,
    gk_logpdf,
    gk_quantile,
    mjp_oracle_dist,
    poisson_exact_posterior,
    poisson_pdbil_limit,
    simulate_replicates,
)
from .indirect_likelihood import (
    PdBilEstimate,
    SingularCovariance,
    SynthLikEstimate,
    npdbil_identity_check,
    pdbil_loglik,
    psbil_loglik,
)
from .mcmc import (
    Chain,
    ProposalSpec,
    acceptance_rate,
    ess,
    read_chain_csv,
    run_mcmc_abc,
    run_mcmc_indirect,
    run_mcmc_pdbil,
    tune_proposal_abc,
    tune_proposal_indirect,
    write_chain_csv,
)
from .postprocess import AdjustmentSpec, posterior_summary, regression_adjust
