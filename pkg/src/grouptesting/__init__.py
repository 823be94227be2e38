"""Group testing: decode pooled test results by belief propagation."""

from .bootstrap import BootstrapSummary, bootstrap_estimate, percentile_decisions, percentile_interval
from .bp import AssumedParams, BpConfig, MarginalEstimate, MessageState, map_estimate, run_bp, threshold_estimate
from .em import EmConfig, EmTrace, bethe_free_entropy, run_bp_em
from .errors import ConstructionError, CostGuardError, DegenerateError, DesignError
from .exact import exact_marginals, log_evidence
from .hbp import BetaHyperprior, HbpConfig, HbpResult, run_bp_fixed_priors, run_hbp
from .metrics import bias, magnetizations, reconstruction_metrics, summarize, tp_fp
from .pooling import PoolingDesign, generate_design, read_design, validate_design, write_design
from .synth import NoiseModel, generate_states, observe, true_pool_states

__all__ = [
    "AssumedParams", "BetaHyperprior", "BootstrapSummary", "BpConfig", "ConstructionError",
    "CostGuardError", "DegenerateError", "DesignError", "EmConfig", "EmTrace", "HbpConfig",
    "HbpResult", "MarginalEstimate", "MessageState", "NoiseModel", "PoolingDesign",
    "bethe_free_entropy", "bias", "bootstrap_estimate", "exact_marginals", "generate_design",
    "generate_states", "log_evidence", "magnetizations", "map_estimate", "observe",
    "percentile_decisions", "percentile_interval", "read_design", "reconstruction_metrics",
    "run_bp", "run_bp_em", "run_bp_fixed_priors", "run_hbp", "summarize", "threshold_estimate",
    "tp_fp", "true_pool_states", "validate_design", "write_design",
]
