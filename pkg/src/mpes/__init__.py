"""Multi-parameter evidence synthesis for stratified epidemic estimates.

Estimates subgroup sizes, prevalence and the proportion of infections
already diagnosed across region/risk-group/gender strata by combining
direct surveys, indirect and biased data sources in one Bayesian model,
sampled with adaptive Metropolis-within-Gibbs, with deviance diagnostics
that flag conflicting evidence.
"""

__version__ = "0.1.0"

from .config import (LegalMigrantSpec, ModelConfig, ReportingChannel,
                     bundled_config_path, bundled_evidence_paths,
                     load_model_config)
from .diagnostics import (DevianceReport, deviance, eligibility_filter,
                          posterior_mean_deviance, saturated_loglik)
from .evidence import (BinomialCount, EvidenceError, EvidenceItem,
                       MultinomialSplit, PoissonTotal, load_evidence,
                       loglik_item, preprocess_registry, total_loglik)
from .model import CompiledModel
from .priors import (ConstraintSet, HierarchyLayer, InitializationError,
                     build_constraints, build_hierarchy, check_constraints,
                     log_prior, log_prior_parts, sample_from_prior)
from .sampler import (GenericDensityModel, PosteriorSample, SamplerConfig,
                      effective_sample_size, psrf, psrf_by_coordinate,
                      run_chains, run_subset, summarize)
from .space import (BasicState, Coord, OptOutBlock, ParameterSpace,
                    build_parameter_space, eval_mu, eval_xi,
                    eval_sti_aggregates, expit, logit)
from .strata import (ConfigurationError, GENDERS, ModelStructure, Region,
                     RiskGroup, Stratum)

__all__ = [
    "__version__",
    "BasicState", "BinomialCount", "CompiledModel", "ConfigurationError",
    "ConstraintSet", "Coord", "DevianceReport", "EvidenceError",
    "EvidenceItem", "GENDERS", "GenericDensityModel", "HierarchyLayer",
    "InitializationError", "LegalMigrantSpec", "ModelConfig",
    "ModelStructure", "MultinomialSplit", "OptOutBlock", "ParameterSpace",
    "PoissonTotal", "PosteriorSample", "Region", "ReportingChannel",
    "RiskGroup", "SamplerConfig", "Stratum", "build_constraints",
    "build_hierarchy", "build_parameter_space", "bundled_config_path",
    "bundled_evidence_paths", "check_constraints", "deviance",
    "effective_sample_size", "eligibility_filter", "eval_mu",
    "eval_sti_aggregates", "eval_xi", "expit", "load_evidence",
    "load_model_config", "log_prior", "log_prior_parts", "loglik_item",
    "logit", "posterior_mean_deviance", "preprocess_registry", "psrf",
    "psrf_by_coordinate", "run_chains", "run_subset", "sample_from_prior",
    "saturated_loglik", "summarize", "total_loglik",
]
