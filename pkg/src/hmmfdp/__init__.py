"""Confidence bounds on the false discovery proportion of data-driven
selections under a two-state hidden Markov model."""

__version__ = "0.1.0"

from .errors import (BootstrapError, DegenerateLikelihoodError, EmptySelectionError, EstimationError,
                     HMMFDPError, InvalidParameterError, UnsupportedVariantError)
from .density import (EmpiricalNullCDF, GaussianDensity, KernelMixture, PValues, bandwidth_silverman,
                      empirical_null_cdf, empirical_pvalues, exact_pvalues, weighted_kde)
from .hmm_core import (ForwardBackward, ModelParams, PosteriorChain, TransitionMatrix, forward_backward,
                       posterior_chain, sample_hmm, stationary_distribution, viterbi)
from .estimation import EmConfig, EmTrace, em_fit_known_f0, em_fit_unknown_f0, initialize, storey_pi0
from .bounds import (FdpInterval, Selection, count_tables, fdp, lower_bound, plugin_interval, plugin_lower,
                     plugin_upper, posterior_interval, restrict_chain, upper_bound)
from .selection import (SelectionPolicy, simes_bound, suncai_fdr_estimate, suncai_select, select_pvalue_threshold,
                        topk_select, viterbi_select)
from .bootstrap import (BootstrapConfig, ReplicateDiffs, ReplicateSet, boot1_lower, boot1_upper, boot2_lower,
                        boot2_upper, boot3_lower, boot3_upper, bootstrap_bound, lower_quantile_correction,
                        naive_lower, naive_upper, upper_quantile_correction)
