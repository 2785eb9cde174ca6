"""Cannot-link constrained Chinese restaurant process clustering.

Implements the dysfunctional-family CRP: a Bayesian nonparametric
clustering model for merging object lists produced by multiple
annotators, where two detections from the same annotator can never be
the same object.  Ships the exact small-instance probability oracle,
the permutation- and neighborhood-modified Gibbs sampler, a synthetic
data generator and simulation-study harness, posterior summary metrics,
and a command-line interface.
"""

__version__ = "0.1.0"

from .partition import (
    canonical_labels,
    crp_step_probs,
    dfcrp_joint_logprob,
    dfcrp_marginal_logprob_exact,
    dfcrp_marginal_logprob_mc,
    dfcrp_step_probs,
    enumerate_valid_partitions,
    is_valid_partition,
    sample_prior_partition,
    SeatingCounts,
)
from .config import ChainConfig, Hyperparams, preset_hyperparams
from .mixture import (
    Annotation,
    ClusterCovariance,
    ClusterParams,
    covariance_prior_logpdf,
    metropolis_covariance_step,
    mvn_logpdf,
    sample_alpha_mh,
    sample_covariance_prior,
    sample_mu_posterior,
)
from .sampler import (
    Draw,
    NeighborIndex,
    SamplerState,
    build_neighbor_index,
    gibbs_scan,
    permutation_metropolis_step,
    propose_swap_with_last,
    reassign_last_item,
    run_chain,
    run_chains_parallel,
    run_prior_chain,
)
from .metrics import (
    SizeBands,
    adjusted_rand_index,
    consensus_counts,
    jaccard_expert_pair,
    singleton_and_excluded_stats,
    violating_cluster_proportion,
)
from .simulation import (
    LabeledDataset,
    SimConfig,
    generate_dataset,
    run_simulation_study,
)

__all__ = [
    "__version__",
    "Annotation",
    "ChainConfig",
    "ClusterCovariance",
    "ClusterParams",
    "Draw",
    "Hyperparams",
    "LabeledDataset",
    "NeighborIndex",
    "SamplerState",
    "SeatingCounts",
    "SimConfig",
    "SizeBands",
    "adjusted_rand_index",
    "build_neighbor_index",
    "canonical_labels",
    "consensus_counts",
    "covariance_prior_logpdf",
    "crp_step_probs",
    "dfcrp_joint_logprob",
    "dfcrp_marginal_logprob_exact",
    "dfcrp_marginal_logprob_mc",
    "dfcrp_step_probs",
    "enumerate_valid_partitions",
    "generate_dataset",
    "gibbs_scan",
    "is_valid_partition",
    "jaccard_expert_pair",
    "metropolis_covariance_step",
    "mvn_logpdf",
    "permutation_metropolis_step",
    "preset_hyperparams",
    "propose_swap_with_last",
    "reassign_last_item",
    "run_chain",
    "run_chains_parallel",
    "run_prior_chain",
    "run_simulation_study",
    "sample_alpha_mh",
    "sample_covariance_prior",
    "sample_mu_posterior",
    "sample_prior_partition",
    "singleton_and_excluded_stats",
    "violating_cluster_proportion",
]
