"""Flow-guided fine-tuning of generative recommenders on a title prefix tree."""

from .catalog import (
    Catalog,
    Dataset,
    Example,
    GroupAssignment,
    InteractionRecord,
    assign_popularity_groups,
    build_catalog,
    ingest_interactions,
    preprocess,
    tokenize,
)
from .decode import RankedList, generate_topk, sample_list
from .evaluation import MetricsReport, distribution_mismatch, dgu_mgu, diversity, hr_ndcg
from .flownet import (
    END,
    FlowTree,
    RewardVariant,
    build_prefix_tree,
    path_log_reward,
    personalized_log_reward,
    process_reward,
)
from .policy import (
    PolicyParams,
    encode_context,
    flow_optimal_params,
    init_params,
    next_token_dist,
    sample_title,
    seq_log_prob,
)
from .training import (
    WHOLE,
    TrainConfig,
    enumerate_subtrajectories,
    flower_loss,
    gradients,
    sft_loss,
    subtb_loss,
    train,
)

__all__ = [
    "assign_popularity_groups",
    "build_catalog",
    "build_prefix_tree",
    "Catalog",
    "Dataset",
    "dgu_mgu",
    "distribution_mismatch",
    "diversity",
    "encode_context",
    "END",
    "enumerate_subtrajectories",
    "Example",
    "flow_optimal_params",
    "flower_loss",
    "FlowTree",
    "generate_topk",
    "gradients",
    "GroupAssignment",
    "hr_ndcg",
    "ingest_interactions",
    "init_params",
    "InteractionRecord",
    "MetricsReport",
    "next_token_dist",
    "path_log_reward",
    "personalized_log_reward",
    "PolicyParams",
    "preprocess",
    "process_reward",
    "RankedList",
    "RewardVariant",
    "sample_list",
    "sample_title",
    "seq_log_prob",
    "sft_loss",
    "subtb_loss",
    "tokenize",
    "train",
    "TrainConfig",
    "WHOLE",
]

__version__ = "0.1.0"
