"""Identify-then-recommend: unsupervised group discovery and self-supervised group recommendation."""

__version__ = "0.1.0"

from .data import Dataset, EvalSet, GroupMembership, InteractionMatrix, load_dataset, validate_dataset
from .embed import BprBatch, EmbeddingState, bpr_loss_and_grad, init_embeddings, score
from .evaluation import RankingMetrics, evaluate_group_rec, evaluate_user_rec, rank_case, silhouette
from .gim import CandidateSet, adaptive_density, identify_groups, merge_split, radius_proposals
from .ssl import (PseudoLabels, par_loss_and_grad, pgr_loss_and_grad, pseudo_assignment,
                  pseudo_group_interactions)
from .trainer import LossWeights, TrainConfig, TrainedModel, combine_losses, run, sample_negatives, train_epoch

__all__ = [
    "BprBatch", "CandidateSet", "Dataset", "EmbeddingState", "EvalSet", "GroupMembership",
    "InteractionMatrix", "LossWeights", "PseudoLabels", "RankingMetrics", "TrainConfig", "TrainedModel",
    "adaptive_density", "bpr_loss_and_grad", "combine_losses", "evaluate_group_rec", "evaluate_user_rec",
    "identify_groups", "init_embeddings", "load_dataset", "merge_split", "par_loss_and_grad",
    "pgr_loss_and_grad", "pseudo_assignment", "pseudo_group_interactions", "radius_proposals", "rank_case",
    "run", "sample_negatives", "score", "silhouette", "train_epoch", "validate_dataset",
]
