"""Sharpness-aware training for graph collaborative filtering."""
from .autodiff import FlatVector
from .data import InteractionData, SplitData, load_interactions, normalized_adjacency, split_holdout
from .evaluation import EvalReport, evaluate_all, ranking_metrics
from .harness import RunConfig, multirun_stability, rho_sweep, run_training
from .model import BPRObjective, Checkpoint, ModelConfig
from .optim import SamConfig, hypergradient, inner_ascent, neumann_apply, train_step

__version__ = "0.1.0"
