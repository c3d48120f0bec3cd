"""Meta-learned regularization for few-shot fine-grained classification.

A shared base network carries two heads: one for the small target task and one
for a large auxiliary task. Training optimizes the target loss after a virtual
gradient step (a second-order meta-gradient) plus the auxiliary loss as a
regularizer; the trained heads then score auxiliary samples for relatedness.
"""

from .autodiff import grad, hvp, value, value_and_grad
from .data import LabeledDataset, Relatedness, SyntheticTask, TaskSpec, generate_task
from .harness import ExperimentConfig, ResultTable, run_experiment, run_seed
from .metatrain import TrainConfig, TrainReport, meta_gradient, meta_train_step, train_loop
from .model import ModelConfig, TwoHeadParams, evaluate, init_params
from .selection import SelectionConfig, rank_and_select, score_dataset, score_logits

__all__ = [
    "ExperimentConfig",
    "LabeledDataset",
    "ModelConfig",
    "Relatedness",
    "ResultTable",
    "SelectionConfig",
    "SyntheticTask",
    "TaskSpec",
    "TrainConfig",
    "TrainReport",
    "TwoHeadParams",
    "evaluate",
    "generate_task",
    "grad",
    "hvp",
    "init_params",
    "meta_gradient",
    "meta_train_step",
    "rank_and_select",
    "run_experiment",
    "run_seed",
    "score_dataset",
    "score_logits",
    "train_loop",
    "value",
    "value_and_grad",
]
