"""Embedding heads, optimisation, training loops and gradient checks."""
from ..mlp import MLPHead, backward, forward
from .fewshot import EpisodeSpec, FewShotResult, few_shot_adapt
from .gradcheck import REGISTRY, GradCheckReport, grad_check
from .optim import AdamState, adam_step
from .training import TrainConfig, TrainResult, evaluate, make_ood_task, train

__all__ = [
    "MLPHead", "forward", "backward", "AdamState", "adam_step",
    "TrainConfig", "TrainResult", "train", "evaluate", "make_ood_task",
    "EpisodeSpec", "FewShotResult", "few_shot_adapt",
    "REGISTRY", "GradCheckReport", "grad_check",
]
