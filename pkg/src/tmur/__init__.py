"""Trusted multi-view classification with a unified evidential router."""

from tmur.evidential import DirichletOpinion, ScaleFamily, evidence_to_opinion
from tmur.model import ModelConfig, TMURModel
from tmur.objectives import LossWeights
from tmur.training import TrainConfig, fit

__all__ = [
    "DirichletOpinion",
    "LossWeights",
    "ModelConfig",
    "ScaleFamily",
    "TMURModel",
    "TrainConfig",
    "evidence_to_opinion",
    "fit",
]

__version__ = "0.1.0"
