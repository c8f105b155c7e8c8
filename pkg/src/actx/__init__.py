"""Attentive action/context factorization on spatiotemporal feature maps."""

from .attention import AttentionBundle, AttentionHyper, ConvParams
from .model import ConjugateGroup, ModelParams, TrainConfig, init_params, total_loss, train
from .synth import SynthSpec, generate

__all__ = [
    "AttentionBundle",
    "AttentionHyper",
    "ConjugateGroup",
    "ConvParams",
    "ModelParams",
    "SynthSpec",
    "TrainConfig",
    "generate",
    "init_params",
    "total_loss",
    "train",
]
