"""Toy dense aligner: a prompt token steers three output tokens that read
matching, height and width maps off a grid of image embeddings."""

from .model import (
    AlignerConfig,
    AlignerModel,
    AlignerOutput,
    aligner_backward,
    aligner_forward,
    init_model,
    positional_encoding,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .synth import Prototypes, make_prototypes, synth_embeddings
from .training import TrainConfig, TrainSample, train

__all__ = [
    "AlignerConfig",
    "AlignerModel",
    "AlignerOutput",
    "aligner_backward",
    "aligner_forward",
    "init_model",
    "positional_encoding",
    "load_checkpoint",
    "save_checkpoint",
    "Prototypes",
    "make_prototypes",
    "synth_embeddings",
    "TrainConfig",
    "TrainSample",
    "train",
]
