"""Manifold learning with pixel-rejection normalizing flows, in plain numpy."""

from .data import Dataset, make_circle, make_embedded_gaussian, make_swiss_roll
from .flows import FlowStack, LayerSpec, glow_specs
from .objective import LatentSplit, LossConfig, Model, pixel_rejection_loss, reconstruct, sample
from .training import FlowSpec, Stage, StagePlan, build_model, train_hierarchical, train_single_step

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FlowSpec",
    "FlowStack",
    "LatentSplit",
    "LayerSpec",
    "LossConfig",
    "Model",
    "Stage",
    "StagePlan",
    "build_model",
    "glow_specs",
    "make_circle",
    "make_embedded_gaussian",
    "make_swiss_roll",
    "pixel_rejection_loss",
    "reconstruct",
    "sample",
    "train_hierarchical",
    "train_single_step",
]
