"""Disentangled image-transformation manifolds with grouped (block-diagonal)
Lie-group transport operators."""

from .linalg import BlockDiagOperator, block_expm, expm, expm_frechet, expm_frechet_adjoint
from .model import MangoModel, TrainConfig, train, transform_latent, transport_loss, total_loss
from .transforms import TransformFamily

__all__ = [
    "BlockDiagOperator", "block_expm", "expm", "expm_frechet", "expm_frechet_adjoint",
    "MangoModel", "TrainConfig", "train", "transform_latent", "transport_loss", "total_loss",
    "TransformFamily",
]
