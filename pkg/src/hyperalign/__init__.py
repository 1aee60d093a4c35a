"""Lorentz-model semantic alignment with entailment cones and a soft-MoE fusion layer.

Everything differentiates through the small reverse-mode tape in
:mod:`hyperalign.tensor`.
"""
from .entailment import AlignmentBatch, ConeConfig, alignment_losses, contrastive_loss, entailment_loss
from .lorentz import HyperboloidPoint, exp_map_origin, log_map_origin, lorentz_distance, lorentz_inner
from .softmoe import MoEParams, fusion_block, load_balance_loss, moe_forward
from .tensor import Tape, Tensor, backward, finite_difference_check

__all__ = [
    "AlignmentBatch",
    "ConeConfig",
    "HyperboloidPoint",
    "MoEParams",
    "Tape",
    "Tensor",
    "alignment_losses",
    "backward",
    "contrastive_loss",
    "entailment_loss",
    "exp_map_origin",
    "finite_difference_check",
    "fusion_block",
    "load_balance_loss",
    "log_map_origin",
    "lorentz_distance",
    "lorentz_inner",
    "moe_forward",
]
