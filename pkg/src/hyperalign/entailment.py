"""Entailment-cone geometry and the hyperbolic alignment objective.

Text points are the cone apexes (generic concepts); each paired image point
should fall inside its text point's cone. The contrastive term is a symmetric
InfoNCE over negative geodesic distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import BatchTooSmallError, ConfigError, DegeneratePairError, OriginConeError, ShapeError
from .lorentz import HyperboloidPoint, lorentz_inner, pairwise_distance
from .tensor import Tensor

# arcsin/arccos arguments are kept this far inside [-1, 1]
ANGLE_CLAMP = 1e-9
TAU_MIN, TAU_MAX = 0.01, 100.0
# -c<x,y>_L - 1 below this is treated as coincident points
DEGENERATE_GAP = 1e-12


@dataclass(frozen=True)
class ConeConfig:
    K: float = 0.1
    c: float = 0.1
    lam: float = 0.1
    tau: float = 0.07

    def __post_init__(self):
        if not self.K > 0:
            raise ConfigError(f"K must be positive, got {self.K}", field="K")
        if not self.c > 0:
            raise ConfigError(f"c must be positive, got {self.c}", field="c")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}", field="lam")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", field="tau")


@dataclass(frozen=True)
class AlignmentBatch:
    """Row i of ``text`` and row i of ``image`` form the positive pair."""

    text: HyperboloidPoint
    image: HyperboloidPoint

    def __post_init__(self):
        if self.text.space.shape != self.image.space.shape:
            raise ShapeError(f"text {self.text.space.shape} and image {self.image.space.shape} batches differ")
        if self.text.space.ndim != 2:
            raise ShapeError("alignment batches are [B, n]")
        if self.text.c != self.image.c:
            raise ShapeError("text and image points use different curvatures")

    def __len__(self):
        return self.text.space.shape[0]


class AlignmentLosses(NamedTuple):
    contrastive: Tensor
    entailment: Tensor
    total: Tensor


def _space_norm(x: HyperboloidPoint) -> Tensor:
    sq = T.sum_(T.square(x.space), axis=-1)
    if np.any(sq.data == 0):
        raise OriginConeError("entailment cone is undefined at the hyperboloid origin")
    return T.sqrt(sq)


def _check_c(x: HyperboloidPoint, cfg: ConeConfig):
    if not math.isclose(x.c, cfg.c, rel_tol=0, abs_tol=0):
        raise ConfigError(f"points use c={x.c} but cone config has c={cfg.c}", field="c")


def half_aperture(x: HyperboloidPoint, cfg: ConeConfig) -> Tensor:
    """arcsin(2K / (sqrt(c) |x_space|)), argument clamped inside [-1, 1]."""
    _check_c(x, cfg)
    arg = (2.0 * cfg.K / math.sqrt(cfg.c)) / _space_norm(x)
    return T.arcsin(T.clamp(arg, -1.0 + ANGLE_CLAMP, 1.0 - ANGLE_CLAMP))


def exterior_angle(x: HyperboloidPoint, y: HyperboloidPoint, cfg: ConeConfig) -> Tensor:
    """pi minus the angle at x between the geodesics x->O and x->y."""
    _check_c(x, cfg)
    _check_c(y, cfg)
    c = cfg.c
    c_xy = lorentz_inner(x, y) * c
    if np.any(-c_xy.data - 1.0 < DEGENERATE_GAP):
        raise DegeneratePairError("exterior angle undefined for coincident points")
    numer = y.time + x.time * c_xy
    denom = _space_norm(x) * T.sqrt(T.square(c_xy) - 1.0)
    return T.arccos(T.clamp(numer / denom, -1.0 + ANGLE_CLAMP, 1.0 - ANGLE_CLAMP))


def cone_violation(x: HyperboloidPoint, y: HyperboloidPoint, cfg: ConeConfig) -> Tensor:
    """Per-pair hinge max(0, ext(x, y) - aper(x))."""
    return T.max0(exterior_angle(x, y, cfg) - half_aperture(x, cfg))


def entailment_loss(batch: AlignmentBatch, cfg: ConeConfig) -> Tensor:
    return T.mean(cone_violation(batch.text, batch.image, cfg))


def _temperature(cfg: ConeConfig, temperature) -> Tensor:
    if temperature is None:
        return Tensor(min(max(cfg.tau, TAU_MIN), TAU_MAX))
    return T.clamp(T.as_tensor(temperature), TAU_MIN, TAU_MAX)


def similarity_matrix(batch: AlignmentBatch, geometry: str = "lorentz") -> Tensor:
    """Text-by-image similarities: negative geodesic distance, or cosine in Euclidean mode."""
    if geometry == "lorentz":
        return -pairwise_distance(batch.text, batch.image)
    if geometry == "euclidean":
        a = batch.text.space / T.sqrt(T.sum_(T.square(batch.text.space), axis=-1, keepdims=True) + 1e-12)
        b = batch.image.space / T.sqrt(T.sum_(T.square(batch.image.space), axis=-1, keepdims=True) + 1e-12)
        return a @ b.T
    raise ValueError(f"unknown geometry {geometry!r}")


def contrastive_loss(batch: AlignmentBatch, cfg: ConeConfig, temperature=None, geometry: str = "lorentz") -> Tensor:
    """Symmetric InfoNCE with logits s_ij / tau, averaged over both directions.

    ``temperature`` may be a (learnable) scalar tensor; it overrides ``cfg.tau``
    and is clamped to [0.01, 100].
    """
    B = len(batch)
    if B < 2:
        raise BatchTooSmallError(f"contrastive loss needs at least 2 pairs, got {B}")
    logits = similarity_matrix(batch, geometry) / _temperature(cfg, temperature)
    diag = (np.arange(B), np.arange(B))
    rows = T.log_softmax(logits, axis=1)[diag]
    cols = T.log_softmax(logits, axis=0)[diag]
    return -0.5 * (T.mean(rows) + T.mean(cols))


def alignment_losses(batch: AlignmentBatch, cfg: ConeConfig, temperature=None, geometry: str = "lorentz") -> AlignmentLosses:
    cont = contrastive_loss(batch, cfg, temperature, geometry)
    ent = entailment_loss(batch, cfg)
    return AlignmentLosses(cont, ent, cont + ent * cfg.lam)


def total_alignment_loss(batch: AlignmentBatch, cfg: ConeConfig, temperature=None, geometry: str = "lorentz") -> Tensor:
    """Contrastive loss plus lambda times the entailment hinge."""
    return alignment_losses(batch, cfg, temperature, geometry).total
