"""Lorentz (hyperboloid) model of hyperbolic space with curvature -c.

Points are stored by their space components only; the time component is
recomputed from the hyperboloid constraint whenever it is needed, so gradients
never flow through an independently stored time coordinate. Full ambient
vectors use the layout ``[space..., time]``.

Only maps based at the hyperboloid origin ``O = [0, sqrt(1/c)]`` are provided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ManifoldError, ShapeError
from .tensor import Tensor

# relative tolerance for accepting a full ambient vector as on-manifold
MANIFOLD_RTOL = 1e-9


@dataclass(frozen=True)
class Curvature:
    c: float = 0.1

    def __post_init__(self):
        if not (isinstance(self.c, (int, float)) and math.isfinite(self.c) and self.c > 0):
            raise ConfigError(f"curvature must be a positive float, got {self.c!r}", field="c")

    def __float__(self):
        return float(self.c)


def _c(c) -> float:
    return float(Curvature(float(c)))


@dataclass(frozen=True)
class TangentVector:
    """Tangent vector at the origin; its time component is structurally zero."""

    space: Tensor

    def full(self) -> Tensor:
        zero = Tensor(np.zeros(self.space.shape[:-1] + (1,)))
        return T.concat([self.space, zero], axis=-1)


@dataclass(frozen=True)
class HyperboloidPoint:
    """Point (or batch of points, leading axes) on the upper sheet."""

    space: Tensor
    c: float

    def __post_init__(self):
        object.__setattr__(self, "space", T.as_tensor(self.space))
        object.__setattr__(self, "c", _c(self.c))
        if self.space.ndim == 0:
            raise ShapeError("space components need at least one axis")

    @property
    def dim(self) -> int:
        return self.space.shape[-1]

    def time_column(self) -> Tensor:
        """Time components with a trailing singleton axis, for broadcasting."""
        return _time(self.space, self.c)

    @property
    def time(self) -> Tensor:
        return T.reshape(self.time_column(), self.space.shape[:-1])

    def full(self) -> Tensor:
        return T.concat([self.space, self.time_column()], axis=-1)

    def __len__(self):
        return self.space.shape[0]

    def __getitem__(self, key) -> "HyperboloidPoint":
        return HyperboloidPoint(self.space[key], self.c)


def _sqnorm(space: Tensor) -> Tensor:
    return T.sum_(T.square(space), axis=-1, keepdims=True)


def _time(space: Tensor, c: float) -> Tensor:
    return T.sqrt(1.0 / c + _sqnorm(space))


def origin(n: int, c) -> HyperboloidPoint:
    return HyperboloidPoint(Tensor(np.zeros(n)), c)


def time_from_space(space, c) -> Tensor:
    """Time component sqrt(1/c + |space|^2) (last axis reduced)."""
    space = T.as_tensor(space)
    t = _time(space, _c(c))
    return T.reshape(t, space.shape[:-1])


def _split_full(x) -> tuple[Tensor, Tensor]:
    if isinstance(x, HyperboloidPoint):
        return x.space, x.time_column()
    if isinstance(x, TangentVector):
        return x.space, Tensor(np.zeros(x.space.shape[:-1] + (1,)))
    x = T.as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ShapeError(f"full ambient vector needs at least 2 components, got shape {x.shape}")
    n = x.shape[-1] - 1
    idx = (Ellipsis,)
    return x[idx + (slice(0, n),)], x[idx + (slice(n, n + 1),)]


def _stable_gap(p: Tensor, sx: Tensor, sy: Tensor, xt: Tensor, yt: Tensor, wedge: Tensor, c: float) -> Tensor:
    """xt*yt - <xs, ys> for on-manifold points, without catastrophic cancellation.

    With a = 1/c and p = <xs, ys>:
    xt*yt - p = (a^2 + a(|xs|^2 + |ys|^2) + wedge) / (xt*yt + p), where
    wedge = |xs|^2 |ys|^2 - p^2 >= 0. Every numerator term is non-negative, so
    this form is used where p > 0; where p <= 0 the direct form adds like signs.
    """
    a = 1.0 / c
    tt = xt * yt
    direct = tt - p
    mask = (p.data > 0).astype(np.float64)
    # unselected entries get a unit denominator: tt + p can round to 0 there
    ratio = (sx * a + sy * a + wedge + a * a) / ((tt + p) * mask + (1.0 - mask))
    return ratio * mask + direct * (1.0 - mask)


def _wedge(xs: Tensor, ys: Tensor) -> Tensor:
    """|x|^2 |y|^2 - <x, y>^2 as the sum of squared 2x2 minors (Lagrange identity)."""
    lead = xs.shape[:-1]
    n = xs.shape[-1]
    col_x, row_x = T.reshape(xs, lead + (n, 1)), T.reshape(xs, lead + (1, n))
    col_y, row_y = T.reshape(ys, lead + (n, 1)), T.reshape(ys, lead + (1, n))
    minors = col_x * row_y - col_y * row_x
    return T.sum_(T.sum_(T.square(minors), axis=-1), axis=-1, keepdims=True) * 0.5


def lorentz_inner(x, y) -> Tensor:
    """<x_space, y_space> - x_time * y_time, reduced over the last axis.

    Two points on the same hyperboloid are evaluated in a cancellation-free
    form, so <x, x>_L = -1/c holds to rounding even far from the origin.
    """
    xs, xt = _split_full(x)
    ys, yt = _split_full(y)
    if xs.shape[-1] != ys.shape[-1]:
        raise ShapeError(f"ambient dimensions differ: {xs.shape[-1] + 1} vs {ys.shape[-1] + 1}")
    p = T.sum_(xs * ys, axis=-1, keepdims=True)
    if isinstance(x, HyperboloidPoint) and isinstance(y, HyperboloidPoint) and x.c == y.c:
        if xs.shape != ys.shape:
            xs, ys = xs + ys * 0.0, ys + xs * 0.0
        out = -_stable_gap(p, _sqnorm(xs), _sqnorm(ys), xt, yt, _wedge(xs, ys), x.c)
    else:
        out = p - xt * yt
    return T.reshape(out, out.shape[:-1])


def lorentz_norm(x) -> Tensor:
    """sqrt(|<x, x>_L|)."""
    q = lorentz_inner(x, x)
    sign = np.where(q.data < 0, -1.0, 1.0)
    return T.sqrt(q * sign)


def pairwise_inner(x: HyperboloidPoint, y: HyperboloidPoint) -> Tensor:
    """Matrix of Lorentzian inner products between two point batches [B, n] and [B', n]."""
    if x.dim != y.dim:
        raise ShapeError(f"ambient dimensions differ: {x.dim} vs {y.dim}")
    if x.c != y.c:
        raise ManifoldError(f"points live on different hyperboloids (c={x.c} vs c={y.c})")
    p = x.space @ y.space.T
    sx, sy = _sqnorm(x.space), _sqnorm(y.space).T
    wedge = sx * sy - T.square(p)
    return -_stable_gap(p, sx, sy, x.time_column(), y.time_column().T, wedge, x.c)


def exp_map_origin(v, c) -> HyperboloidPoint:
    """Map a tangent vector at the origin onto the hyperboloid.

    Space part is sinh(sqrt(c)|v|) / (sqrt(c)|v|) * v; the zero vector maps to
    the origin via the series limit.
    """
    c = _c(c)
    space = v.space if isinstance(v, TangentVector) else T.as_tensor(v)
    scale = T.sinhc_sq(_sqnorm(space) * c)
    return HyperboloidPoint(scale * space, c)


def check_on_manifold(x: Tensor, c: float, rtol: float = MANIFOLD_RTOL) -> None:
    xs, xt = _split_full(x)
    if np.any(xt.data <= 0):
        raise ManifoldError("point lies on the lower sheet (time <= 0)")
    q = lorentz_inner(x, x).data
    scale = 1.0 / c + np.sum(xs.data**2, axis=-1)
    bad = np.abs(q + 1.0 / c) > rtol * scale
    if np.any(bad):
        worst = float(np.max(np.abs(q + 1.0 / c)))
        raise ManifoldError(f"point off the hyperboloid: |<x,x>_L + 1/c| = {worst:.3g}")


def log_map_origin(x, c=None) -> TangentVector:
    """Inverse of :func:`exp_map_origin`.

    Accepts a :class:`HyperboloidPoint` or full ambient vectors (then ``c`` is
    required and membership is validated). Uses
    arccosh(-c<O,x>_L) / sqrt((c<O,x>_L)^2 - 1) * proj_O(x), whose space part is
    just x_space because proj_O zeroes the time component.
    """
    if isinstance(x, HyperboloidPoint):
        c = x.c if c is None else _c(c)
        if c != x.c:
            raise ManifoldError(f"point has curvature {x.c}, log map asked for {c}")
        space, time = x.space, x.time_column()
    else:
        if c is None:
            raise ManifoldError("curvature required for a raw ambient vector")
        c = _c(c)
        x = T.as_tensor(x)
        check_on_manifold(x, c)
        space, time = _split_full(x)
    # <O, x>_L = -sqrt(1/c) * x_time
    inner_o = time * (-math.sqrt(1.0 / c))
    ratio = T.acosh_ratio(inner_o * (-c))
    return TangentVector(ratio * space)


def lorentz_distance(x: HyperboloidPoint, y: HyperboloidPoint, c=None) -> Tensor:
    """Geodesic distance (1/sqrt(c)) arccosh(-c<x,y>_L), elementwise over a batch."""
    c = _same_c(x, y, c)
    return T.arccosh(lorentz_inner(x, y) * (-c)) * (1.0 / math.sqrt(c))


def pairwise_distance(x: HyperboloidPoint, y: HyperboloidPoint, c=None) -> Tensor:
    c = _same_c(x, y, c)
    return T.arccosh(pairwise_inner(x, y) * (-c)) * (1.0 / math.sqrt(c))


def _same_c(x: HyperboloidPoint, y: HyperboloidPoint, c) -> float:
    if x.c != y.c:
        raise ManifoldError(f"points live on different hyperboloids (c={x.c} vs c={y.c})")
    if c is not None and _c(c) != x.c:
        raise ManifoldError(f"points have curvature {x.c}, asked for {c}")
    return x.c
