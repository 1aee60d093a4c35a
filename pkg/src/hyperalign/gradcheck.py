"""Finite-difference verification of the training objectives and their primitives.

Each check draws a random point, builds a scalar objective of a flat parameter
block and compares the tape gradient with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .entailment import AlignmentBatch, ConeConfig, contrastive_loss, entailment_loss, total_alignment_loss
from .lorentz import exp_map_origin
from .softmoe import MoEParams, fusion_forward, load_balance_loss, moe_forward, total_loss
from .tensor import Tensor

TOLERANCE = 1e-5
LOSSES = ("L_cont", "L_ent", "L_balance", "L_MoE")


@dataclass(frozen=True)
class SizePreset:
    B: int
    n: int
    M: int


PRESETS = {
    "tiny": SizePreset(B=2, n=4, M=2),
    "small": SizePreset(B=4, n=8, M=3),
    "medium": SizePreset(B=8, n=16, M=6),
}

# well-conditioned evaluation point: unit temperature keeps the softmax away
# from saturation, where true partials underflow below the difference noise
CHECK_CONE = ConeConfig(K=0.1, c=0.1, lam=0.1, tau=1.0)
CHECK_BETA = 0.01
# central differences at step 1e-6 resolve partials only to ~1e-10 absolute, so
# a partial below this floor cannot be checked to TOLERANCE; such points are redrawn
MIN_PARTIAL = 1e-4
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class CheckRow:
    name: str
    points: int
    max_rel_error: float
    redrawn: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


Objective = Callable[[Tensor], Tensor]


def _split_batch(theta: Tensor, B: int, c: float) -> AlignmentBatch:
    return AlignmentBatch(exp_map_origin(theta[:B], c), exp_map_origin(theta[B:], c))


def loss_point(name: str, size: SizePreset, rng: np.random.Generator) -> tuple[Objective, np.ndarray]:
    """Objective and evaluation point for one named loss."""
    B, n, M = size.B, size.n, size.M
    cone = CHECK_CONE
    if name == "L_cont":
        theta = rng.normal(0.0, 1.0, (2 * B, n))
        return (lambda t: contrastive_loss(_split_batch(t, B, cone.c), cone)), theta
    if name == "L_ent":
        # texts near the origin with wide cones, images further out
        theta = np.concatenate([rng.normal(0.0, 1.0, (B, n)), rng.normal(0.0, 2.0, (B, n))])
        return (lambda t: entailment_loss(_split_batch(t, B, cone.c), cone)), theta
    if name == "L_balance":
        p = MoEParams.init(n, M, rng)
        q = Tensor(rng.normal(0.0, 1.0, (2 * B, n)))

        def balance(gate_w):
            return load_balance_loss(moe_forward(q, MoEParams(**{**_fields(p), "gate_w": gate_w})))

        return balance, p.gate_w.data.copy()
    if name == "L_MoE":
        p = MoEParams.init(n, M, rng)

        def moe_total(q):
            fused, out = fusion_forward(q, p)
            task = total_alignment_loss(_split_batch(fused, B, cone.c), cone)
            return total_loss(task, load_balance_loss(out), CHECK_BETA)

        return moe_total, rng.normal(0.0, 1.0, (2 * B, n))
    raise KeyError(f"unknown loss {name!r}")


def _fields(p: MoEParams) -> dict:
    return {**p.arrays(), "activation": p.activation}


def rng_weights(shape) -> np.ndarray:
    # fixed, non-degenerate weights so no partial is accidentally tiny
    return np.linspace(0.5, 1.5, int(np.prod(shape))).reshape(shape)


def _weighted(fn: Objective, shape) -> Objective:
    w = Tensor(rng_weights(shape))
    return lambda t: T.sum_(fn(t) * w)


def primitive_point(kind: str, rng: np.random.Generator) -> tuple[Objective, np.ndarray]:
    """Weighted-sum objective exercising a single op kind."""
    x = rng.uniform(-1.5, 1.5, (3, 4))
    other = Tensor(rng.uniform(0.5, 1.5, (3, 4)))
    mat = Tensor(rng.normal(0.0, 1.0, (4, 2)))
    away_from_zero = np.sign(x) * (0.2 + np.abs(x))
    table = {
        "add": (lambda t: t + other, x),
        "sub": (lambda t: other - t, x),
        "mul": (lambda t: t * other, x),
        "div": (lambda t: other / t, away_from_zero),
        "neg": (lambda t: -t, x),
        "exp": (T.exp, x),
        "log": (T.log, np.abs(away_from_zero)),
        "sqrt": (T.sqrt, np.abs(away_from_zero)),
        "sinh": (T.sinh, x),
        "cosh": (T.cosh, x),
        "arccosh": (T.arccosh, 1.1 + np.abs(x)),
        "arcsin": (T.arcsin, 0.6 * x),
        "arccos": (T.arccos, 0.6 * x),
        "max0": (T.max0, away_from_zero),
        "square": (T.square, x),
        "softplus": (T.softplus, x),
        "gelu": (T.gelu, x),
        "sinhc_sq": (T.sinhc_sq, np.abs(x)),
        "acosh_ratio": (T.acosh_ratio, 1.1 + np.abs(x)),
        "matmul": (lambda t: t @ mat, x),
        "softmax": (lambda t: T.softmax(t, axis=-1), x),
        "log_softmax": (lambda t: T.log_softmax(t, axis=-1), x),
        "transpose": (lambda t: t.T, x),
        "reshape": (lambda t: T.reshape(t, (4, 3)), x),
        "index": (lambda t: t[np.array([2, 0, 2])], x),
        "concat": (lambda t: T.concat([t, t * other], axis=1), x),
        "sum": (lambda t: T.sum_(t * t, axis=0), x),
        "clamp": (lambda t: T.clamp(t, -1.0, 1.0), 0.6 * x),
    }
    if kind not in table:
        raise KeyError(f"no primitive check for {kind!r}")
    fn, theta = table[kind]
    out_shape = fn(Tensor(theta)).shape
    return _weighted(fn, out_shape), theta


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sinh", "cosh", "arccosh", "arcsin",
    "arccos", "max0", "square", "softplus", "gelu", "sinhc_sq", "acosh_ratio", "matmul", "softmax",
    "log_softmax", "transpose", "reshape", "index", "concat", "sum", "clamp",
)


def admissible(central: np.ndarray) -> bool:
    """Every partial is either exactly zero or large enough to resolve."""
    mag = np.abs(central)
    return bool(np.all((mag == 0) | (mag >= MIN_PARTIAL)))


def check_losses(seed: int = 0, size: str | SizePreset = "small", points: int = 50) -> list[CheckRow]:
    preset = PRESETS[size] if isinstance(size, str) else size
    rows = []
    for k, name in enumerate(LOSSES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        worst, done, redrawn = 0.0, 0, 0
        while done < points:
            f, theta = loss_point(name, preset, rng)
            central = T.numerical_gradient(f, theta)
            if not admissible(central):
                redrawn += 1
                if redrawn > MAX_REDRAWS:
                    raise RuntimeError(f"{name}: no admissible evaluation point after {MAX_REDRAWS} draws")
                continue
            _, analytic = T.value_and_grad(f, theta)
            worst = max(worst, T.relative_error(analytic, central))
            done += 1
        rows.append(CheckRow(name, points, worst, redrawn))
    return rows


def check_primitives(seed: int = 0) -> list[CheckRow]:
    rows = []
    for k, kind in enumerate(PRIMITIVES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + k]))
        f, theta = primitive_point(kind, rng)
        rows.append(CheckRow(kind, 1, T.finite_difference_check(f, theta)))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  points  redrawn  max_rel_error  status"]
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.points:>6}  {r.redrawn:>7}  {r.max_rel_error:>13.3e}  {status}")
    return "\n".join(lines)
