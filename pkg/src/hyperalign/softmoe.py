"""Soft mixture-of-experts fusion layer with a switch-style balance regularizer."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor

ACTIVATIONS = {"softplus": T.softplus, "gelu": T.gelu}
NORM_EPS = 1e-5


@dataclass(frozen=True)
class MoEParams:
    """Gate d->M, M experts (d -> hidden -> d), and pre-MoE norm scale/shift.

    Expert weights are stacked along a leading expert axis.
    """

    gate_w: Tensor  # [d, M]
    gate_b: Tensor  # [M]
    w1: Tensor  # [M, d, h]
    b1: Tensor  # [M, h]
    w2: Tensor  # [M, h, d]
    b2: Tensor  # [M, d]
    norm_scale: Tensor  # [d]
    norm_shift: Tensor  # [d]
    activation: str = "softplus"

    def __post_init__(self):
        for f in fields(self):
            if f.name != "activation":
                object.__setattr__(self, f.name, T.as_tensor(getattr(self, f.name)))
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", field="activation")
        d, M = self.gate_w.shape
        h = self.w1.shape[2]
        expected = {
            "gate_b": (M,),
            "w1": (M, d, h),
            "b1": (M, h),
            "w2": (M, h, d),
            "b2": (M, d),
            "norm_scale": (d,),
            "norm_shift": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if M < 1:
            raise ShapeError("need at least one expert")

    @property
    def M(self) -> int:
        return self.gate_w.shape[1]

    @property
    def d(self) -> int:
        return self.gate_w.shape[0]

    @classmethod
    def init(cls, d: int, M: int, rng: np.random.Generator, hidden: int | None = None,
             activation: str = "softplus", zero_output: bool = False) -> "MoEParams":
        h = 4 * d if hidden is None else hidden
        w2 = np.zeros((M, h, d)) if zero_output else rng.normal(0.0, 1.0 / np.sqrt(h), (M, h, d))
        return cls(
            gate_w=rng.normal(0.0, 1.0 / np.sqrt(d), (d, M)),
            gate_b=np.zeros(M),
            w1=rng.normal(0.0, 1.0 / np.sqrt(d), (M, d, h)),
            b1=np.zeros((M, h)),
            w2=w2,
            b2=np.zeros((M, d)),
            norm_scale=np.ones(d),
            norm_shift=np.zeros(d),
            activation=activation,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self) if f.name != "activation"}

    def watch(self, tape: Tape, prefix: str = "moe.") -> "MoEParams":
        return replace(self, **{k: tape.watch(v, prefix + k) for k, v in self.arrays().items()})


@dataclass(frozen=True)
class MoEOutput:
    tokens: Tensor  # [N, d]
    weights: Tensor  # [N, M]
    counts: np.ndarray  # [M] int, argmax assignments

    @property
    def M(self) -> int:
        return self.weights.shape[1]


def _check_tokens(q: Tensor, p: MoEParams) -> Tensor:
    q = T.as_tensor(q)
    if q.ndim != 2 or q.shape[0] < 1:
        raise ShapeError(f"token batch must be [N >= 1, d], got {q.shape}")
    if q.shape[1] != p.d:
        raise ShapeError(f"token dim {q.shape[1]} does not match gate input dim {p.d}")
    return q


def gate_weights(q, p: MoEParams) -> Tensor:
    q = _check_tokens(q, p)
    return T.softmax(q @ p.gate_w + p.gate_b, axis=-1)


def expert(q: Tensor, p: MoEParams, m: int) -> Tensor:
    act = ACTIVATIONS[p.activation]
    hidden = act(q @ p.w1[m] + p.b1[m])
    return hidden @ p.w2[m] + p.b2[m]


def hard_counts(weights: np.ndarray) -> np.ndarray:
    # np.argmax resolves ties to the lowest expert index
    return np.bincount(np.argmax(weights, axis=1), minlength=weights.shape[1])


def moe_forward(q, p: MoEParams) -> MoEOutput:
    """Every token visits every expert; outputs are mixed by the gate weights."""
    q = _check_tokens(q, p)
    w = gate_weights(q, p)
    out = None
    for m in range(p.M):
        term = w[:, m : m + 1] * expert(q, p, m)
        out = term if out is None else out + term
    return MoEOutput(out, w, hard_counts(w.data))


def load_balance_loss(out: MoEOutput) -> Tensor:
    """M * sum_m (mean_i w_i^m) * (n_m / N); counts enter as constants."""
    N = out.weights.shape[0]
    frac = out.counts.astype(np.float64) / N
    return T.sum_(T.mean(out.weights, axis=0) * frac) * float(out.M)


def layer_norm(q: Tensor, scale: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    mu = T.mean(q, axis=-1, keepdims=True)
    centered = q - mu
    var = T.mean(T.square(centered), axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * scale + shift


def fusion_forward(q, p: MoEParams) -> tuple[Tensor, MoEOutput]:
    """Residual block q + MoE(norm(q)); also returns the routing for the balance loss."""
    q = _check_tokens(q, p)
    out = moe_forward(layer_norm(q, p.norm_scale, p.norm_shift), p)
    return q + out.tokens, out


def fusion_block(q, p: MoEParams) -> Tensor:
    return fusion_forward(q, p)[0]


def total_loss(task_loss, balance_loss, beta: float) -> Tensor:
    task_loss, balance_loss = T.as_tensor(task_loss), T.as_tensor(balance_loss)
    if task_loss.size != 1 or balance_loss.size != 1:
        raise ShapeError("total_loss expects scalar losses")
    return task_loss + balance_loss * beta


def gate_entropy(weights: np.ndarray) -> float:
    """Mean per-token entropy of the gate distribution (nats)."""
    w = np.clip(weights, 1e-300, 1.0)
    return float(np.mean(-np.sum(weights * np.log(w), axis=1)))
