"""End-to-end training: linear encoders -> fusion block -> hyperboloid -> losses.

Per batch, text and image encoder outputs are stacked into one token batch of
2B tokens, passed through the residual soft-MoE block, split back, lifted onto
the hyperboloid with the origin exponential map and scored with the alignment
objective plus the weighted balance regularizer.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import PairDataset, split
from .entailment import AlignmentBatch, ConeConfig, alignment_losses, cone_violation, similarity_matrix
from .errors import ConfigError, DomainError, HyperAlignError, OptimError
from .fileio import atomic_write_text
from .lorentz import HyperboloidPoint, exp_map_origin
from .softmoe import MoEOutput, MoEParams, fusion_forward, gate_entropy, load_balance_loss, total_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    steps: int = 5000
    c: float = 0.1
    lam: float = 0.1
    M: int = 6
    beta: float = 0.01
    K: float = 0.1
    embed_dim: int = 16
    tau_init: float = 0.07
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 500
    eval_fraction: float = 0.25
    euclidean: bool = False
    activation: str = "softplus"

    def __post_init__(self):
        positive = ("lr", "batch", "c", "M", "K", "embed_dim", "tau_init", "adam_eps", "eval_interval")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}", field=name)
        for name in ("steps", "lam", "beta", "seed"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}", field=name)
        for name in ("adam_b1", "adam_b2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)", field=name)
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)", field="eval_fraction")
        if self.activation not in ("softplus", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}", field="activation")

    @property
    def geometry(self) -> str:
        return "euclidean" if self.euclidean else "lorentz"

    def cone(self) -> ConeConfig:
        return ConeConfig(K=self.K, c=self.c, lam=self.lam, tau=self.tau_init)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}", field=unknown[0])
        return cls(**d)


@dataclass
class Model:
    config: TrainConfig
    feature_dim: int
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, cfg: TrainConfig, feature_dim: int) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        n, F = cfg.embed_dim, feature_dim
        params = {
            "text_enc.weight": rng.normal(0.0, 1.0 / math.sqrt(F), (F, n)),
            "text_enc.bias": np.zeros(n),
            "image_enc.weight": rng.normal(0.0, 1.0 / math.sqrt(F), (F, n)),
            "image_enc.bias": np.zeros(n),
        }
        moe = MoEParams.init(n, cfg.M, rng, activation=cfg.activation)
        params.update({f"moe.{k}": v for k, v in moe.arrays().items()})
        params["log_tau"] = np.array(math.log(cfg.tau_init))
        return cls(cfg, F, params)

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v, k) for k, v in self.params.items()}


class ForwardOutput(NamedTuple):
    total: Tensor
    contrastive: Tensor
    entailment: Tensor
    balance: Tensor
    batch: AlignmentBatch
    moe: MoEOutput


def _moe_params(p: dict[str, Tensor], activation: str) -> MoEParams:
    return MoEParams(**{k[4:]: v for k, v in p.items() if k.startswith("moe.")}, activation=activation)


def embed(p: dict[str, Tensor], text, image, cfg: TrainConfig) -> tuple[AlignmentBatch, MoEOutput]:
    """Encode, fuse and project a batch of raw feature pairs."""
    text, image = T.as_tensor(text), T.as_tensor(image)
    B = text.shape[0]
    l_enc = text @ p["text_enc.weight"] + p["text_enc.bias"]
    v_enc = image @ p["image_enc.weight"] + p["image_enc.bias"]
    fused, moe = fusion_forward(T.concat([l_enc, v_enc], axis=0), _moe_params(p, cfg.activation))
    l_tan, v_tan = fused[:B], fused[B:]
    if cfg.euclidean:
        x, y = HyperboloidPoint(l_tan, cfg.c), HyperboloidPoint(v_tan, cfg.c)
    else:
        x, y = exp_map_origin(l_tan, cfg.c), exp_map_origin(v_tan, cfg.c)
    return AlignmentBatch(x, y), moe


def forward(p: dict[str, Tensor], text, image, cfg: TrainConfig) -> ForwardOutput:
    """Total objective (alignment + beta * balance) and its components."""
    batch, moe = embed(p, text, image, cfg)
    losses = alignment_losses(batch, cfg.cone(), temperature=T.exp(p["log_tau"]), geometry=cfg.geometry)
    balance = load_balance_loss(moe)
    return ForwardOutput(total_loss(losses.total, balance, cfg.beta), losses.contrastive, losses.entailment, balance, batch, moe)


def loss_and_grads(model: Model, text, image) -> tuple[ForwardOutput, dict[str, np.ndarray]]:
    with Tape() as tape:
        p = model.tensors(tape)
        out = forward(p, text, image, model.config)
    grads = T.backward(out.total, tape)
    return out, {k: grads[p[k]] for k in model.params}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise OptimError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}", name)
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name}", name)
    t = state.step + 1
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    new_params, m_new, v_new = {}, {}, {}
    for name, w in params.items():
        g = grads.get(name, np.zeros_like(w))
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if not np.all(np.isfinite(new_params[name])):
            raise OptimError(f"parameter {name} became non-finite", name)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = (
    "step",
    "geometry",
    "contrastive",
    "entailment",
    "balance",
    "total",
    "r1_i2t",
    "r1_t2i",
    "r1",
    "cone_violation",
    "gate_entropy",
)


@dataclass(frozen=True)
class Metrics:
    step: int
    geometry: str
    contrastive: float
    entailment: float
    balance: float
    total: float
    r1_i2t: float
    r1_t2i: float
    r1: float
    cone_violation: float
    gate_entropy: float

    def to_dict(self) -> dict:
        return asdict(self)


def recall_at_1(sim: np.ndarray) -> tuple[float, float]:
    """(image->text, text->image) top-1 hit rates against the paired partner.

    ``sim`` is indexed [text, image] and record i's partner sits on the
    diagonal. Ties resolve to the lowest index.
    """
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    idx = np.arange(n)
    i2t = np.argmax(sim, axis=0) == idx
    t2i = np.argmax(sim, axis=1) == idx
    return float(i2t.mean()), float(t2i.mean())


def evaluate(model: Model, ds: PairDataset, step: int = 0) -> Metrics:
    """Losses, retrieval and cone statistics of a frozen model on ``ds`` (one batch)."""
    if len(ds) == 0:
        raise ValueError("evaluation split is empty")
    cfg = model.config
    with T.no_tape():
        p = model.tensors()
        batch, moe = embed(p, ds.text, ds.image, cfg)
        cone = cfg.cone()
        viol = cone_violation(batch.text, batch.image, cone).data
        entail = float(viol.mean())
        balance = load_balance_loss(moe).item()
        if len(ds) >= 2:
            losses = alignment_losses(batch, cone, temperature=T.exp(p["log_tau"]), geometry=cfg.geometry)
            cont = losses.contrastive.item()
        else:
            cont = float("nan")
        sim = similarity_matrix(batch, cfg.geometry).data
    r_i2t, r_t2i = recall_at_1(sim)
    return Metrics(
        step=step,
        geometry=cfg.geometry,
        contrastive=cont,
        entailment=entail,
        balance=balance,
        total=cont + cfg.lam * entail + cfg.beta * balance,
        r1_i2t=r_i2t,
        r1_t2i=r_t2i,
        r1=0.5 * (r_i2t + r_t2i),
        cone_violation=float(np.mean(viol > 0)),
        gate_entropy=gate_entropy(moe.weights.data),
    )


def metrics_csv(history: list[Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in history:
        row = m.to_dict()
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(history: list[Metrics], path) -> None:
    atomic_write_text(path, metrics_csv(history))


# ---------------------------------------------------------------------------
# training loop


class TrainingAborted(HyperAlignError, RuntimeError):
    def __init__(self, message, model: Model, step: int):
        super().__init__(message)
        self.model = model
        self.step = step


class _Batches:
    """Seeded epoch permutations; the short tail of each epoch is dropped."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        idx = self.perm[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return idx


def train(cfg: TrainConfig, ds: PairDataset, *, on_abort=None) -> tuple[Model, list[Metrics]]:
    """Split off held-out leaves, then run ``cfg.steps`` Adam updates.

    Metrics on the held-out split are recorded at step 0, every
    ``eval_interval`` steps and at the final step. ``on_abort(model, step)`` is
    called before a :class:`TrainingAborted` propagates.
    """
    train_ds, eval_ds = split(ds, cfg.eval_fraction, cfg.seed)
    if len(train_ds) < 2:
        raise ValueError("training split needs at least two records")
    model = Model.init(cfg, ds.feature_dim)
    history = [evaluate(model, eval_ds, step=0)]
    batches = _Batches(len(train_ds), cfg.batch, np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])))
    state = AdamState()
    for step in range(1, cfg.steps + 1):
        idx = batches.next()
        try:
            out, grads = loss_and_grads(model, train_ds.text[idx], train_ds.image[idx])
            params, state = adam_step(model.params, grads, state, cfg)
        except (DomainError, OptimError) as e:
            if on_abort is not None:
                on_abort(model, step)
            raise TrainingAborted(f"training aborted at step {step}: {e}", model, step) from e
        model = Model(cfg, model.feature_dim, params)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            history.append(evaluate(model, eval_ds, step=step))
            m = history[-1]
            log.info("step %d loss %.4f r1 %.3f viol %.3f", step, m.total, m.r1, m.cone_violation)
    return model, history
