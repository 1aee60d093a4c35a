"""Desk-scale training runs and the ablation sweep, shared by scripts and tests."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

from .data import HierarchySpec, PairDataset, split, synthesize
from .trainer import Metrics, Model, TrainConfig, evaluate, train

ABLATIONS = {
    "full": {},
    "no_entailment": {"lam": 0.0},
    "euclidean": {"euclidean": True},
}


def chance_band(n: int, sigmas: float = 3.0) -> tuple[float, float]:
    """R@1 interval of a random retriever over n candidates, as rates (mean +- sigmas * sd)."""
    p = 1.0 / n
    sd = math.sqrt(n * p * (1 - p))
    return max(0.0, (n * p - sigmas * sd) / n), min(1.0, (n * p + sigmas * sd) / n)


@dataclass
class DeskRun:
    config: TrainConfig
    data: PairDataset
    eval_data: PairDataset
    untrained: Metrics
    model: Model
    history: list[Metrics]
    seconds: float

    @property
    def final(self) -> Metrics:
        return self.history[-1]


def desk_run(seed: int = 0, spec: HierarchySpec | None = None, **overrides) -> DeskRun:
    """Synthesize data with ``seed`` and train the default config (plus overrides) on it."""
    spec = replace(spec or HierarchySpec(), seed=seed)
    cfg = TrainConfig(**{**TrainConfig().to_dict(), "seed": seed, **overrides})
    ds = synthesize(spec)
    _, eval_ds = split(ds, cfg.eval_fraction, cfg.seed)
    untrained = evaluate(Model.init(cfg, ds.feature_dim), eval_ds)
    t0 = time.perf_counter()
    model, history = train(cfg, ds)
    return DeskRun(cfg, ds, eval_ds, untrained, model, history, time.perf_counter() - t0)


def ablation(seeds=range(5), **overrides) -> dict[str, list[float]]:
    """Final held-out R@1 per variant and seed."""
    out: dict[str, list[float]] = {name: [] for name in ABLATIONS}
    for seed in seeds:
        for name, delta in ABLATIONS.items():
            run = desk_run(seed, **{**overrides, **delta})
            out[name].append(run.final.r1)
    return out
