"""Command-line entry point: synth, train, eval, gradcheck, export.

Exit codes: 0 ok, 1 runtime failure, 2 bad input (schema, flags, dataset
format), 3 artifact mismatch (checkpoint/config/data incompatible or missing),
4 verification failure.

Set HYPERALIGN_LOG (e.g. INFO, DEBUG) for log output on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import HierarchySpec, PairDataset, load_dataset, save_dataset, split, synthesize
from .entailment import exterior_angle, half_aperture
from .errors import CheckpointError, ConfigError, HyperAlignError
from .fileio import atomic_write_text
from .trainer import Metrics, Model, TrainConfig, TrainingAborted, embed, evaluate, train, write_metrics_csv

EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA, EXIT_MISMATCH, EXIT_VERIFY = 0, 1, 2, 3, 4

log = logging.getLogger("hyperalign")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run config file


@dataclass(frozen=True)
class OutputNames:
    checkpoint: str = "model.hmva"
    metrics: str = "metrics.csv"
    config: str = "config.json"
    abort_checkpoint: str = "aborted.hmva"


@dataclass(frozen=True)
class RunConfig:
    """Parsed run config file: ``{"train": {...}, "data": {...}, "outputs": {...}}``."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: HierarchySpec = field(default_factory=HierarchySpec)
    outputs: OutputNames = field(default_factory=OutputNames)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "outputs": {f.name: getattr(self.outputs, f.name) for f in fields(OutputNames)},
        }


SECTIONS = {"train": TrainConfig, "data": HierarchySpec, "outputs": OutputNames}


def _key_line(text: str, key: str) -> int | None:
    needle = json.dumps(key)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate a run config document; every failure is a ConfigError naming line and field."""

    def fail(msg, path, key=None):
        line = _key_line(text, key) if key else None
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {path}: {msg}", field=path)

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    built = {}
    for section, value in doc.items():
        if section not in SECTIONS:
            fail(f"unknown section (expected one of {', '.join(SECTIONS)})", section, section)
        if not isinstance(value, dict):
            fail("must be a JSON object", section, section)
        cls = SECTIONS[section]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        for key, v in value.items():
            path = f"{section}.{key}"
            if key not in known:
                fail("unknown key", path, key)
            want = getattr(defaults, key)
            if not _type_ok(v, want):
                fail(f"expected {type(want).__name__}, got {type(v).__name__}", path, key)
        try:
            built[section] = cls(**value)
        except ConfigError as e:
            key = e.field or ""
            fail(str(e), f"{section}.{key}", key)
    return RunConfig(**built)


def read_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}", EXIT_SCHEMA) from e
    return parse_run_config(text, str(path))


# ---------------------------------------------------------------------------
# helpers


def _load_data(path) -> PairDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError(f"dataset not found: {path}", EXIT_MISMATCH) from e
    except OSError as e:
        raise CliError(f"cannot read dataset {path}: {e.strerror}", EXIT_MISMATCH) from e
    except ValueError as e:
        raise CliError(str(e), EXIT_SCHEMA) from e


def _metrics_json(m: Metrics) -> str:
    # NaN (contrastive loss of a single pair) is written as null to keep strict JSON
    row = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in m.to_dict().items()}
    return json.dumps(row, sort_keys=True)


def _echo(path, obj: dict) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eval_split(ds: PairDataset, cfg: TrainConfig, which: str) -> PairDataset:
    if which == "all":
        return ds
    train_ds, eval_ds = split(ds, cfg.eval_fraction, cfg.seed)
    return eval_ds if which == "eval" else train_ds


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    rc = read_run_config(args.spec)
    spec = rc.data if args.seed is None else HierarchySpec(**{**rc.data.to_dict(), "seed": args.seed})
    ds = synthesize(spec)
    out = Path(args.out)
    save_dataset(ds, out)
    _echo(out.with_name(out.name + ".json"), {"spec": spec.to_dict(), "seed": spec.seed, "records": len(ds)})
    print(f"wrote {len(ds)} records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = read_run_config(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.euclidean:
        overrides["euclidean"] = True
    cfg = TrainConfig(**{**rc.train.to_dict(), **overrides})
    ds = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out / rc.outputs.config, {**rc.to_dict(), "train": cfg.to_dict(), "dataset": str(args.data),
                                     "eval_split": "held-out leaves"})

    def on_abort(model, step):
        save_checkpoint(model, out / rc.outputs.abort_checkpoint)

    try:
        model, history = train(cfg, ds, on_abort=on_abort)
    except TrainingAborted as e:
        raise CliError(f"{e}; checkpoint saved to {out / rc.outputs.abort_checkpoint}", EXIT_RUNTIME) from e
    save_checkpoint(model, out / rc.outputs.checkpoint)
    write_metrics_csv(history, out / rc.outputs.metrics)
    print(_metrics_json(history[-1]))
    return EXIT_OK


def _load_model(args, ds: PairDataset) -> Model:
    expect = None
    if getattr(args, "config", None):
        expect = read_run_config(args.config).train
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISMATCH)
    return load_checkpoint(args.checkpoint, expect=expect, feature_dim=ds.feature_dim)


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    model = _load_model(args, ds)
    m = evaluate(model, _eval_split(ds, model.config, args.split))
    print(_metrics_json(m))
    return EXIT_OK


EXPORT_COLUMNS = ("leaf_id", "ancestor_level", "x_norm", "y_norm", "ext", "aper", "violation", "split")


def export_rows(model: Model, ds: PairDataset) -> str:
    cfg = model.config
    _, eval_ds = split(ds, cfg.eval_fraction, cfg.seed)
    held = set(eval_ds.leaf_set())
    with T.no_tape():
        batch, _ = embed(model.tensors(), ds.text, ds.image, cfg)
        ext = exterior_angle(batch.text, batch.image, cfg.cone()).data
        aper = half_aperture(batch.text, cfg.cone()).data
    xn = np.linalg.norm(batch.text.space.data, axis=1)
    yn = np.linalg.norm(batch.image.space.data, axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EXPORT_COLUMNS)
    for i, leaf in enumerate(ds.leaf_ids):
        w.writerow([
            ".".join(map(str, leaf)),
            int(ds.ancestor_level[i]),
            repr(float(xn[i])),
            repr(float(yn[i])),
            repr(float(ext[i])),
            repr(float(aper[i])),
            int(ext[i] > aper[i]),
            "eval" if leaf in held else "train",
        ])
    return buf.getvalue()


def cmd_export(args) -> int:
    ds = _load_data(args.data)
    model = _load_model(args, ds)
    atomic_write_text(args.out, export_rows(model, ds))
    print(f"wrote {len(ds)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_adjoint is not None and args.corrupt_adjoint not in T.ADJOINTS:
        raise CliError(f"--corrupt-adjoint: unknown op {args.corrupt_adjoint!r}", EXIT_SCHEMA)
    if args.corrupt_adjoint is None:
        rows = _gradcheck_rows(args)
    else:
        with T.corrupt_adjoint(args.corrupt_adjoint):
            rows = _gradcheck_rows(args)
    prims, losses = rows
    print(gradcheck.format_table(losses))
    print()
    print(gradcheck.format_table(prims))
    failed = [r.name for r in losses + prims if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _gradcheck_rows(args):
    return gradcheck.check_primitives(args.seed), gradcheck.check_losses(args.seed, args.size, args.points)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic hierarchical pair dataset")
    s.add_argument("--spec", help="run config JSON; its 'data' section is used (defaults if omitted)")
    s.add_argument("--out", required=True, help="dataset CSV to write; a <out>.json sidecar is written next to it")
    s.add_argument("--seed", type=int, help="override data.seed")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset, holding out whole leaves for evaluation")
    t.add_argument("--config", help="run config JSON ('train' and 'outputs' sections; defaults if omitted)")
    t.add_argument("--data", required=True, help="dataset CSV from 'synth'")
    t.add_argument("--out", required=True, help="output directory for checkpoint, metrics CSV and config echo")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--euclidean", action="store_true", help="ablation: identity projection and cosine similarity")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print metrics of a checkpoint as one JSON object")
    e.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    e.add_argument("--data", required=True, help="dataset CSV")
    e.add_argument("--config", help="run config JSON the checkpoint must be compatible with")
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval",
                   help="records to score: held-out leaves (default), training leaves, or everything")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference verification of losses and primitives")
    g.add_argument("--seed", type=int, default=0, help="seed for the random evaluation points (default 0)")
    g.add_argument("--size", choices=sorted(gradcheck.PRESETS), default="small",
                   help="problem size preset: tiny (B=2,n=4,M=2), small (B=4,n=8,M=3), medium (B=8,n=16,M=6)")
    g.add_argument("--points", type=int, default=50, help="random points per loss (default 50)")
    g.add_argument("--corrupt-adjoint", metavar="OP",
                   help="test hook: scale the adjoint of op kind OP by 1.01 to confirm the check catches it")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export", help="write per-record cone diagnostics as CSV")
    x.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    x.add_argument("--data", required=True, help="dataset CSV")
    x.add_argument("--out", required=True, help="CSV to write")
    x.add_argument("--config", help="run config JSON the checkpoint must be compatible with")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    level = os.environ.get("HYPERALIGN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except HyperAlignError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
