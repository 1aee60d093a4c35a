"""Synthetic hierarchical (generic, specific) feature pairs.

A concept tree is grown from a zero root prototype; each child adds a Gaussian
offset whose scale halves per level. A record pairs a noisy prototype of one
ancestor-or-self of a leaf (the "text" side) with a noisy leaf prototype (the
"image" side), so the text node always entails the image leaf.

Dataset file layout (comma-separated, one header row)::

    leaf_id,ancestor_level,t0,...,t{F-1},v0,...,v{F-1}

``leaf_id`` is the dotted child-index path from the root (``"2.0"``), and
``ancestor_level`` counts edges from the root (0 = root, depth-1 = leaf), so the
text node is the first ``ancestor_level`` components of the path. ``t*`` are the
text features, ``v*`` the image features, written with ``repr`` so values
round-trip exactly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, SplitError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class HierarchySpec:
    depth: int = 3
    branching: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.1
    pairs_per_leaf: int = 10
    seed: int = 0

    def __post_init__(self):
        checks = {
            "depth": self.depth >= 2,
            "branching": self.branching >= 2,
            "feature_dim": self.feature_dim >= 1,
            "noise_sigma": self.noise_sigma >= 0,
            "pairs_per_leaf": self.pairs_per_leaf >= 1,
            "seed": 0 <= self.seed < 2**64,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}", field=name)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConceptTree:
    spec: HierarchySpec
    paths: list[tuple[int, ...]]  # breadth-first, root first
    prototypes: np.ndarray  # [num_nodes, feature_dim]

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.paths)}

    @property
    def leaves(self) -> list[tuple[int, ...]]:
        return [p for p in self.paths if len(p) == self.spec.depth - 1]

    def prototype(self, path) -> np.ndarray:
        return self.prototypes[self.index[tuple(path)]]


@dataclass
class PairDataset:
    text: np.ndarray  # [R, F]
    image: np.ndarray  # [R, F]
    leaf_ids: list[tuple[int, ...]]
    ancestor_level: np.ndarray  # [R] int
    indices: np.ndarray = field(default=None)  # positions in the parent dataset

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.leaf_ids))

    def __len__(self):
        return len(self.leaf_ids)

    @property
    def feature_dim(self) -> int:
        return self.text.shape[1]

    def text_nodes(self) -> list[tuple[int, ...]]:
        return [leaf[:lvl] for leaf, lvl in zip(self.leaf_ids, self.ancestor_level)]

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=int)
        return PairDataset(
            self.text[idx],
            self.image[idx],
            [self.leaf_ids[i] for i in idx],
            self.ancestor_level[idx],
            self.indices[idx],
        )

    def leaf_set(self) -> set[tuple[int, ...]]:
        return set(self.leaf_ids)


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    tree_ss, pair_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(tree_ss), np.random.default_rng(pair_ss)


def generate_tree(spec: HierarchySpec) -> ConceptTree:
    """Grow the concept tree breadth-first; offsets at level l have scale 2**-(l-1)."""
    rng, _ = _rngs(spec.seed)
    paths: list[tuple[int, ...]] = [()]
    protos = [np.zeros(spec.feature_dim)]
    frontier = [(0, ())]
    for level in range(1, spec.depth):
        scale = 0.5 ** (level - 1)
        nxt = []
        for parent_idx, parent in frontier:
            for k in range(spec.branching):
                path = parent + (k,)
                protos.append(protos[parent_idx] + scale * rng.standard_normal(spec.feature_dim))
                paths.append(path)
                nxt.append((len(paths) - 1, path))
        frontier = nxt
    return ConceptTree(spec, paths, np.array(protos))


def sample_pairs(tree: ConceptTree, spec: HierarchySpec | None = None) -> PairDataset:
    spec = spec or tree.spec
    _, rng = _rngs(spec.seed)
    text, image, leaf_ids, levels = [], [], [], []
    F = spec.feature_dim
    for leaf in tree.leaves:
        for _ in range(spec.pairs_per_leaf):
            level = int(rng.integers(0, len(leaf) + 1))
            text.append(tree.prototype(leaf[:level]) + spec.noise_sigma * rng.standard_normal(F))
            image.append(tree.prototype(leaf) + spec.noise_sigma * rng.standard_normal(F))
            leaf_ids.append(leaf)
            levels.append(level)
    return PairDataset(np.array(text), np.array(image), leaf_ids, np.array(levels, dtype=int))


def synthesize(spec: HierarchySpec) -> PairDataset:
    return sample_pairs(generate_tree(spec), spec)


def split(ds: PairDataset, eval_fraction: float, seed: int) -> tuple[PairDataset, PairDataset]:
    """Hold out whole leaves: round(eval_fraction * leaves) of them go to eval."""
    if not 0 < eval_fraction < 1:
        raise SplitError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    leaves = sorted(ds.leaf_set())
    n_eval = int(round(eval_fraction * len(leaves)))
    if n_eval < 1:
        raise SplitError(f"eval_fraction {eval_fraction} holds out no leaves out of {len(leaves)}")
    if n_eval >= len(leaves):
        raise SplitError(f"eval_fraction {eval_fraction} leaves no training leaves out of {len(leaves)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    held = {leaves[i] for i in rng.choice(len(leaves), size=n_eval, replace=False)}
    is_eval = np.array([leaf in held for leaf in ds.leaf_ids])
    return ds.subset(np.flatnonzero(~is_eval)), ds.subset(np.flatnonzero(is_eval))


# ---------------------------------------------------------------------------
# file format


def _leaf_str(path: tuple[int, ...]) -> str:
    return ".".join(str(k) for k in path)


def dumps_dataset(ds: PairDataset) -> str:
    F = ds.feature_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["leaf_id", "ancestor_level"] + [f"t{i}" for i in range(F)] + [f"v{i}" for i in range(F)])
    for r in range(len(ds)):
        w.writerow(
            [_leaf_str(ds.leaf_ids[r]), int(ds.ancestor_level[r])]
            + [repr(float(x)) for x in ds.text[r]]
            + [repr(float(x)) for x in ds.image[r]]
        )
    return buf.getvalue()


def save_dataset(ds: PairDataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def load_dataset(path) -> PairDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0]
    if header[:2] != ["leaf_id", "ancestor_level"] or (len(header) - 2) % 2:
        raise ValueError(f"{path}: unrecognised header")
    F = (len(header) - 2) // 2
    text, image, leaf_ids, levels = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        leaf = tuple(int(k) for k in row[0].split(".")) if row[0] else ()
        level = int(row[1])
        if not 0 <= level <= len(leaf):
            raise ValueError(f"{path}:{lineno}: ancestor_level {level} outside 0..{len(leaf)}")
        vals = np.array([float(x) for x in row[2:]])
        text.append(vals[:F])
        image.append(vals[F:])
        leaf_ids.append(leaf)
        levels.append(level)
    return PairDataset(
        np.array(text).reshape(-1, F), np.array(image).reshape(-1, F), leaf_ids, np.array(levels, dtype=int)
    )
