import numpy as np
import pytest
from scipy import stats

from hyperalign.data import (
    HierarchySpec,
    dumps_dataset,
    generate_tree,
    load_dataset,
    sample_pairs,
    save_dataset,
    split,
    synthesize,
)
from hyperalign.errors import ConfigError, SplitError


def test_spec_validation():
    for bad in ({"depth": 1}, {"branching": 1}, {"noise_sigma": -0.1}, {"pairs_per_leaf": 0}, {"seed": -1}):
        with pytest.raises(ConfigError) as e:
            HierarchySpec(**bad)
        assert e.value.field == next(iter(bad))


def test_smallest_tree_counts():
    tree = generate_tree(HierarchySpec(depth=2, branching=2))
    assert tree.paths == [(), (0,), (1,)]
    assert tree.prototypes.shape == (3, 32)
    assert tree.leaves == [(0,), (1,)]


def test_default_tree_counts():
    tree = generate_tree(HierarchySpec())
    assert len(tree.paths) == 1 + 4 + 16
    assert len(tree.leaves) == 16
    np.testing.assert_array_equal(tree.prototype(()), 0.0)


def test_tree_is_deterministic():
    a, b = generate_tree(HierarchySpec(seed=5)), generate_tree(HierarchySpec(seed=5))
    assert a.prototypes.tobytes() == b.prototypes.tobytes()
    assert generate_tree(HierarchySpec(seed=6)).prototypes.tobytes() != a.prototypes.tobytes()


def test_offsets_shrink_with_depth():
    by_level = {1: [], 2: [], 3: []}
    for seed in range(100):
        tree = generate_tree(HierarchySpec(depth=4, branching=2, seed=seed))
        for path in tree.paths[1:]:
            by_level[len(path)].append(np.linalg.norm(tree.prototype(path) - tree.prototype(path[:-1])))
    means = [np.mean(by_level[k]) for k in (1, 2, 3)]
    assert means[0] > means[1] > means[2]
    # chi distribution mean with 32 dof at scales 1, 1/2, 1/4
    np.testing.assert_allclose(means, np.array([1, 0.5, 0.25]) * stats.chi(32).mean(), rtol=0.05)


def test_record_count():
    spec = HierarchySpec(depth=3, branching=3, pairs_per_leaf=7)
    assert len(synthesize(spec)) == 9 * 7


def test_zero_noise_leaf_text_equals_image():
    ds = synthesize(HierarchySpec(noise_sigma=0.0))
    leaf_level = ds.ancestor_level == 2
    assert leaf_level.any()
    np.testing.assert_array_equal(ds.text[leaf_level], ds.image[leaf_level])


def test_text_node_is_ancestor_of_image_leaf():
    ds = synthesize(HierarchySpec(noise_sigma=0.0, seed=3))
    tree = generate_tree(HierarchySpec(noise_sigma=0.0, seed=3))
    for r in range(len(ds)):
        node = ds.text_nodes()[r]
        assert ds.leaf_ids[r][: len(node)] == node
        np.testing.assert_array_equal(ds.text[r], tree.prototype(node))
        np.testing.assert_array_equal(ds.image[r], tree.prototype(ds.leaf_ids[r]))


def test_ancestor_levels_uniform():
    ds = synthesize(HierarchySpec(pairs_per_leaf=625, seed=1))
    assert len(ds) == 10_000
    counts = np.bincount(ds.ancestor_level, minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01


def test_synthesis_is_pure():
    a, b = synthesize(HierarchySpec(seed=9)), synthesize(HierarchySpec(seed=9))
    assert dumps_dataset(a) == dumps_dataset(b)


def test_split_counts_and_disjoint():
    ds = synthesize(HierarchySpec())
    tr, ev = split(ds, 0.25, seed=0)
    assert len(ev.leaf_set()) == 4 and len(tr.leaf_set()) == 12
    assert not tr.leaf_set() & ev.leaf_set()
    assert len(tr) + len(ev) == len(ds)
    assert sorted(np.concatenate([tr.indices, ev.indices]).tolist()) == list(range(len(ds)))


def test_split_deterministic():
    ds = synthesize(HierarchySpec())
    a, b = split(ds, 0.25, seed=4), split(ds, 0.25, seed=4)
    assert a[1].indices.tolist() == b[1].indices.tolist()


def test_split_errors():
    ds = synthesize(HierarchySpec())
    for frac in (0.0, 1.0, 0.99):
        with pytest.raises(SplitError):
            split(ds, frac, seed=0)
    with pytest.raises(SplitError):
        split(ds, 0.01, seed=0)


def test_file_round_trip(tmp_path):
    ds = synthesize(HierarchySpec(depth=3, branching=2, seed=2))
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.text.tobytes() == ds.text.tobytes()
    assert back.image.tobytes() == ds.image.tobytes()
    assert back.leaf_ids == ds.leaf_ids
    assert back.ancestor_level.tolist() == ds.ancestor_level.tolist()
    assert path.read_text().splitlines()[0].startswith("leaf_id,ancestor_level,t0,")


def test_load_reports_line(tmp_path):
    text = dumps_dataset(synthesize(HierarchySpec(depth=2, branching=2, feature_dim=2, pairs_per_leaf=1)))
    lines = text.splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines[:2] + ["0,1,1.0,2.0"]) + "\n")
    with pytest.raises(ValueError, match=r"bad\.csv:3"):
        load_dataset(bad)
    bad.write_text("\n".join(lines[:2] + ["0,5,1.0,2.0,3.0,4.0"]) + "\n")
    with pytest.raises(ValueError, match="ancestor_level"):
        load_dataset(bad)
    bad.write_text("foo,bar\n")
    with pytest.raises(ValueError, match="header"):
        load_dataset(bad)
