import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajsynth.core import Dataset
from trajsynth.segmentation import (
    LatentCell,
    SegmentationIndex,
    build_tree,
    cell_diagonal,
    condition_of,
    condition_vector,
    conditions_for,
    depth_for,
    null_condition,
    project_means,
)
from trajsynth.vae import VaeConfig, build_vae


def _cell(lo, hi):
    return LatentCell(0, np.array(lo, float), np.array(hi, float), ())


@pytest.mark.parametrize(
    "lo, hi, d",
    [((0, 0), (1, 1), np.sqrt(2)), ((0, 0), (3, 4), 5.0), ((0, 0, 0, 0), (1, 1, 1, 1), 2.0)],
)
def test_cell_diagonal(lo, hi, d):
    assert cell_diagonal(_cell(lo, hi)) == pytest.approx(d, rel=1e-15)


def test_condition_vector_layout():
    np.testing.assert_array_equal(condition_vector(_cell((0, 0), (2, 4))), [1, 2, 1, 2])
    np.testing.assert_array_equal(null_condition(3), np.zeros(6))


def test_depth_zero_single_cell():
    x = np.random.default_rng(0).normal(size=(10, 3))
    idx = build_tree(x, 0)
    assert len(idx.cells) == 1 and len(idx.cells[0].member_ids) == 10


def test_collinear_median_split():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    idx = build_tree(x, 1, ids=list("abcd"))
    assert [c.member_ids for c in idx.cells] == [("a", "b"), ("c", "d")]


def test_depth_two_eight_points():
    x = np.array([[0, 0], [1, 5], [2, 1], [3, 7], [4, 2], [5, 6], [6, 3], [7, 4]], dtype=float)
    idx = build_tree(x, 2)
    assert len(idx.cells) == 4
    members = sorted(int(m) for c in idx.cells for m in c.member_ids)
    assert members == list(range(8))
    # root splits x (spread 7 == spread 7, first widest dim wins) at median 3.5
    assert idx.dims[0] == 0 and idx.thresholds[0] == 3.5
    assert sorted(len(c.member_ids) for c in idx.cells) == [2, 2, 2, 2]


def test_median_ties_go_left():
    x = np.array([[0.0], [1.0], [1.0], [1.0], [2.0]])
    idx = build_tree(x, 1)
    assert idx.thresholds[0] == 1.0
    assert [len(c.member_ids) for c in idx.cells] == [4, 1]


def test_early_stop_on_small_branches():
    x = np.random.default_rng(1).normal(size=(5, 2))
    idx = build_tree(x, 6)
    assert len(idx.cells) == 5
    assert all(len(c.member_ids) == 1 for c in idx.cells)


def test_complete_tree_has_two_pow_depth_leaves():
    x = np.random.default_rng(2).normal(size=(256, 4))
    assert len(build_tree(x, 5).cells) == 32


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        build_tree(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        build_tree(np.zeros((3, 2)), -1)
    with pytest.raises(ValueError):
        build_tree(np.array([[np.nan, 0.0]]), 1)


@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.integers(1, 4)), elements=st.floats(-10, 10)),
       st.integers(0, 6))
def test_partition_containment_lookup(x, depth):
    idx = build_tree(x, depth)
    ids = [str(i) for i in range(len(x))]
    counts = sum(len(c.member_ids) for c in idx.cells)
    assert counts == len(x)
    owner = idx.member_map()
    assert sorted(owner) == sorted(ids)
    for c in idx.cells:
        assert np.all(c.lower <= c.upper)
        assert np.all(c.upper - c.lower > 0)
        assert np.any(condition_vector(c) != 0)
        for m in c.member_ids:
            assert c.contains(x[int(m)])
    cells, clipped = idx.lookup_many(x)
    assert not clipped.any()
    assert [owner[i] for i in ids] == cells.tolist()


@given(st.integers(0, 2**32 - 1))
def test_cells_tile_the_box(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 3))
    idx = build_tree(x, 4)
    vol = np.prod(idx.box_upper - idx.box_lower)
    assert sum(np.prod(c.upper - c.lower) for c in idx.cells) == pytest.approx(vol, rel=1e-9)
    q = rng.uniform(idx.box_lower, idx.box_upper, size=(200, 3))
    found, _ = idx.lookup_many(q)
    for p, k in zip(q, found):
        inside = [c.cell_id for c in idx.cells if c.contains(p)]
        assert k in inside


def test_lookup_clips_outside_points():
    x = np.random.default_rng(3).normal(size=(20, 2))
    idx = build_tree(x, 2)
    cells, clipped = idx.lookup_many(np.array([[100.0, 100.0], [0.0, 0.0]]))
    assert clipped.tolist() == [True, False]
    assert idx.cells[cells[0]].contains(np.clip([100.0, 100.0], idx.box_lower, idx.box_upper))


def test_condition_of_matches_membership():
    x = np.random.default_rng(4).normal(size=(64, 4))
    ids = [f"t{i}" for i in range(64)]
    idx = build_tree(dict(zip(ids, x)), 3)
    table = conditions_for(idx, ids)
    for i in range(64):
        np.testing.assert_array_equal(condition_of(idx, x[i]), table[i])
        cell = idx.cells[idx.member_map()[ids[i]]]
        np.testing.assert_array_equal(condition_of(idx, cell.center), table[i])


def test_json_roundtrip(tmp_path):
    x = np.random.default_rng(5).normal(size=(50, 3))
    idx = build_tree(x, 3)
    idx.save(tmp_path / "i.json")
    back = SegmentationIndex.load(tmp_path / "i.json")
    assert np.array_equal(back.dims, idx.dims) and np.array_equal(back.thresholds, idx.thresholds)
    assert [c.member_ids for c in back.cells] == [c.member_ids for c in idx.cells]
    q = np.random.default_rng(6).normal(size=(100, 3))
    assert np.array_equal(back.lookup_many(q)[0], idx.lookup_many(q)[0])


def test_depth_for():
    assert depth_for(1) == 0 and depth_for(65_536) == 16 and depth_for(4096) == 12 and depth_for(5) == 3


def test_project_means_one_per_trajectory():
    model = build_vae(8, VaeConfig(channels=(4,), seed=0))
    import torch

    with torch.no_grad():
        model.encoder.mu.weight.normal_()
    pts = np.random.default_rng(7).uniform(-1, 1, (6, 8, 2))
    pts[5] = pts[0]
    means = project_means(model, Dataset(pts, tuple("abcdef")))
    assert list(means) == list("abcdef")
    assert np.array_equal(means["a"], means["f"])
    assert all(np.isfinite(v).all() for v in means.values())
