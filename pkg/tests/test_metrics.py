import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import w1_counts_hungarian
from trajsynth.metrics import (
    IDENTITY,
    METRICS,
    Grid,
    InfrastructureNetwork,
    MetricError,
    MetricReport,
    MetricSettings,
    avg_speed_distance,
    bootstrap_generator,
    density_error,
    evaluate,
    format_table,
    g_rank,
    location_implausibility,
    map_reconstruction,
    pattern_score,
    top_cells,
    traffic_flow_distance,
    transition_counts,
    transition_prob_distance,
    transport_cost,
    wasserstein_cells,
)

G2 = Grid((0.0, 0.0), (2.0, 1.0), 2, 1)  # two unit cells, centers (0.5, 0.5) and (1.5, 0.5)


def at_cells(grid, cells):
    """Trajectories placed at the centers of the given ``(N, L)`` cell indices."""
    return grid.centers(np.asarray(cells))


def seg_dist_brute(p, a, b):
    ab = b - a
    den = ab @ ab
    t = 0.0 if den == 0 else min(1.0, max(0.0, (p - a) @ ab / den))
    return float(np.linalg.norm(p - (a + t * ab)))


@pytest.fixture(scope="module")
def walks():
    rng = np.random.default_rng(0)
    steps = rng.normal(scale=0.04, size=(300, 16, 2))
    return np.clip(rng.uniform(-0.6, 0.6, (300, 1, 2)) + np.cumsum(steps, axis=1), -1, 1)


# --------------------------------------------------------------------------
# grid


def test_grid_cells_and_clamping():
    g = Grid((0.0, 0.0), (4.0, 2.0), 4, 2)
    np.testing.assert_array_equal(g.index(np.array([[0.5, 0.5], [3.5, 1.5], [-9, -9], [9, 9], [4.0, 2.0]])),
                                  [0, 7, 0, 7, 7])
    np.testing.assert_allclose(g.centers([0, 7]), [[0.5, 0.5], [3.5, 1.5]])
    assert g.cell_diagonal == pytest.approx(math.sqrt(2))
    assert g.adjacent(0, 5) and not g.adjacent(0, 2) and g.adjacent(3, 3)
    with pytest.raises(ValueError):
        Grid(cells_x=0)
    with pytest.raises(ValueError):
        Grid((0, 0), (0, 1))


@given(arrays(np.float64, (50, 2), elements=st.floats(-3, 3)))
def test_every_point_maps_to_one_cell(p):
    g = Grid(cells_x=7, cells_y=5)
    idx = g.index(p)
    assert np.all((idx >= 0) & (idx < g.n_cells))
    inside = np.all(np.abs(p) < 1, axis=1)
    c = g.centers(idx[inside])
    assert np.all(np.abs(p[inside] - c) <= g.cell_size / 2 + 1e-12)


# --------------------------------------------------------------------------
# density, pattern, rank


def test_density_error_examples(walks):
    assert density_error(walks, walks) == 0.0
    assert density_error(at_cells(G2, [[0]]), at_cells(G2, [[1]]), G2) == 2.0
    assert density_error(at_cells(G2, [[0, 0]]), at_cells(G2, [[0, 1]]), G2) == 1.0


def test_pattern_score_examples(walks):
    assert pattern_score(walks, walks) == 1.0
    assert pattern_score(at_cells(G2, [[0]]), at_cells(G2, [[1]]), G2, 1) == 0.0
    g = Grid((0.0, 0.0), (20.0, 1.0), 20, 1)
    a = at_cells(g, [list(range(10))])
    b = at_cells(g, [list(range(5, 15))])
    assert pattern_score(a, b, g, 10) == 0.5
    with pytest.raises(ValueError):
        pattern_score(a, b, g, 0)


def test_top_cells_tie_break():
    hist = np.array([0, 2, 5, 2, 0, 5])
    np.testing.assert_array_equal(top_cells(hist, 3), [2, 5, 1])
    np.testing.assert_array_equal(top_cells(hist, 10), [2, 5, 1, 3])


def test_g_rank_examples(walks):
    assert g_rank(walks, walks) == 1.0
    g = Grid((0.0, 0.0), (3.0, 1.0), 3, 1)
    real = at_cells(g, [[0, 0, 0, 1, 1, 2]])
    syn = at_cells(g, [[2, 2, 2, 1, 1, 0]])
    assert g_rank(real, syn, g) == pytest.approx(-1.0)
    assert g_rank(at_cells(G2, [[0]]), at_cells(G2, [[0]]), G2) is None


# --------------------------------------------------------------------------
# speeds


def test_speed_examples(walks):
    assert avg_speed_distance(walks, walks) == 0.0
    line = lambda v: np.stack([np.column_stack([np.arange(4) * v, np.zeros(4)])])  # noqa: E731
    assert avg_speed_distance(line(1.0), line(3.0)) == pytest.approx(2.0)
    real = np.concatenate([line(1.0), line(2.0)])
    syn = np.concatenate([line(2.0), line(3.0)])
    assert avg_speed_distance(real, syn) == pytest.approx(1.0)
    assert avg_speed_distance(real, syn, step_seconds=2.0, meters_per_unit=10.0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        avg_speed_distance(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))


# --------------------------------------------------------------------------
# network


def test_network_examples():
    net = InfrastructureNetwork(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(net.distances(np.array([[0.5, 0.3], [2.0, 0.0], [0.2, 0.0]])), [0.3, 1.0, 0.0])
    with pytest.raises(MetricError):
        InfrastructureNetwork(np.empty((0, 2)), np.empty((0, 2)))


@pytest.mark.parametrize("backend", ["numba", "numpy"])
@given(seed=st.integers(0, 2**31), n_seg=st.integers(1, 60))
def test_nearest_segment_matches_brute_force(backend, seed, n_seg):
    from trajsynth import _accel

    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (n_seg, 2))
    b = a + rng.normal(scale=rng.uniform(0.01, 0.8), size=(n_seg, 2))
    p = rng.uniform(-1.5, 1.5, (40, 2))
    net = InfrastructureNetwork(a, b, n_buckets=3)
    expected = [min(seg_dist_brute(q, a[k], b[k]) for k in range(n_seg)) for q in p]
    with _accel.backend(backend):
        got = net.distances(p)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_network_filters_non_adjacent_transitions():
    g = Grid((0.0, 0.0), (4.0, 1.0), 4, 1)
    real = np.array([[[0.5, 0.5], [1.5, 0.5], [3.5, 0.5]]])
    net = InfrastructureNetwork.from_real(real, g)
    # the jump from cell 1 to cell 3 is dropped; its midpoint is 1 away from the remaining network
    assert net.distances(np.array([[2.5, 0.5]]))[0] == pytest.approx(1.0)
    assert map_reconstruction(real, net) == 0.0


def test_location_implausibility_examples():
    net = InfrastructureNetwork(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
    on = np.array([[[0.1, 0.0], [0.9, 0.0]]])
    far = np.array([[[0.5, 1.0], [0.5, -1.0]]])
    assert location_implausibility(on, net, 0.1) == 0.0
    assert location_implausibility(far, net, 0.1) == 1.0
    assert location_implausibility(np.concatenate([on, far]), net, 0.1) == 0.5
    with pytest.raises(ValueError):
        location_implausibility(on, net, 0.0)


# --------------------------------------------------------------------------
# transport


@given(seed=st.integers(0, 2**31), k=st.integers(2, 6))
def test_wasserstein_cells_matches_hungarian(seed, k):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1, 1, (k, 2))
    a = rng.multinomial(12, np.ones(k) / k)
    b = rng.multinomial(12, np.ones(k) / k)
    assert wasserstein_cells(a, b, centers) == pytest.approx(w1_counts_hungarian(a, b, centers), abs=1e-9)


def test_transport_column_generation_matches_dense():
    rng = np.random.default_rng(1)
    n, m = 80, 90
    cost = rng.uniform(0, 1, (n, m))
    supply = rng.uniform(0.1, 1, n)
    demand = rng.uniform(0.1, 1, m)
    demand *= supply.sum() / demand.sum()
    sparse = transport_cost(cost, supply, demand, dense_limit=0, k_nearest=3)
    dense = transport_cost(cost, supply, demand, dense_limit=10**9)
    assert sparse == pytest.approx(dense, rel=1e-9)


def test_wasserstein_empty_raises():
    with pytest.raises(MetricError):
        wasserstein_cells([0, 0], [1, 0], np.zeros((2, 2)))


def _row_oracle(r, s, centers):
    # expand both rows to the same integer total, then assign
    r, s = np.asarray(r, dtype=np.int64), np.asarray(s, dtype=np.int64)
    return w1_counts_hungarian(r * s.sum(), s * r.sum(), centers)


def transition_oracle(real, syn, grid):
    R = transition_counts(real, grid).toarray().astype(np.int64)
    S = transition_counts(syn, grid).toarray().astype(np.int64)
    centers = grid.centers()
    total = R.sum()
    out = 0.0
    for i in range(grid.n_cells):
        if R[i].sum() == 0:
            continue
        w = grid.diameter if S[i].sum() == 0 else _row_oracle(R[i], S[i], centers)
        out += R[i].sum() / total * w
    return out


def test_transition_examples(walks):
    assert transition_prob_distance(walks, walks) == 0.0
    # real row (1, 0), synthetic row (0.5, 0.5), centers 1 apart
    real = at_cells(G2, [[0, 0]])
    syn = at_cells(G2, [[0, 0], [0, 1]])
    assert transition_prob_distance(real, syn, G2) == pytest.approx(0.5)
    # unit mass moved to the adjacent cell
    assert transition_prob_distance(at_cells(G2, [[0, 0]]), at_cells(G2, [[0, 1]]), G2) == pytest.approx(1.0)
    # source never left in synthetic data: diameter penalty
    assert transition_prob_distance(at_cells(G2, [[0, 0]]), at_cells(G2, [[1, 1]]), G2) == pytest.approx(1.0)
    with pytest.raises(MetricError):
        transition_prob_distance(np.zeros((1, 1, 2)), walks, G2)


@given(seed=st.integers(0, 2**31))
def test_transition_matches_oracle_on_small_grids(seed):
    rng = np.random.default_rng(seed)
    g = Grid((0.0, 0.0), (2.0, 2.0), 2, 2)
    real = at_cells(g, rng.integers(0, 4, (5, 4)))
    syn = at_cells(g, rng.integers(0, 4, (6, 4)))
    assert transition_prob_distance(real, syn, g) == pytest.approx(transition_oracle(real, syn, g), abs=1e-9)


def traffic_oracle(real, syn, grid, horizon):
    rc, sc = grid.index(real), grid.index(syn)
    n = grid.n_cells
    centers = grid.centers()
    pooled = np.zeros((n, n))
    np.add.at(pooled, (sc[:, :-1].ravel(), sc[:, 1:].ravel()), 1.0)
    p = np.bincount(rc[:, 0], minlength=n) / rc.shape[0]
    total = 0.0
    for step in range(horizon):
        C = np.zeros((n, n))
        np.add.at(C, (sc[:, step], sc[:, step + 1]), 1.0)
        nxt = np.zeros(n)
        for i in range(n):
            if p[i] == 0:
                continue
            row = C[i] if C[i].sum() else pooled[i] if pooled[i].sum() else np.eye(n)[i]
            nxt += p[i] * row / row.sum()
        p = nxt
        q = np.bincount(rc[:, step + 1], minlength=n) / rc.shape[0]
        # p has rational entries; expand on a fine integer lattice is awkward, so solve the LP directly
        total += _lp_w1(p, q, centers)
    return total / horizon


def _lp_w1(p, q, centers):
    from scipy.optimize import linprog

    n = len(p)
    cost = np.linalg.norm(centers[:, None] - centers[None], axis=2).ravel()
    A = np.zeros((2 * n, n * n))
    for i in range(n):
        A[i, i * n : (i + 1) * n] = 1
        A[n + i, i::n] = 1
    res = linprog(cost, A_eq=A, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    return res.fun


@given(seed=st.integers(0, 2**31))
def test_traffic_flow_matches_oracle_on_small_grids(seed):
    rng = np.random.default_rng(seed)
    g = Grid((0.0, 0.0), (2.0, 2.0), 2, 2)
    real = at_cells(g, rng.integers(0, 4, (7, 5)))
    syn = at_cells(g, rng.integers(0, 4, (4, 5)))
    for h in (1, 4):
        assert traffic_flow_distance(real, syn, g, h) == pytest.approx(traffic_oracle(real, syn, g, h), abs=1e-9)


def test_traffic_flow_examples(walks):
    assert traffic_flow_distance(walks, walks) == pytest.approx(0.0, abs=1e-12)
    # real data moves A -> B in one step; a frozen synthetic chain keeps it at A
    real = at_cells(G2, [[0, 1]])
    frozen = at_cells(G2, [[0, 0], [1, 1]])
    assert traffic_flow_distance(real, frozen, G2, 1) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        traffic_flow_distance(real, frozen, G2, 0)
    with pytest.raises(ValueError):
        traffic_flow_distance(real, frozen, G2, 2)


def test_traffic_flow_markov_chain_feeds_its_own_matrix():
    g = Grid((0.0, 0.0), (3.0, 1.0), 3, 1)
    P = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    rng = np.random.default_rng(0)
    n, L = 10_000, 6
    cells = np.empty((n, L), dtype=np.int64)
    cells[:, 0] = rng.integers(0, 3, n)
    for t in range(1, L):
        u = rng.random(n)
        cells[:, t] = (u[:, None] > np.cumsum(P[cells[:, t - 1]], axis=1)).sum(axis=1)
    real = at_cells(g, cells)
    assert traffic_flow_distance(real, real, g) < 0.05


# --------------------------------------------------------------------------
# evaluation and protocol


def test_identity_values(walks):
    values = evaluate(walks, walks, MetricSettings(grid=Grid(cells_x=16, cells_y=16), top_n=20))
    assert set(values) == set(METRICS)
    for name in METRICS:
        assert values[name] == pytest.approx(IDENTITY[name], abs=1e-12), name


@given(seed=st.integers(0, 2**31))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    real = rng.uniform(-1, 1, (20, 6, 2))
    syn = rng.uniform(-1.5, 1.5, (15, 6, 2))
    v = evaluate(real, syn, MetricSettings(grid=Grid(cells_x=8, cells_y=8), top_n=10))
    assert 0 <= v["density_error"] <= 2
    assert 0 <= v["pattern_score"] <= 1
    assert 0 <= v["location_implausibility"] <= 1
    assert v["g_rank"] is None or -1 <= v["g_rank"] <= 1
    for k in ("avg_speed", "map_reconstruction", "transition_prob", "traffic_flow"):
        assert v[k] >= 0


def test_protocol_report(walks, tmp_path):
    from trajsynth.metrics import run_protocol

    s = MetricSettings(grid=Grid(cells_x=16, cells_y=16), top_n=20)
    one = run_protocol(bootstrap_generator(walks), walks, n_runs=1, n_samples=200, settings=s, label="boot")
    assert all(one.std(m) == 0.0 for m in METRICS)
    rep = run_protocol(bootstrap_generator(walks), walks, n_runs=3, n_samples=200, seed=4, settings=s, label="boot")
    assert rep.n_runs == 3 and len(rep.to_dict()["metrics"]) == 8
    again = run_protocol(bootstrap_generator(walks), walks, n_runs=3, n_samples=200, seed=4, settings=s)
    assert again.values == rep.values
    rep.save(tmp_path / "m.json")
    back = MetricReport.from_dict(json.loads((tmp_path / "m.json").read_text()))
    assert back.values == rep.values and back.label == "boot"
    table = format_table([one, rep])
    assert len(table.splitlines()) == 1 + len(METRICS) and "±" in table
    with pytest.raises(ValueError):
        run_protocol(bootstrap_generator(walks), walks, n_runs=0)


def test_skipped_metric_reported():
    rep = MetricReport({"g_rank": [None]}, 10, skipped={"g_rank": "undefined"})
    d = rep.to_dict()
    assert d["metrics"]["g_rank"]["skipped"] == "undefined" and d["metrics"]["g_rank"]["mean"] is None
    assert "skipped" in format_table([rep])


def test_draw_cells_weights_by_membership():
    from trajsynth.metrics import draw_cells
    from trajsynth.segmentation import LatentCell

    cells = [LatentCell(0, np.zeros(1), np.ones(1), tuple("abc")), LatentCell(1, np.ones(1), 2 * np.ones(1), ()),
             LatentCell(2, 2 * np.ones(1), 3 * np.ones(1), ("d",))]
    index = SimpleIndex(cells)
    occupied, pick = draw_cells(index, 40_000, np.random.default_rng(0))
    assert [c.cell_id for c in occupied] == [0, 2]
    assert np.all(np.diff(pick) >= 0)
    assert np.mean(pick == 0) == pytest.approx(0.75, abs=0.01)
    _, pick = draw_cells(index, 40_000, np.random.default_rng(0), by_members=False)
    assert np.mean(pick == 0) == pytest.approx(0.5, abs=0.01)


class SimpleIndex:
    def __init__(self, cells):
        self.cells = cells
