import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdsys.errors import (GridOutOfRange, InvalidGrid, PartitionExhausted, ScopeViolation)
from fdsys.globalsolve import (GlobalConfig, TerminalMap, backward_terminal_maps,
                               build_partition, default_x_grid, solve_global, zhang_bound,
                               zhang_y0_lipschitz)
from fdsys.picard import PicardConfig, solve_local
from fdsys.space import TimeGrid, build_tree

from problems import counterexample, make, riccati

RELAXED = PicardConfig(relaxation=0.5)


# --- partition -------------------------------------------------------------------

@pytest.mark.parametrize("N,max_len,levels", [
    (4, 0.5, (0, 2, 4)),
    (4, 0.3, (0, 1, 2, 3, 4)),
    (4, 1.0, (0, 4)),
    (12, 0.5, (0, 6, 12)),
    (5, 0.5, (0, 1, 3, 5)),
])
def test_partition_examples(N, max_len, levels):
    assert build_partition(TimeGrid(1.0, 0.0, N), max_len).levels == levels


def test_partition_rejects_sub_step_length():
    with pytest.raises(InvalidGrid):
        build_partition(TimeGrid(1.0, 0.0, 4), 0.2)


@settings(max_examples=100, deadline=None)
@given(N=st.integers(1, 40), T=st.floats(0.1, 5.0), frac=st.floats(0.0, 1.0))
def test_partition_properties(N, T, frac):
    grid = TimeGrid(T, 0.0, N)
    max_len = grid.dt * (1 + frac * (N - 1))
    part = build_partition(grid, max_len)
    assert part.levels[0] == 0 and part.levels[-1] == N
    lengths = np.diff(part.levels) * grid.dt
    assert np.all(lengths > 0)
    assert np.all(lengths <= max_len * (1 + 1e-9))
    per = math.floor(max_len / grid.dt + 1e-9)
    assert len(lengths) == math.ceil(N / per)


def test_partition_bisect():
    grid = TimeGrid(1.0, 0.0, 8)
    part = build_partition(grid, 0.5).bisect(1, grid)
    assert part.levels == (0, 4, 6, 8)
    assert part.times == (0.0, 0.5, 0.75, 1.0)


# --- terminal maps -------------------------------------------------------------------

def test_terminal_map_reproduces_linear_functions():
    xs = np.linspace(-2, 2, 9)
    values = np.stack([3 * xs + 1, -xs])[:, :, None]
    theta = TerminalMap(1, xs, values)
    x = np.array([-1.3, 0.1, 1.99])
    assert np.allclose(theta(np.array([0, 0, 0]), x)[:, 0], 3 * x + 1)
    assert np.allclose(theta(np.array([1, 1, 1]), x)[:, 0], -x)
    assert theta.est_lipschitz == pytest.approx(3.0)


def test_terminal_map_holds_end_values():
    xs = np.linspace(0, 1, 3)
    theta = TerminalMap(0, xs, (xs ** 2)[None, :, None])
    assert theta(np.array([0, 0]), np.array([-5.0, 7.0]))[:, 0].tolist() == [0.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=12), st.floats(-10, 10),
       st.floats(-10, 10))
def test_terminal_map_lipschitz_bounds_interpolant(vals, a, b):
    xs = np.linspace(-1, 1, len(vals))
    theta = TerminalMap(0, xs, np.array(vals)[None, :, None])
    fa, fb = theta(np.array([0, 0]), np.array([a, b]))[:, 0]
    assert abs(fa - fb) <= theta.est_lipschitz * abs(a - b) + 1e-9


# --- global solve ------------------------------------------------------------------

@pytest.fixture(scope="module")
def riccati_T2():
    tree = build_tree(2.0, 0.0, 12, 1)
    return tree, *solve_global(riccati(), tree, GlobalConfig(max_len=0.5, picard=RELAXED))


def test_riccati_long_horizon(riccati_T2):
    tree, sol, rep = riccati_T2
    assert sol.Y.at(0)[0, 0] == pytest.approx(1 / 3, abs=1e-8)
    assert rep.partition == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])
    assert rep.interfaces_ok
    assert rep.locality_mismatch < 1e-8


def test_riccati_maps_are_decoupling_fields(riccati_T2):
    tree, _, rep = riccati_T2
    # theta at T_i is x / (1 + T - T_i) at every node
    for entry in rep.intervals:
        t = entry["bounds"][0]
        assert entry["theta_lipschitz"] == pytest.approx(1 / (1 + tree.T - t), abs=1e-8)


def test_riccati_theta_below_zhang_bound(riccati_T2):
    tree, _, rep = riccati_T2
    assert rep.zhang_ok
    for entry in rep.intervals:
        t = entry["bounds"][0]
        assert entry["zhang_bound"] == pytest.approx(zhang_bound(1.0, 1.0, tree.T - t))
        assert entry["theta_lipschitz"] <= entry["zhang_bound"]


def test_global_matches_local_on_contractive_horizon():
    tree = build_tree(0.5, 0.0, 6, 1)
    P = make(mu="-y", phi="tanh(x)", x0=0.3, C=1.0, lipschitz=1.0)
    local, _ = solve_local(P, tree)
    cfg = GlobalConfig(x_grid=(-4.0, 4.0, 161), max_len=0.25)
    glob, rep = solve_global(P, tree, cfg)
    h = 8.0 / 160
    # interpolation error of a smooth map is second order in the grid step
    for k in range(tree.N + 1):
        assert np.allclose(glob.Y.at(k), local.Y.at(k), atol=h ** 2)
        assert np.allclose(glob.X.at(k), local.X.at(k), atol=h ** 2)
    assert rep.interfaces_ok


def test_zero_problem_long_horizon():
    tree = build_tree(4.0, 0.0, 8, 1)
    sol, rep = solve_global(make(phi="1.5", lipschitz=0.0), tree, GlobalConfig(max_len=0.5))
    assert rep.interface_mismatches == [0.0] * 7
    assert np.all(sol.Y.at(0) == 1.5)


def test_bisection_recovers_from_long_intervals():
    tree = build_tree(2.0, 0.0, 8, 1)
    sol, rep = solve_global(riccati(), tree,
                            GlobalConfig(max_len=2.0, picard=PicardConfig(max_iter=60)))
    assert rep.bisections >= 1
    assert sol.Y.at(0)[0, 0] == pytest.approx(1 / 3, abs=1e-8)


def test_partition_exhausted():
    tree = build_tree(2.0, 0.0, 8, 1)
    cfg = GlobalConfig(max_len=2.0, min_len=2.0, picard=PicardConfig(max_iter=60))
    with pytest.raises(PartitionExhausted):
        solve_global(riccati(), tree, cfg)


def test_narrow_grid_is_reported():
    tree = build_tree(1.0, 0.0, 8, 1)
    cfg = GlobalConfig(x_grid=(0.0, 0.1, 3), max_len=0.5, picard=RELAXED)
    with pytest.raises(GridOutOfRange):
        solve_global(riccati(), tree, cfg)


@pytest.mark.parametrize("problem", [
    counterexample(),
    make(phi="abs(x)", kind="sup"),
    make(f="1", alpha_V=[(1, 0.5)]),
])
def test_global_scope(problem):
    with pytest.raises(ScopeViolation):
        solve_global(problem, build_tree(1.0, 0.0, 4, 1))


def test_default_grid_is_centred():
    tree = build_tree(1.0, 0.0, 4, 1)
    lo, hi, G = default_x_grid(riccati(), tree)
    assert (lo + hi) / 2 == pytest.approx(1.0)
    assert hi - lo == pytest.approx(2 * 6 * 2.0)
    assert G == 41


def test_backward_maps_count():
    tree = build_tree(1.0, 0.0, 4, 1)
    cfg = GlobalConfig(x_grid=(-3.0, 3.0, 7), max_len=0.25, picard=RELAXED)
    maps = backward_terminal_maps(riccati(), tree, build_partition(tree.grid, 0.25), cfg)
    assert [m.level for m in maps] == [0, 1, 2, 3]
    assert [m.values.shape[0] for m in maps] == [1, 2, 4, 8]


# --- Zhang ratio -------------------------------------------------------------------

@pytest.mark.parametrize("T", [0.25, 0.5, 1.0])
def test_zhang_ratio_linear_family(T):
    res = zhang_y0_lipschitz(riccati(), build_tree(T, 0.0, 6, 1),
                             [(-1.0, 1.0), (0.0, 2.0), (0.5, 0.7)], RELAXED)
    assert res.ratio == pytest.approx(1 / (1 + T), abs=1e-8)
    assert res.passed
    assert res.bound == pytest.approx(zhang_bound(1.0, 1.0, T))
