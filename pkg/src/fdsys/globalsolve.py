"""Arbitrary horizons by stitching local solves.

The horizon is cut into grid-aligned intervals short enough for the local
solver to contract.  A backward pass builds, interval by interval, terminal
maps ``theta_i(node, x)``: the value at ``T_{i-1}`` of the local solution
started from ``x`` at that node with terminal condition ``theta_i``.  A
forward pass then solves each interval from the state reached at its left end
with ``theta_i`` as terminal condition and concatenates the pieces.

Every per-node, per-grid-point local solve of the backward pass runs at once
on a forest whose roots are (node, grid point) combinations.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (GridOutOfRange, InvalidGrid, MaxIterExceeded, NonContractive,
                     PartitionExhausted, ScopeViolation, SubintervalNonContractive)
from .exprdsl import bind
from .operators import apply_M
from .picard import PicardConfig, SolutionPair, solve_local
from .space import AdaptedProcess


@dataclass(frozen=True)
class Partition:
    """Interval end points as tree levels (``levels[0] = 0``, ``levels[-1] = N``)."""

    levels: tuple
    times: tuple
    max_len: float

    @property
    def intervals(self):
        return list(zip(self.levels[:-1], self.levels[1:]))

    def bisect(self, i, grid):
        """Split interval ``i`` (0-based) at its middle level."""
        a, b = self.levels[i], self.levels[i + 1]
        if b - a < 2:
            raise InvalidGrid("interval is a single step")
        levels = self.levels[: i + 1] + ((a + b) // 2,) + self.levels[i + 1:]
        return Partition(levels, tuple(float(grid.times[k]) for k in levels), self.max_len)


def build_partition(grid, max_len):
    """Fewest grid-aligned intervals of length at most ``max_len``, balanced in size."""
    if max_len < grid.dt * (1 - 1e-9):
        raise InvalidGrid(f"max_len {max_len} is shorter than one step {grid.dt}")
    per = max(1, int(math.floor(max_len / grid.dt + 1e-9)))
    count = -(-grid.N // per)
    levels = tuple(sorted({(i * grid.N) // count for i in range(count + 1)}))
    return Partition(levels, tuple(float(grid.times[k]) for k in levels), float(max_len))


class TerminalMap:
    """Per-node piecewise linear function of x on a uniform grid.

    ``values[node, g]`` holds the value (in R^d) at grid point ``g`` for the
    node of tree level ``level``.  Beyond the grid the end values are held
    constant.
    """

    kind = "map"

    def __init__(self, level, x_grid, values, lipschitz=None):
        self.level = int(level)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.d = self.values.shape[2]
        self.est_lipschitz = self.measured_lipschitz()
        self.lipschitz = self.est_lipschitz if lipschitz is None else lipschitz
        self.zhang_bound = None
        self.extrapolated = 0

    @property
    def h(self):
        return float(self.x_grid[1] - self.x_grid[0])

    def measured_lipschitz(self):
        slopes = np.diff(self.values, axis=1) / np.diff(self.x_grid)[None, :, None]
        return float(np.max(np.linalg.norm(slopes, axis=2)))

    def __call__(self, nodes, x):
        lo, h = self.x_grid[0], self.h
        G = self.x_grid.size
        pos = (np.asarray(x, dtype=float) - lo) / h
        i = np.clip(np.floor(pos).astype(np.int64), 0, G - 2)
        frac = np.clip(pos - i, 0.0, 1.0)[:, None]
        table = self.values[nodes]
        rows = np.arange(len(nodes))
        return table[rows, i] * (1 - frac) + table[rows, i + 1] * frac

    def values_at(self, tree, X):
        if tree.offset + tree.N != self.level:
            raise InvalidGrid("terminal map used at the wrong level")
        return self(tree.origin[tree.N], X.leaves[:, 0])


class _MapTerminal:
    """Adapter giving a TerminalMap the terminal interface used by the solvers."""

    kind = "map"

    def __init__(self, theta):
        self.theta = theta
        self.d = theta.d
        self.lipschitz = theta.lipschitz

    def values(self, tree, X):
        return self.theta.values_at(tree, X)

    def check_names(self, allowed):
        return None


@dataclass
class GlobalConfig:
    x_grid: tuple = None
    max_len: float = 0.5
    min_len: float = None
    rho_C: float = None
    picard: PicardConfig = field(default_factory=PicardConfig)

    def __post_init__(self):
        if self.x_grid is not None:
            lo, hi, G = self.x_grid
            if not lo < hi or int(G) != G or G < 3:
                raise InvalidGrid("x_grid needs lo < hi and G >= 3")


@dataclass
class GlobalReport:
    partition: list = field(default_factory=list)
    x_grid: tuple = None
    intervals: list = field(default_factory=list)
    theta_lipschitz: list = field(default_factory=list)
    zhang_bounds: list = field(default_factory=list)
    interface_mismatches: list = field(default_factory=list)
    interface_tolerance: list = field(default_factory=list)
    locality_mismatch: float = None
    bisections: int = 0
    backward_picard: list = field(default_factory=list)
    forward_picard: list = field(default_factory=list)

    @property
    def zhang_ok(self):
        return all(iv.get("zhang_pass", True) for iv in self.intervals)

    @property
    def interfaces_ok(self):
        return all(m <= t for m, t in zip(self.interface_mismatches, self.interface_tolerance))

    def to_dict(self):
        return {
            "partition": self.partition,
            "x_grid": list(self.x_grid) if self.x_grid else None,
            "intervals": self.intervals,
            "theta_lipschitz": self.theta_lipschitz,
            "zhang_bounds": self.zhang_bounds,
            "interface_mismatches": self.interface_mismatches,
            "interface_tolerance": self.interface_tolerance,
            "interfaces_ok": self.interfaces_ok,
            "zhang_ok": self.zhang_ok,
            "locality_mismatch": self.locality_mismatch,
            "bisections": self.bisections,
            "backward_picard": [r.to_dict() for r in self.backward_picard],
            "forward_picard": [r.to_dict() for r in self.forward_picard],
        }


def check_scope(problem):
    """The stitching construction covers scalar forward states, z-free diffusion,
    Ito operators, pointwise terminals and Lebesgue ``dV``."""
    if problem.n != 1:
        raise ScopeViolation(f"global construction needs n = 1, got n = {problem.n}")
    if problem.sigma.references("z"):
        raise ScopeViolation("global construction needs sigma independent of z")
    for op in (problem.ops.L1, problem.ops.L3):
        if op.variant != "ito":
            raise ScopeViolation("global construction needs Ito integrand operators L1 and L3")
    if getattr(problem.terminal, "kind", None) != "pointwise":
        raise ScopeViolation("global construction needs a pointwise terminal condition")
    if problem.alpha_V is not None:
        raise ScopeViolation("global construction needs the default dt measure for V")
    if np.asarray(problem.x0).ndim != 1:
        raise ScopeViolation("global construction needs a deterministic initial value")


def default_x_grid(problem, tree, G=41, seed=0, samples=200):
    """``x0 +/- 6 sqrt(T - tau) (1 + sampled |sigma|)`` with ``G`` points."""
    rng = np.random.default_rng(seed)
    level = rng.integers(0, tree.N, size=samples)
    t = tree.times[level]
    w = np.stack([tree.W[k][rng.integers(0, tree.size(k))] for k in level])
    x = problem.x0[0] + rng.standard_normal((samples, 1))
    y = rng.standard_normal((samples, problem.d))
    sig = problem.sigma(bind(t=t, x=x, y=y, w=w), samples)
    bound = float(np.max(np.linalg.norm(sig.reshape(samples, -1), axis=1)))
    half = 6.0 * math.sqrt(tree.T - tree.tau) * (1.0 + bound)
    x0 = float(problem.x0[0])
    return (x0 - half, x0 + half, G)


def zhang_bound(C_prime, rho_C, length):
    return math.sqrt((C_prime ** 2 + 1.0) * math.exp(rho_C * length) - 1.0)


def _local(problem, forest, cfg, interval):
    try:
        return solve_local(problem, forest, cfg, residuals=False)
    except (NonContractive, MaxIterExceeded) as exc:
        raise SubintervalNonContractive(
            f"interval {interval} did not contract: {exc}", interval, exc.report) from exc


def backward_terminal_maps(problem, tree, part, cfg, report=None):
    """Terminal maps ``theta_0 .. theta_{P-1}`` at the left ends of the intervals.

    The terminal condition of the last interval is the problem's own; the
    returned list holds the maps at ``part.levels[:-1]`` in order.

    Raises:
      SubintervalNonContractive: a local solve failed to contract.
    """
    check_scope(problem)
    report = report if report is not None else GlobalReport()
    lo, hi, G = cfg.x_grid if cfg.x_grid is not None else default_x_grid(problem, tree)
    xs = np.linspace(lo, hi, int(G))
    rho = cfg.rho_C if cfg.rho_C is not None else problem.rho_C
    C_prime = problem.terminal.lipschitz
    maps = [None] * (len(part.levels) - 1)
    terminal = problem.terminal
    for i in range(len(part.levels) - 2, -1, -1):
        a, b = part.levels[i], part.levels[i + 1]
        forest = tree.subforest(a, b - a, copies=int(G))
        x0 = np.tile(xs, tree.size(a))[:, None]
        sub = problem.with_terminal(terminal, x0=x0, v0=np.zeros((forest.roots, problem.d)))
        sol, rep = _local(sub, forest, cfg.picard, i + 1)
        report.backward_picard.insert(0, rep)
        Y0 = (sol.M.base.at(0) - sol.V.at(0)).reshape(tree.size(a), int(G), problem.d)
        theta = TerminalMap(a, xs, Y0)
        leaves = sol.X.leaves[:, 0]
        theta.extrapolated = int(np.sum((leaves < lo) | (leaves > hi)))
        if rho is not None and C_prime is not None:
            theta.zhang_bound = zhang_bound(C_prime, rho, tree.T - tree.times[a])
        maps[i] = theta
        terminal = _MapTerminal(theta)
    return maps


def solve_global(problem, tree, cfg=None):
    """Solve on the whole tree horizon by backward maps and forward stitching.

    Returns ``(SolutionPair, GlobalReport)``.

    Raises:
      PartitionExhausted: bisection reached ``min_len`` without contraction.
      GridOutOfRange: the forward state at an interior boundary left the
        x-grid by more than one cell.
    """
    cfg = cfg or GlobalConfig()
    check_scope(problem)
    if cfg.x_grid is None:
        cfg = GlobalConfig(default_x_grid(problem, tree), cfg.max_len, cfg.min_len, cfg.rho_C,
                           cfg.picard)
    min_len = cfg.min_len if cfg.min_len is not None else tree.dt
    part = build_partition(tree.grid, cfg.max_len)
    bisections = 0
    while True:
        report = GlobalReport(x_grid=tuple(cfg.x_grid), bisections=bisections)
        try:
            maps = backward_terminal_maps(problem, tree, part, cfg, report)
            sol = _forward(problem, tree, part, cfg, maps, report)
            break
        except SubintervalNonContractive as exc:
            i = exc.interval - 1
            a, b = part.levels[i], part.levels[i + 1]
            if b - a < 2 or (b - a) * tree.dt / 2 < min_len * (1 - 1e-9):
                raise PartitionExhausted(
                    f"interval [{part.times[i]}, {part.times[i + 1]}] cannot be split below "
                    f"min_len {min_len} and does not contract", exc.report) from exc
            part = part.bisect(i, tree.grid)
            bisections += 1
    report.partition = list(part.times)
    return sol, report


def _forward(problem, tree, part, cfg, maps, report):
    lo, hi, G = cfg.x_grid
    h = (hi - lo) / (G - 1)
    tol = cfg.picard.tol
    X_levels = [None] * (tree.N + 1)
    V_levels = [None] * (tree.N + 1)
    x_start = np.broadcast_to(problem.x0, (1, problem.n))
    v_start = np.broadcast_to(problem.v0, (1, problem.d))
    pieces = []
    P = len(part.levels) - 1
    for i in range(P):
        a, b = part.levels[i], part.levels[i + 1]
        forest = tree.subforest(a, b - a)
        terminal = problem.terminal if i == P - 1 else _MapTerminal(maps[i + 1])
        sub = problem.with_terminal(terminal, x0=np.array(x_start), v0=np.array(v_start))
        sol, rep = _local(sub, forest, cfg.picard, i + 1)
        report.forward_picard.append(rep)
        pieces.append((forest, sol))
        for j in range(b - a + 1):
            X_levels[a + j] = sol.X.at(j)
            V_levels[a + j] = sol.V.at(j)
        x_start, v_start = sol.X.leaves, sol.V.leaves
        if i < P - 1:
            xs = x_start[:, 0]
            if np.any(xs < lo - h) or np.any(xs > hi + h):
                raise GridOutOfRange(
                    f"forward state at t={part.times[i + 1]} reaches "
                    f"[{xs.min():.4g}, {xs.max():.4g}], outside the x-grid [{lo}, {hi}] "
                    f"by more than one cell")
    X = AdaptedProcess(tree, tuple(X_levels))
    V = AdaptedProcess(tree, tuple(V_levels))
    M = apply_M(tree, problem.terminal, X, V)

    # interface identity: left piece's terminal value vs right piece's initial value
    for i in range(P - 1):
        left_forest, left = pieces[i]
        right_forest, right = pieces[i + 1]
        y_left = left.M.base.leaves - left.V.leaves
        y_right = right.M.base.at(0) - right.V.at(0)
        mismatch = float(np.max(np.abs(y_left - y_right)))
        theta = maps[i + 1]
        report.interface_mismatches.append(mismatch)
        report.interface_tolerance.append(10 * tol + theta.est_lipschitz * h)

    # locality: each piece's martingale matches the stitched one up to interpolation
    loc = 0.0
    for (forest, sol), (a, b) in zip(pieces, part.intervals):
        for j in range(b - a + 1):
            diff = (sol.M.base.at(j) - sol.V.at(j)) - (M.base.at(a + j) - V.at(a + j))
            loc = max(loc, float(np.max(np.abs(diff))))
    report.locality_mismatch = loc

    for i, (a, b) in enumerate(part.intervals):
        theta = maps[i]
        entry = {
            "bounds": [part.times[i], part.times[i + 1]],
            "levels": [a, b],
            "iterations": {"backward": report.backward_picard[i].iterations,
                           "forward": report.forward_picard[i].iterations},
            "contraction": {"backward": report.backward_picard[i].contraction,
                            "forward": report.forward_picard[i].contraction},
            "theta_lipschitz": theta.est_lipschitz,
            "extrapolated": theta.extrapolated,
            "interface_mismatch": report.interface_mismatches[i] if i < P - 1 else None,
        }
        if theta.zhang_bound is not None:
            slack = 20 * tol / h
            entry["zhang_bound"] = theta.zhang_bound
            entry["zhang_pass"] = bool(theta.est_lipschitz <= theta.zhang_bound + slack)
        report.intervals.append(entry)
        report.theta_lipschitz.append(theta.est_lipschitz)
        report.zhang_bounds.append(theta.zhang_bound)
    return SolutionPair(X, V, M)


@dataclass
class ZhangResult:
    ratio: float
    ratios: list
    y0: list
    bound: float = None

    @property
    def passed(self):
        return self.bound is None or self.ratio <= self.bound

    def to_dict(self):
        return {"ratio": self.ratio, "ratios": self.ratios, "y0": self.y0,
                "bound": self.bound, "passed": self.passed}


def zhang_y0_lipschitz(problem, tree, x_pairs, cfg=None):
    """Largest ``|Y0(x1) - Y0(x2)| / |x1 - x2|`` over the given starting points.

    When ``rho_C`` and the terminal constant are declared the result carries
    the bound ``sqrt((C'^2 + 1) exp(rho_C T) - 1)`` for comparison.
    """
    cfg = cfg or PicardConfig()
    cache = {}

    def y0(x):
        if x not in cache:
            sub = problem.with_terminal(problem.terminal, x0=np.full(problem.n, x))
            sol, _ = solve_local(sub, tree, cfg, residuals=False)
            cache[x] = float(sol.Y.at(0)[0, 0])
        return cache[x]

    ratios = []
    for x1, x2 in x_pairs:
        if x1 == x2:
            continue
        ratios.append(abs(y0(float(x1)) - y0(float(x2))) / abs(x1 - x2))
    bound = None
    if problem.rho_C is not None and problem.terminal.lipschitz is not None:
        bound = zhang_bound(problem.terminal.lipschitz, problem.rho_C, tree.T - tree.tau)
    return ZhangResult(float(max(ratios, default=0.0)), ratios, sorted(cache.items()), bound)
