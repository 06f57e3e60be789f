"""Exact discrete filtered probability space.

Brownian motion is replaced by an m-dimensional scaled Rademacher walk on a
non-recombining tree: every coordinate moves by exactly +/- sqrt(dt) per step,
so each node has ``b = 2**m`` equally likely children.  Conditional
expectations, martingale representations and all norms are then finite sums.

Node indexing: level ``k`` holds ``roots * b**k`` nodes stored as the rows of
one array; the children of node ``i`` are ``i*b, ..., i*b + b - 1``.  Branch
``j`` moves coordinate ``c`` up when bit ``c`` of ``j`` is 0 and down
otherwise.  A tree normally has a single root; several roots (a *forest*) are
used to solve many independent sub-problems at once, each root carrying equal
weight ``1/roots`` in aggregate norms.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, DimensionMismatch, InvalidGrid

DEFAULT_NODE_CAP = 2 ** 22


def _frozen(a):
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid ``tau = t_0 < t_1 < ... < t_N = T``."""

    T: float
    tau: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and np.isfinite(self.tau)):
            raise InvalidGrid("grid end points must be finite")
        if self.tau < 0 or self.T <= self.tau:
            raise InvalidGrid(f"need 0 <= tau < T, got tau={self.tau}, T={self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidGrid(f"need N >= 1 steps, got {self.N}")

    @property
    def dt(self):
        return (self.T - self.tau) / self.N

    @property
    def times(self):
        return np.linspace(self.tau, self.T, self.N + 1)


def branch_increments(m, dt):
    """The ``(2**m, m)`` matrix of walk increments, one row per branch."""
    b = 2 ** m
    bits = (np.arange(b)[:, None] >> np.arange(m)[None, :]) & 1
    return (1.0 - 2.0 * bits) * np.sqrt(dt)


class ScenarioTree:
    """Scenario tree (or forest) carrying the time grid and the driving walk.

    Use :func:`build_tree` for a fresh tree rooted at ``W = 0``; forests over a
    window of levels come from :meth:`subforest`.
    """

    def __init__(self, grid, m, W, roots=1, offset=0, origin=None, increments=None):
        self.grid = grid
        self.m = int(m)
        self.b = 2 ** self.m
        self.roots = int(roots)
        self.offset = int(offset)
        self.increments = _frozen(
            branch_increments(self.m, grid.dt) if increments is None else increments)
        self.W = tuple(_frozen(w) for w in W)
        if len(self.W) != grid.N + 1:
            raise DimensionMismatch("walk needs one array per level")
        for k, w in enumerate(self.W):
            if w.shape != (self.size(k), self.m):
                raise DimensionMismatch(f"walk level {k} has shape {w.shape}")
        if origin is None:
            origin = [np.arange(self.size(k)) for k in range(grid.N + 1)]
        self.origin = tuple(np.asarray(o, dtype=np.int64) for o in origin)

    # geometry -----------------------------------------------------------
    @property
    def N(self):
        return self.grid.N

    @property
    def T(self):
        return self.grid.T

    @property
    def tau(self):
        return self.grid.tau

    @property
    def dt(self):
        return self.grid.dt

    @property
    def times(self):
        return self.grid.times

    @property
    def branch_prob(self):
        return 1.0 / self.b

    @property
    def n_leaves(self):
        return self.size(self.N)

    def size(self, k):
        return self.roots * self.b ** k

    def node_count(self):
        return sum(self.size(k) for k in range(self.N + 1))

    def dW(self, k):
        """Walk increments on the edges entering level ``k`` (k >= 1)."""
        return np.tile(self.increments, (self.size(k - 1), 1))

    # level arithmetic ---------------------------------------------------
    def expand(self, values, from_level, to_level):
        """Copy node values at ``from_level`` onto all descendants at ``to_level``."""
        return np.repeat(values, self.b ** (to_level - from_level), axis=0)

    def parent_mean(self, values):
        """Branch-probability weighted average over the children of each node."""
        values = np.asarray(values, dtype=float)
        return values.reshape(-1, self.b, *values.shape[1:]).mean(axis=1)

    def by_children(self, values):
        values = np.asarray(values, dtype=float)
        return values.reshape(-1, self.b, *values.shape[1:])

    def per_root_mean(self, values):
        values = np.asarray(values, dtype=float)
        return values.reshape(self.roots, -1, *values.shape[1:]).mean(axis=1)

    def subforest(self, start, depth, copies=1):
        """Forest of all subtrees rooted at level ``start`` spanning ``depth`` steps.

        Each subtree is repeated ``copies`` times (root ``r = node*copies + g``),
        which lets one solve the same sub-problem from several initial states.
        Walk values stay absolute; ``origin`` maps forest nodes back to indices
        of this tree.
        """
        if not (0 <= start and depth >= 1 and start + depth <= self.N):
            raise InvalidGrid(f"window [{start}, {start + depth}] outside 0..{self.N}")
        times = self.times
        grid = TimeGrid(float(times[start + depth]), float(times[start]), depth)
        n0 = self.size(start)
        W, origin = [], []
        for j in range(depth + 1):
            w = self.W[start + j].reshape(n0, 1, self.b ** j, self.m)
            W.append(np.repeat(w, copies, axis=1).reshape(-1, self.m))
            o = self.origin[start + j].reshape(n0, 1, self.b ** j)
            origin.append(np.repeat(o, copies, axis=1).reshape(-1))
        return ScenarioTree(grid, self.m, W, roots=n0 * copies, offset=self.offset + start,
                            origin=origin, increments=self.increments)

    def __repr__(self):
        return (f"ScenarioTree(T={self.T}, tau={self.tau}, N={self.N}, m={self.m}, "
                f"roots={self.roots})")


def build_tree(T, tau, N, m, node_cap=DEFAULT_NODE_CAP):
    """Build the walk tree on ``[tau, T]`` with ``N`` steps and ``m`` walk coordinates.

    Raises:
      InvalidGrid: if ``T <= tau`` or ``N < 1``.
      BudgetExceeded: if the ``b**N`` leaves exceed ``node_cap``.
    """
    grid = TimeGrid(float(T), float(tau), int(N))
    if int(m) != m or m < 1:
        raise InvalidGrid(f"need m >= 1 walk coordinates, got {m}")
    leaves = (2 ** m) ** N
    if leaves > node_cap:
        raise BudgetExceeded(f"{leaves} leaves exceed the node cap {node_cap}")
    incr = branch_increments(m, grid.dt)
    W = [np.zeros((1, m))]
    for k in range(N):
        W.append(np.repeat(W[-1], 2 ** m, axis=0) + np.tile(incr, (W[-1].shape[0], 1)))
    return ScenarioTree(grid, m, W, increments=incr)


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Process with one value per node: ``levels[k]`` has shape ``(size(k), dim)``."""

    tree: ScenarioTree
    levels: tuple

    def __post_init__(self):
        tree = self.tree
        if len(self.levels) != tree.N + 1:
            raise DimensionMismatch(
                f"expected {tree.N + 1} levels, got {len(self.levels)}")
        fixed = []
        dim = None
        for k, v in enumerate(self.levels):
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.ndim != 2 or v.shape[0] != tree.size(k):
                raise DimensionMismatch(f"level {k} has shape {v.shape}")
            if dim is None:
                dim = v.shape[1]
            elif v.shape[1] != dim:
                raise DimensionMismatch("dimension changes across levels")
            fixed.append(_frozen(v))
        object.__setattr__(self, "levels", tuple(fixed))

    @property
    def dim(self):
        return self.levels[0].shape[1]

    @property
    def leaves(self):
        return self.levels[-1]

    def at(self, k):
        return self.levels[k]

    @classmethod
    def constant(cls, tree, value):
        """Constant extension; ``value`` may also be one row per root."""
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value[None, :]
        if value.shape[0] == 1 and tree.roots > 1:
            value = np.repeat(value, tree.roots, axis=0)
        if value.shape[0] != tree.roots:
            raise DimensionMismatch(f"initial value rows {value.shape[0]} != roots {tree.roots}")
        return cls(tree, tuple(tree.expand(value, 0, k) for k in range(tree.N + 1)))

    @classmethod
    def zeros(cls, tree, dim):
        return cls(tree, tuple(np.zeros((tree.size(k), dim)) for k in range(tree.N + 1)))

    def _check(self, other):
        if other.tree is not self.tree or other.dim != self.dim:
            raise DimensionMismatch("processes live on different trees or dimensions")

    def __add__(self, other):
        self._check(other)
        return AdaptedProcess(self.tree, tuple(a + b for a, b in zip(self.levels, other.levels)))

    def __sub__(self, other):
        self._check(other)
        return AdaptedProcess(self.tree, tuple(a - b for a, b in zip(self.levels, other.levels)))

    def __neg__(self):
        return AdaptedProcess(self.tree, tuple(-a for a in self.levels))

    def scale(self, c):
        return AdaptedProcess(self.tree, tuple(c * a for a in self.levels))

    def replace_level(self, k, values):
        levels = list(self.levels)
        levels[k] = values
        return AdaptedProcess(self.tree, tuple(levels))


@dataclass(frozen=True, eq=False)
class MartingaleProcess:
    """Martingale ``M`` with its walk integrand, orthogonal residual and ``<M>``.

    ``Z`` is stored flattened row-major as ``d*m`` components; it is defined on
    non-terminal levels (the terminal level holds zeros).  ``qv`` is the trace
    of the predictable quadratic variation and ``qv_matrix[k]`` the full
    ``d x d`` conditional second moment of the increment leaving level ``k``.
    """

    base: AdaptedProcess
    Z: AdaptedProcess
    Nres: AdaptedProcess
    qv: AdaptedProcess
    qv_matrix: tuple

    @property
    def tree(self):
        return self.base.tree

    @property
    def d(self):
        return self.base.dim

    @property
    def m(self):
        return self.tree.m

    def Z_matrix(self, k):
        return self.Z.at(k).reshape(-1, self.d, self.m)


def conditional_expectation(tree, terminal, level, from_level=None):
    """``E[terminal | F_level]`` as node values at ``level``.

    ``terminal`` holds values at ``from_level`` (the leaves by default).
    Averages are taken one level at a time, so the tower property holds with
    identical floating point summation order.
    """
    if from_level is None:
        from_level = tree.N
    values = np.asarray(terminal, dtype=float)
    if not (0 <= level <= from_level <= tree.N):
        raise DimensionMismatch(f"cannot condition level {from_level} on level {level}")
    if values.shape[:1] != (tree.size(from_level),):
        raise DimensionMismatch(
            f"expected {tree.size(from_level)} values at level {from_level}, got {values.shape}")
    for _ in range(from_level - level):
        values = tree.parent_mean(values)
    return values


def _increments(tree, levels, k):
    """Increments out of each level-``k`` node, shape ``(size(k), b, dim)``."""
    return tree.by_children(levels[k + 1]) - levels[k][:, None, :]


def _qv_levels(tree, levels):
    incs = [_increments(tree, levels, k) for k in range(tree.N)]
    mats = tuple(np.einsum("sbi,sbj->sij", dm, dm) / tree.b for dm in incs)
    qv = [np.zeros((tree.size(0), 1))]
    for k in range(tree.N):
        step = np.trace(mats[k], axis1=1, axis2=2)[:, None]
        qv.append(tree.expand(qv[k] + step, k, k + 1))
    return qv, mats


def martingale_from_terminal(tree, xi):
    """Martingale ``M_t = E[xi | F_t]`` with its representation on the walk.

    ``Z`` at a node is the least-squares fit of the child increments of ``M``
    onto the walk increments (exact for ``m = 1``); ``Nres`` accumulates what
    the fit leaves over, which is orthogonal to every walk coordinate.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if xi.shape[0] != tree.n_leaves:
        raise DimensionMismatch(f"expected {tree.n_leaves} leaf values, got {xi.shape[0]}")
    N = tree.N
    d = xi.shape[1]
    base = [None] * (N + 1)
    base[N] = xi
    for k in range(N - 1, -1, -1):
        base[k] = tree.parent_mean(base[k + 1])
    D = tree.increments
    # columns of D are orthogonal with squared norm b*dt
    gram = np.einsum("bc,bc->c", D, D)
    Z, Nres = [], [np.zeros((tree.size(0), d))]
    for k in range(N):
        dM = _increments(tree, base, k)
        z = np.einsum("sbi,bc->sic", dM, D) / gram
        dN = dM - np.einsum("sic,bc->sbi", z, D)
        Z.append(z.reshape(-1, d * tree.m))
        Nres.append(tree.expand(Nres[k], k, k + 1) + dN.reshape(-1, d))
    Z.append(np.zeros((tree.size(N), d * tree.m)))
    qv, mats = _qv_levels(tree, base)
    return MartingaleProcess(
        base=AdaptedProcess(tree, tuple(base)),
        Z=AdaptedProcess(tree, tuple(Z)),
        Nres=AdaptedProcess(tree, tuple(Nres)),
        qv=AdaptedProcess(tree, tuple(qv)),
        qv_matrix=tuple(_frozen(a) for a in mats),
    )


def predictable_qv(M):
    """Predictable quadratic variation (trace) recomputed from the increments of ``M``."""
    base = M.base if isinstance(M, MartingaleProcess) else M
    qv, _ = _qv_levels(base.tree, base.levels)
    return AdaptedProcess(base.tree, tuple(qv))


def _path_sup_sq(p):
    tree = p.tree
    run = np.sum(p.at(0) ** 2, axis=1)
    for k in range(1, tree.N + 1):
        run = np.maximum(np.repeat(run, tree.b), np.sum(p.at(k) ** 2, axis=1))
    return run


def s2_norm(p, per_root=False):
    """``sqrt(E[max_t |p_t|^2])`` computed exactly over all paths."""
    sup_sq = _path_sup_sq(p)
    if per_root:
        return np.sqrt(p.tree.per_root_mean(sup_sq))
    return float(np.sqrt(sup_sq.mean()))


def h2_norm(p, per_root=False):
    """``sqrt(E[sum_t |p_t|^2 dt])`` over the non-terminal levels."""
    tree = p.tree
    total = np.zeros(tree.roots)
    for k in range(tree.N):
        total = total + tree.per_root_mean(np.sum(p.at(k) ** 2, axis=1)) * tree.dt
    if per_root:
        return np.sqrt(total)
    return float(np.sqrt(total.mean()))


def random_adapted(tree, dim, rng, scale=1.0, start=None):
    """Adapted process with independent standard-normal node values.

    ``start`` pins the root level (e.g. ``0`` for processes that start at zero).
    """
    levels = [scale * rng.standard_normal((tree.size(k), dim)) for k in range(tree.N + 1)]
    if start is not None:
        levels[0] = np.broadcast_to(np.asarray(start, dtype=float), (tree.size(0), dim)).copy()
    return AdaptedProcess(tree, tuple(levels))
