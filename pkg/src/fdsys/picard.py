"""Local solver: the lift map (X, V) -> (X~, V~) iterated to its fixed point.

Given a candidate pair, the terminal martingale ``M`` and ``Y = M - V`` are
formed, the operators produce ``z`` inputs, and the forward recursion and the
``f``-integral produce the next pair.  The fixed point solves the coupled
system on the tree.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MaxIterExceeded, NonContractive, NonFinite, ValidationError
from .exprdsl import CoefficientFn, bind, variable_names
from .operators import OperatorTuple, TerminalSpec, apply_L, apply_M
from .space import AdaptedProcess, random_adapted, s2_norm


@dataclass(frozen=True, eq=False)
class Problem:
    """A coupled system on a tree-independent footing.

    In ``mu``, ``sigma`` and ``f`` the names ``z``/``z1..zp`` refer to the output
    of that coefficient's own operator (``L1`` for ``mu``, ``L2`` for ``sigma``,
    ``L3`` for ``f``).  ``alpha_V`` lists ``(step, weight)`` pairs: the weight
    is the mass of the grid cell ending at step ``step`` (1-based, counted from
    the start of the full horizon), and ``f`` is evaluated at the left end of
    that cell.  Without ``alpha_V`` every cell has weight ``dt``.
    """

    n: int
    d: int
    m: int
    mu: CoefficientFn
    sigma: CoefficientFn
    f: CoefficientFn
    terminal: TerminalSpec
    ops: OperatorTuple
    x0: np.ndarray
    v0: np.ndarray = None
    alpha_V: tuple = None
    C: float = None
    K: float = None
    gamma: float = None
    rho_C: float = None
    name: str = "problem"
    allow_h2_diffusion: bool = False

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        object.__setattr__(self, "x0", x0.reshape(-1, self.n) if x0.ndim > 1 else
                           np.broadcast_to(x0, (self.n,)).astype(float))
        v0 = np.zeros(self.d) if self.v0 is None else np.asarray(self.v0, dtype=float)
        object.__setattr__(self, "v0", v0.reshape(-1, self.d) if v0.ndim > 1 else
                           np.broadcast_to(v0, (self.d,)).astype(float))
        if self.alpha_V is not None:
            object.__setattr__(self, "alpha_V",
                               tuple((int(k), float(w)) for k, w in self.alpha_V))
        self.validate()

    @property
    def p(self):
        return tuple(op.output_dim(self.d, self.m) for op in self.ops)

    @property
    def C_prime(self):
        return self.terminal.lipschitz

    def slot_names(self, slot):
        p = self.p[slot]
        return ({"t"} | set(variable_names("x", self.n)) | set(variable_names("y", self.d))
                | set(variable_names("z", p)) | set(variable_names("w", self.m)))

    def validate(self):
        for name, val in (("n", self.n), ("d", self.d), ("m", self.m)):
            if int(val) != val or val < 1:
                raise ValidationError(f"dimension {name} must be a positive integer")
        shapes = {"mu": (self.n, 1), "sigma": (self.n, self.m), "f": (self.d, 1)}
        for slot, (name, fn) in enumerate((("mu", self.mu), ("sigma", self.sigma), ("f", self.f))):
            if fn.output_shape != shapes[name]:
                raise ValidationError(
                    f"{name} has shape {fn.output_shape}, expected {shapes[name]}")
            fn.check_names(self.slot_names(slot), name)
        if self.terminal.d != self.d:
            raise ValidationError(f"terminal has dimension {self.terminal.d}, expected {self.d}")
        allowed = {"t"} | set(variable_names("x", self.n)) | set(variable_names("w", self.m))
        self.terminal.check_names(allowed)
        if self.ops.L2.space != "S2" and not self.allow_h2_diffusion:
            raise ValidationError(
                f"L2 must be S2-valued, got {self.ops.L2.variant} over {self.ops.L2.effective}")
        for op in self.ops:
            if op.effective in ("cond_qv", "running_qv", "residual_qv") and self.d != 1:
                raise ValidationError(f"{op.effective} requires d = 1")
            if op.effective == "residual_qv" and op.mref is None:
                raise ValidationError("residual_qv requires mref")
        if self.alpha_V is not None:
            for k, w in self.alpha_V:
                if k < 1:
                    raise ValidationError(
                        "alpha_V steps start at 1; the initial instant carries no mass")
                if not (math.isfinite(w) and w >= 0):
                    raise ValidationError("alpha_V weights must be finite and nonnegative")
        if not np.all(np.isfinite(self.x0)) or not np.all(np.isfinite(self.v0)):
            raise ValidationError("initial values must be finite")

    def with_terminal(self, terminal, x0=None, v0=None):
        return replace(self, terminal=terminal,
                       x0=self.x0 if x0 is None else x0, v0=self.v0 if v0 is None else v0)


@dataclass(frozen=True)
class PicardConfig:
    """Iteration controls.

    ``relaxation`` is the step ``lam`` in ``x <- x + lam * (L(x) - x)``; the
    default 1 is the plain lift map.
    """

    tol: float = 1e-10
    max_iter: int = 200
    divergence_window: int = 5
    relaxation: float = 1.0
    initial_guess: tuple = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.divergence_window < 1:
            raise ValidationError("divergence_window must be at least 1")
        if not 0 < self.relaxation <= 1:
            raise ValidationError("relaxation must lie in (0, 1]")


@dataclass
class PicardReport:
    converged: bool = False
    iterations: int = 0
    distances: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    forward_residual: float = None
    backward_residual: float = None
    relaxation: float = 1.0
    message: str = ""

    @property
    def contraction(self):
        """Geometric mean of the recorded ratios (``None`` before two steps)."""
        r = [x for x in self.contraction_ratios if x > 0]
        if not r:
            return None
        return float(math.exp(np.mean(np.log(r))))

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "distances": [float(x) for x in self.distances],
            "contraction_ratios": [float(x) for x in self.contraction_ratios],
            "contraction": self.contraction,
            "forward_residual": self.forward_residual,
            "backward_residual": self.backward_residual,
            "relaxation": self.relaxation,
            "message": self.message,
        }


@dataclass(frozen=True, eq=False)
class SolutionPair:
    X: AdaptedProcess
    V: AdaptedProcess
    M: object = None

    @property
    def Y(self):
        return None if self.M is None else self.M.base - self.V


def _initial_rows(value, tree, dim):
    value = np.asarray(value, dtype=float)
    if value.ndim == 1:
        value = np.broadcast_to(value, (tree.roots, dim))
    if value.shape != (tree.roots, dim):
        raise ValidationError(f"initial value shape {value.shape} does not fit {tree.roots} roots")
    return np.array(value)


def _check_finite(values, level, what):
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = int(np.argwhere(bad)[0][0])
        raise NonFinite(f"non-finite {what} at level {level}, node {node}", level, node)


def _cell_weights(problem, tree):
    if problem.alpha_V is None:
        return np.full(tree.N, tree.dt)
    weights = np.zeros(tree.N)
    for step, w in problem.alpha_V:
        j = step - 1 - tree.offset
        if 0 <= j < tree.N:
            weights[j] += w
    return weights


def operator_outputs(problem, M):
    """Operator outputs per slot; slots whose coefficient ignores ``z`` get ``None``."""
    out = []
    for op, fn in zip(problem.ops, (problem.mu, problem.sigma, problem.f)):
        out.append(apply_L(op, M) if fn.references("z") else None)
    return out


def lift_map(problem, tree, X, V, M=None):
    """One application of the lift map; returns ``(X~, V~)``.

    Raises:
      DomainError: a coefficient left its domain.
      NonFinite: a node value of X~ or V~ is not finite.
    """
    if M is None:
        M = apply_M(tree, problem.terminal, X, V)
    Y = M.base - V
    L1, L2, L3 = operator_outputs(problem, M)
    n, d = problem.n, problem.d
    weights = _cell_weights(problem, tree)
    Xt = [_initial_rows(problem.x0, tree, n)]
    Vt = [_initial_rows(problem.v0, tree, d)]
    D = tree.increments
    for k in range(tree.N):
        size = tree.size(k)
        t = tree.times[k]
        x, y, w = Xt[k], Y.at(k), tree.W[k]
        mu = problem.mu(bind(t=t, x=x, y=y, w=w, z=None if L1 is None else L1.at(k)), size)
        sig = problem.sigma(bind(t=t, x=x, y=y, w=w, z=None if L2 is None else L2.at(k)), size)
        f = problem.f(bind(t=t, x=x, y=y, w=w, z=None if L3 is None else L3.at(k)), size)
        drift = x + mu[:, :, 0] * tree.dt
        noise = np.einsum("snc,bc->sbn", sig, D)
        nxt = (drift[:, None, :] + noise).reshape(-1, n)
        _check_finite(nxt, k + 1, "X")
        Xt.append(nxt)
        v = tree.expand(Vt[k] + f[:, :, 0] * weights[k], k, k + 1)
        _check_finite(v, k + 1, "V")
        Vt.append(v)
    return AdaptedProcess(tree, tuple(Xt)), AdaptedProcess(tree, tuple(Vt))


def pair_distance(X, V, X2, V2):
    """``sqrt(|dX|_S2^2 + |dV|_S2^2)``, maximised over the roots of a forest."""
    dx = s2_norm(X - X2, per_root=True)
    dv = s2_norm(V - V2, per_root=True)
    return float(np.max(np.sqrt(dx ** 2 + dv ** 2)))


def constant_guess(problem, tree):
    X = AdaptedProcess.constant(tree, _initial_rows(problem.x0, tree, problem.n))
    V = AdaptedProcess.constant(tree, _initial_rows(problem.v0, tree, problem.d))
    return X, V


def _diverging(distances, window):
    if len(distances) < window + 1:
        return False
    recent = distances[-(window + 1):]
    if min(recent) <= 0:
        return False
    gm = math.exp(np.mean(np.log(np.array(recent[1:]) / np.array(recent[:-1]))))
    return gm >= 1 - 1e-9 and distances[-1] >= distances[0] * (1 - 1e-9)


def solve_local(problem, tree, cfg=None, residuals=True):
    """Iterate the (optionally relaxed) lift map to a fixed point.

    Returns ``(SolutionPair, PicardReport)``.  The distance recorded per
    iteration is ``|L(x) - x|`` in the product S2 norm.

    Raises:
      NonContractive: distances stopped shrinking over the divergence window.
      MaxIterExceeded: ``max_iter`` reached without meeting ``tol``.
      NonFinite, DomainError: numeric failure inside the lift map.
    """
    cfg = cfg or PicardConfig()
    report = PicardReport(relaxation=cfg.relaxation)
    X, V = cfg.initial_guess if cfg.initial_guess is not None else constant_guess(problem, tree)
    lam = cfg.relaxation
    for it in range(1, cfg.max_iter + 1):
        Xn, Vn = lift_map(problem, tree, X, V)
        dist = pair_distance(Xn, Vn, X, V)
        if report.distances and report.distances[-1] > 0:
            report.contraction_ratios.append(dist / report.distances[-1])
        report.distances.append(dist)
        report.iterations = it
        if lam != 1.0:
            Xn, Vn = X + (Xn - X).scale(lam), V + (Vn - V).scale(lam)
        X, V = Xn, Vn
        if dist <= cfg.tol:
            report.converged = True
            break
        if _diverging(report.distances, cfg.divergence_window):
            report.message = "distance not decreasing over the divergence window"
            raise NonContractive(report.message, report)
    else:
        report.message = f"no convergence within {cfg.max_iter} iterations"
        raise MaxIterExceeded(report.message, report)
    M = apply_M(tree, problem.terminal, X, V)
    sol = SolutionPair(X, V, M)
    if residuals:
        from .verify import backward_residual, forward_residual, to_fbsde_triple

        triple = to_fbsde_triple(problem, tree, sol)
        report.forward_residual = forward_residual(problem, tree, triple)
        report.backward_residual = backward_residual(problem, tree, triple, V)["dynamics"]
    return sol, report


def estimate_contraction(problem, tree, n_pairs=10, seed=0, relaxation=1.0, pairs=None):
    """Largest observed ``|T(p1) - T(p2)| / |p1 - p2|`` over random pairs.

    ``T`` is the lift map, relaxed by ``relaxation``.  Random pairs start at
    the problem's initial values and have standard-normal node values
    afterwards; ``pairs`` may instead supply ``((X1, V1), (X2, V2))`` tuples.
    Coincident pairs are skipped.
    """
    if pairs is None:
        rng = np.random.default_rng(seed)
        x0 = _initial_rows(problem.x0, tree, problem.n)
        v0 = _initial_rows(problem.v0, tree, problem.d)
        pairs = []
        for _ in range(n_pairs):
            X1, X2 = (random_adapted(tree, problem.n, rng, start=x0) for _ in range(2))
            V1, V2 = (random_adapted(tree, problem.d, rng, start=v0) for _ in range(2))
            pairs.append(((X1, V1), (X2, V2)))
    best = 0.0
    for (X1, V1), (X2, V2) in pairs:
        den = pair_distance(X1, V1, X2, V2)
        if den == 0:
            continue
        a, b = lift_map(problem, tree, X1, V1), lift_map(problem, tree, X2, V2)
        if relaxation != 1.0:
            a = (X1 + (a[0] - X1).scale(relaxation), V1 + (a[1] - V1).scale(relaxation))
            b = (X2 + (b[0] - X2).scale(relaxation), V2 + (b[1] - V2).scale(relaxation))
        best = max(best, pair_distance(a[0], a[1], b[0], b[1]) / den)
    return best
