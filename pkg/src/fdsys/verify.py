"""Residual certificates and sampled assumption checks.

The residuals restate a solved pair as the forward-backward dynamics
``dX = mu dt + sigma dW``, ``dY = -f dt + dM``, ``Y_T = Phi(X)`` and measure
how far each relation is from holding nodewise.  The assumption checkers
evaluate the structural inequalities on seeded samples and report the worst
violation found; passing means no violation was found, not that the condition
holds.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ScopeViolation, ValidationError
from .exprdsl import aliases, bind, finite_diff
from .operators import apply_M
from .picard import _cell_weights, operator_outputs
from .space import AdaptedProcess, random_adapted, s2_norm

PASS_TOL = 1e-9
A2_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class FbsdeTriple:
    X: AdaptedProcess
    Y: AdaptedProcess
    M: object
    V: AdaptedProcess = None

    @property
    def Z(self):
        return self.M.Z


def to_fbsde_triple(problem, tree, sol):
    """``(X, Y, M)`` for a pair, with ``M = E[Phi(X) + V_T | F_t]`` and ``Y = M - V``."""
    M = sol.M if getattr(sol, "M", None) is not None else \
        apply_M(tree, problem.terminal, sol.X, sol.V)
    return FbsdeTriple(sol.X, M.base - sol.V, M, sol.V)


def _coefficients_at(problem, tree, triple, k, L):
    env = [bind(t=tree.times[k], x=triple.X.at(k), y=triple.Y.at(k), w=tree.W[k],
                z=None if Li is None else Li.at(k)) for Li in L]
    size = tree.size(k)
    return problem.mu(env[0], size), problem.sigma(env[1], size), problem.f(env[2], size)


def backward_residual(problem, tree, triple, V=None):
    """Nodewise defects of the backward relations.

    Returns a dict with
      ``dynamics``: max ``|dY + f * alpha_V - dM|``; it vanishes exactly when V
        integrates f, so it certifies the V equation of a solved pair;
      ``decomposition``: max ``|dY + dV - dM|``, an identity for any pair;
      ``terminal``: max ``|Y_T - Phi(X)|`` over the leaves.
    """
    V = triple.V if V is None else V
    L = operator_outputs(problem, triple.M)
    weights = _cell_weights(problem, tree)
    dyn = dec = 0.0
    for k in range(tree.N):
        _, _, f = _coefficients_at(problem, tree, triple, k, L)
        dY = tree.by_children(triple.Y.at(k + 1)) - triple.Y.at(k)[:, None, :]
        dM = tree.by_children(triple.M.base.at(k + 1)) - triple.M.base.at(k)[:, None, :]
        dV = tree.by_children(V.at(k + 1)) - V.at(k)[:, None, :]
        dyn = max(dyn, float(np.max(np.abs(dY + f[:, None, :, 0] * weights[k] - dM))))
        dec = max(dec, float(np.max(np.abs(dY + dV - dM))))
    term = float(np.max(np.abs(triple.Y.leaves - problem.terminal.values(tree, triple.X))))
    return {"dynamics": dyn, "decomposition": dec, "terminal": term}


def forward_residual(problem, tree, triple):
    """Max nodewise ``|dX - mu dt - sigma dW|`` with coefficients at the left node."""
    L = operator_outputs(problem, triple.M)
    D = tree.increments
    worst = 0.0
    for k in range(tree.N):
        mu, sig, _ = _coefficients_at(problem, tree, triple, k, L)
        dX = tree.by_children(triple.X.at(k + 1)) - triple.X.at(k)[:, None, :]
        pred = mu[:, None, :, 0] * tree.dt + np.einsum("snc,bc->sbn", sig, D)
        worst = max(worst, float(np.max(np.abs(dX - pred))))
    return worst


# --- assumption reports ------------------------------------------------------------

@dataclass
class ConditionResult:
    name: str
    n_samples: int
    max_violation: float
    informational: bool = False
    worst: list = field(default_factory=list)
    note: str = ""

    @property
    def passed(self):
        return self.max_violation <= PASS_TOL

    def to_dict(self):
        return {"name": self.name, "n_samples": self.n_samples,
                "max_violation": self.max_violation, "passed": self.passed,
                "informational": self.informational, "worst": self.worst, "note": self.note}


@dataclass
class AssumptionReport:
    assumption: str
    conditions: list = field(default_factory=list)

    @property
    def checked(self):
        return [c.name for c in self.conditions]

    @property
    def passed(self):
        return all(c.passed for c in self.conditions if not c.informational)

    def condition(self, name):
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"assumption": self.assumption, "passed": self.passed,
                "conditions": [c.to_dict() for c in self.conditions]}


def _result(name, lhs, rhs, samples, informational=False, note="", keep=3):
    """Condition ``lhs <= rhs`` per sample; violation normalised by ``1 + |rhs|``."""
    lhs, rhs = np.asarray(lhs, dtype=float), np.asarray(rhs, dtype=float)
    viol = np.maximum((lhs - rhs) / (1.0 + np.abs(rhs)), 0.0)
    viol = np.where(np.isnan(viol), np.inf, viol)
    order = np.argsort(-viol, kind="stable")[:keep]
    worst = [{"violation": float(viol[i]), "lhs": float(lhs[i]), "rhs": float(rhs[i]),
              **{k: np.asarray(v)[i].tolist() for k, v in samples.items()}}
             for i in order if viol[i] > 0]
    return ConditionResult(name, int(lhs.size), float(viol.max(initial=0.0)), informational,
                           worst, note)


def _sample_states(tree, rng, n):
    """Times and walk values at random non-terminal nodes."""
    level = rng.integers(0, tree.N, size=n)
    node = np.array([rng.integers(0, tree.size(k)) for k in level])
    t = tree.times[level]
    w = np.stack([tree.W[k][i] for k, i in zip(level, node)])
    return t, w


def _norm(a):
    return np.sqrt(np.sum(np.asarray(a) ** 2, axis=tuple(range(1, np.ndim(a)))))


def check_A1(problem, tree, n_samples=200, seed=0):
    """Sampled check of the monotonicity, Lipschitz, growth and integrability conditions.

    The x-Lipschitz form of the drift condition is reported as informational:
    it is a stronger alternative, not part of the verdict.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if problem.C is None:
        raise ValidationError("check_A1 needs the declared constant C")
    C = float(problem.C)
    rng = np.random.default_rng(seed)
    n, d = problem.n, problem.d
    p1, p2, p3 = problem.p
    t, w = _sample_states(tree, rng, n_samples)

    def draw(k):
        return 2.0 * rng.standard_normal((n_samples, k))

    x, x2 = draw(n), draw(n)
    y, y2 = draw(d), draw(d)
    z1, z1b, z2, z2b, z3, z3b = draw(p1), draw(p1), draw(p2), draw(p2), draw(p3), draw(p3)
    S = n_samples

    def mu(xx, yy, zz):
        return problem.mu(bind(t=t, x=xx, y=yy, z=zz, w=w), S)[:, :, 0]

    def sig(xx, yy, zz):
        return problem.sigma(bind(t=t, x=xx, y=yy, z=zz, w=w), S)

    def f(xx, yy, zz):
        return problem.f(bind(t=t, x=xx, y=yy, z=zz, w=w), S)[:, :, 0]

    dx, dy = _norm(x - x2), _norm(y - y2)
    samples = {"t": t, "x": x, "x_prime": x2, "y": y, "y_prime": y2}
    rep = AssumptionReport("A1")

    lhs = np.sum((x - x2) * (mu(x, y, z1) - mu(x2, y, z1)), axis=1)
    rep.conditions.append(_result("A1.2-monotone", lhs, C * dx ** 2, samples))
    lhs = _norm(mu(x, y, z1) - mu(x, y2, z1b))
    rep.conditions.append(_result("A1.2-lipschitz_yz", lhs, C * (dy + _norm(z1 - z1b)), samples))
    zero_y, zero_z = np.zeros((S, d)), np.zeros((S, p1))
    lhs = _norm(mu(x, zero_y, zero_z))
    rep.conditions.append(_result("A1.2-growth", lhs, C * (1 + _norm(x)), samples))
    lhs = _norm(mu(x, y, z1) - mu(x2, y2, z1b))
    rep.conditions.append(_result("A1.2'", lhs, C * (dx + dy + _norm(z1 - z1b)), samples,
                                  informational=True,
                                  note="stronger x-Lipschitz form; not part of the verdict"))

    # integrability at the origin: finiteness of every node value on the tree
    finite = []
    for k in range(tree.N):
        size = tree.size(k)
        env = bind(t=tree.times[k], x=np.zeros((size, n)), y=np.zeros((size, d)),
                   w=tree.W[k])
        env_f = dict(env, **bind(z=np.zeros((size, p3))))
        env_s = dict(env, **bind(z=np.zeros((size, p2))))
        finite.append(np.all(np.isfinite(problem.f(env_f, size)))
                      and np.all(np.isfinite(problem.sigma(env_s, size))))
    zeroX = AdaptedProcess.zeros(tree, n)
    finite.append(bool(np.all(np.isfinite(problem.terminal.values(tree, zeroX)))))
    rep.conditions.append(ConditionResult("A1.3", len(finite), 0.0 if all(finite) else np.inf))

    lhs = _norm(sig(x, y, z2) - sig(x2, y2, z2b)) ** 2
    rhs = C * (dx ** 2 + dy ** 2 + _norm(z2 - z2b) ** 2)
    rep.conditions.append(_result("A1.4-sigma", lhs, rhs, samples))
    lhs = _norm(f(x, y, z3) - f(x2, y2, z3b))
    rep.conditions.append(_result("A1.4-f", lhs, C * (dx + dy + _norm(z3 - z3b)), samples))
    lhs, rhs, psamp = _terminal_lipschitz(problem.terminal, tree, rng, n_samples, n, C)
    rep.conditions.append(_result("A1.4-phi", lhs, rhs, psamp))
    return rep


def _terminal_lipschitz(terminal, tree, rng, n_samples, n, C):
    """Samples of ``|Phi(x) - Phi(x')|`` against ``C`` times the path sup distance."""
    if terminal.kind == "pointwise":
        leaf = rng.integers(0, tree.n_leaves, size=n_samples)
        w = tree.W[tree.N][leaf]
        x, x2 = 2.0 * rng.standard_normal((n_samples, n)), 2.0 * rng.standard_normal((n_samples, n))
        a = terminal.fn(bind(t=tree.T, x=x, w=w), n_samples)[:, :, 0]
        b = terminal.fn(bind(t=tree.T, x=x2, w=w), n_samples)[:, :, 0]
        return _norm(a - b), C * _norm(x - x2), {"x": x, "x_prime": x2}
    lhs, rhs = [], []
    while sum(map(len, lhs)) < n_samples:
        X, X2 = random_adapted(tree, n, rng, 2.0), random_adapted(tree, n, rng, 2.0)
        sup = np.zeros(tree.size(0))
        for k in range(tree.N + 1):
            if k:
                sup = np.repeat(sup, tree.b)
            sup = np.maximum(sup, _norm(X.at(k) - X2.at(k)))
        lhs.append(_norm(terminal.values(tree, X) - terminal.values(tree, X2)))
        rhs.append(C * sup)
    lhs = np.concatenate(lhs)[:n_samples]
    return lhs, np.concatenate(rhs)[:n_samples], {}


def _derivatives(fn, env, names, size):
    """``out[s, e, j] = d(entry e)/d(names[j])`` by central differences."""
    out = np.zeros((size, len(fn.exprs), len(names)))
    for e, expr in enumerate(fn.exprs):
        for j, name in enumerate(names):
            out[:, e, j] = np.broadcast_to(finite_diff(expr, aliases(name, env), env), (size,))
    return out


def lambda_terms(dzmu, dzf, dysig, dxsig, dymu, y, drift_y="componentwise"):
    """The two A2 functionals for ``n = 1`` at one direction ``y``.

    Shapes per sample ``s``: ``dzmu (s,d,m)``, ``dzf (s,d,d,m)`` with
    ``dzf[:, i]`` the z-gradient of ``f^i``, ``dysig (s,d,m)``, ``dxsig (s,m)``,
    ``dymu (s,d)``, ``y (d,)``.

    ``drift_y`` selects how the y-gradient of the drift enters Lambda1:
    ``"componentwise"`` uses ``sum_i dmu/dy_i * y_i**2`` (for d = 1 this is
    ``dmu/dy``, independent of the sign of ``y``); ``"linear"`` uses the
    inner product ``(dmu/dy)^T y``, which flips sign with ``y``.
    """
    tr = np.einsum("sijc,sjc->si", dzf, dzmu)
    a = np.einsum("j,sjc,sikc,k->si", y, dzmu, dzf, y)
    b = np.einsum("j,sjc,sikc,k->si", y, dysig, dzf, y)
    lam1 = np.einsum("i,si->s", y, tr - a + b)
    if drift_y == "componentwise":
        drift = dymu @ (y * y)
    elif drift_y == "linear":
        drift = dymu @ y
    else:
        raise ValueError(f"unknown drift_y {drift_y!r}")
    lam1 = lam1 + np.einsum("sc,sjc,j->s", dxsig, dzmu, y) + drift
    lam2 = (np.sum(dzmu ** 2, axis=(1, 2)) - np.sum(np.einsum("sjc,j->sc", dzmu, y) ** 2, axis=1)
            + 2 * np.einsum("j,sjc,skc,k->s", y, dzmu, dysig, y))
    return lam1, lam2


def check_A2(problem, tree, n_y_samples=16, n_state_samples=100, seed=0, states=None,
             drift_y="componentwise"):
    """Sampled check of the A2 sign condition and of the terminal Lipschitz constant.

    ``drift_y`` is passed to ``lambda_terms``.
    ``states`` may supply ``(X, Y, Z)`` processes (e.g. a solution) whose node
    values are used as evaluation points instead of standard-normal draws.

    Raises:
      ScopeViolation: ``n != 1``, ``sigma`` depends on ``z``, or ``z`` enters
        ``mu``/``f`` through a non-Ito operator.
    """
    if problem.n != 1:
        raise ScopeViolation(f"A2 is defined for n = 1, got n = {problem.n}")
    if problem.sigma.references("z"):
        raise ScopeViolation("A2 requires sigma independent of z")
    for op, fn in ((problem.ops.L1, problem.mu), (problem.ops.L3, problem.f)):
        if fn.references("z") and op.variant != "ito":
            raise ScopeViolation("A2 requires the Ito integrand operator wherever z enters")
    if problem.gamma is None:
        raise ValidationError("check_A2 needs gamma")
    d, m = problem.d, problem.m
    rng = np.random.default_rng(seed)
    S = n_state_samples
    t, w = _sample_states(tree, rng, S)
    if states is None:
        x = rng.standard_normal((S, 1))
        y_arg = rng.standard_normal((S, d))
        z = rng.standard_normal((S, d * m))
    else:
        X, Y, Z = states
        level = rng.integers(0, tree.N, size=S)
        node = np.array([rng.integers(0, tree.size(k)) for k in level])
        t = tree.times[level]
        w = np.stack([tree.W[k][i] for k, i in zip(level, node)])
        x = np.stack([X.at(k)[i] for k, i in zip(level, node)])
        y_arg = np.stack([Y.at(k)[i] for k, i in zip(level, node)])
        z = np.stack([Z.at(k)[i] for k, i in zip(level, node)])
    env = bind(t=t, x=x, y=y_arg, z=z, w=w)
    znames = [f"z{i + 1}" for i in range(d * m)]
    ynames = [f"y{i + 1}" for i in range(d)]
    dzmu = _derivatives(problem.mu, env, znames, S).reshape(S, d, m)
    dymu = _derivatives(problem.mu, env, ynames, S).reshape(S, d)
    dzf = _derivatives(problem.f, env, znames, S).reshape(S, d, d, m)
    # sigma is 1 x m; its y-gradient is arranged d x m
    dysig = np.transpose(_derivatives(problem.sigma, env, ynames, S), (0, 2, 1))
    dxsig = _derivatives(problem.sigma, env, ["x1"], S)[:, :, 0]
    if d == 1:
        directions = np.array([[-1.0], [1.0]])
    else:
        g = rng.standard_normal((n_y_samples, d))
        directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    gamma = float(problem.gamma)
    values, record = [], []
    for y in directions:
        lam1, lam2 = lambda_terms(dzmu, dzf, dysig, dxsig, dymu, y, drift_y)
        values.append(lam1 + gamma * np.abs(lam2))
        record.append((lam1, lam2))
    values = np.stack(values)
    flat = values.ravel()
    viol = np.maximum(flat, 0.0)
    order = np.argsort(-viol, kind="stable")[:3]
    worst = []
    for idx in order:
        if viol[idx] <= 0:
            continue
        j, s = divmod(int(idx), S)
        worst.append({"y_direction": directions[j].tolist(), "t": float(t[s]),
                      "x": x[s].tolist(), "y": y_arg[s].tolist(), "z": z[s].tolist(),
                      "lambda1": float(record[j][0][s]), "lambda2": float(record[j][1][s])})
    rep = AssumptionReport("A2")
    res = ConditionResult("A2.2", int(flat.size), float(max(viol.max(initial=0.0) - A2_TOL, 0.0)),
                          worst=worst,
                          note=f"drift_y={drift_y}; max of Lambda1 + gamma*|Lambda2| "
                               f"= {flat.max():.6g}")
    rep.conditions.append(res)
    if problem.C_prime is not None:
        lhs, rhs, psamp = _terminal_lipschitz(problem.terminal, tree, rng, S, 1,
                                              float(problem.C_prime))
        rep.conditions.append(_result("A2.1", lhs, rhs, psamp))
    return rep


def check_ym_lipschitz(tree, terminal, n_pairs=100, seed=0, n=1):
    """Random-pair check of the M and Y Lipschitz estimates in (X, V).

    Conditions: ``|dM|_S2 <= 2C |dX|_S2 + 2 |dV|_S2`` and
    ``|dY|_S2 <= 2C |dX|_S2 + 3 |dV|_S2`` with ``C`` the terminal constant.
    """
    if terminal.lipschitz is None:
        raise ValidationError("terminal Lipschitz constant must be declared")
    C = float(terminal.lipschitz)
    rng = np.random.default_rng(seed)
    lhs_m, rhs_m, lhs_y, rhs_y = [], [], [], []
    for _ in range(n_pairs):
        X, X2 = random_adapted(tree, n, rng), random_adapted(tree, n, rng)
        V, V2 = random_adapted(tree, terminal.d, rng), random_adapted(tree, terminal.d, rng)
        M, M2 = apply_M(tree, terminal, X, V), apply_M(tree, terminal, X2, V2)
        dx, dv = s2_norm(X - X2), s2_norm(V - V2)
        lhs_m.append(s2_norm(M.base - M2.base))
        rhs_m.append(2 * C * dx + 2 * dv)
        lhs_y.append(s2_norm((M.base - V) - (M2.base - V2)))
        rhs_y.append(2 * C * dx + 3 * dv)
    rep = AssumptionReport("YM-Lipschitz")
    rep.conditions.append(_result("M-lipschitz", lhs_m, rhs_m, {}))
    rep.conditions.append(_result("Y-lipschitz", lhs_y, rhs_y, {}))
    for c, lhs, rhs in ((rep.conditions[0], lhs_m, rhs_m), (rep.conditions[1], lhs_y, rhs_y)):
        c.note = f"max slack {float(np.max(np.array(lhs) - np.array(rhs))):.6g}"
    return rep
