"""Operators on the tree: terminal martingale, backward value, and the L family.

``apply_M`` turns a pair (X, V) into the martingale ``E[Phi(X) + V_T | F_t]``;
``apply_Y`` subtracts V.  The ``OperatorKind`` variants map a martingale to
the process fed into the coefficients (its integrand, itself, or one of the
quadratic variation functionals).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, MissingReference, UnsupportedDimension,
                     ValidationError)
from .exprdsl import CoefficientFn, bind
from .space import (AdaptedProcess, MartingaleProcess, conditional_expectation, h2_norm,
                    martingale_from_terminal, s2_norm)

VARIANTS = ("ito", "identity", "cond_qv", "running_qv", "residual_qv", "delayed")
TERMINAL_KINDS = ("pointwise", "sup", "integral")


# --- terminal condition ---------------------------------------------------------

class TerminalSpec:
    """Terminal functional of the forward path.

    ``pointwise`` evaluates ``g(t, x, w)`` at the leaves; ``sup`` takes the
    componentwise maximum of ``g`` along each path (lookback type); ``integral``
    sums ``g * dt`` over the non-terminal levels (Asian type, left endpoint).
    """

    def __init__(self, exprs, d=1, kind="pointwise", lipschitz=None):
        if kind not in TERMINAL_KINDS:
            raise ValidationError(f"unknown terminal kind {kind!r}")
        self.kind = kind
        self.fn = exprs if isinstance(exprs, CoefficientFn) else \
            CoefficientFn.from_strings(exprs, (d, 1))
        self.d = self.fn.output_shape[0]
        self.lipschitz = lipschitz

    def _at(self, tree, X, k):
        env = bind(t=tree.times[k], x=X.at(k), w=tree.W[k])
        return self.fn(env, tree.size(k))[:, :, 0]

    def values(self, tree, X):
        """Terminal values per leaf, shape ``(leaves, d)``."""
        N = tree.N
        if self.kind == "pointwise":
            return self._at(tree, X, N)
        if self.kind == "sup":
            run = self._at(tree, X, 0)
            for k in range(1, N + 1):
                run = np.maximum(tree.expand(run, k - 1, k), self._at(tree, X, k))
            return run
        total = self._at(tree, X, 0) * tree.dt
        for k in range(1, N):
            total = tree.expand(total, k - 1, k) + self._at(tree, X, k) * tree.dt
        return tree.expand(total, N - 1, N)

    def check_names(self, allowed):
        self.fn.check_names(allowed, "terminal")

    def __repr__(self):
        return f"TerminalSpec({self.fn.sources()}, kind={self.kind!r})"


def apply_M(tree, terminal, X, V):
    """Martingale ``E[Phi(X) + V_T | F_t]`` with its representation."""
    if V.dim != terminal.d:
        raise DimensionMismatch(f"V has dimension {V.dim}, terminal has {terminal.d}")
    return martingale_from_terminal(tree, terminal.values(tree, X) + V.leaves)


def apply_Y(tree, terminal, X, V, M=None):
    """``Y = M - V`` nodewise; pass ``M`` to reuse an already computed martingale."""
    if M is None:
        M = apply_M(tree, terminal, X, V)
    return M.base - V


# --- operator family -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OperatorKind:
    """One member of the operator family.

    ``alpha_z`` is a list of ``(offset_steps, weight)`` with non-positive
    integer offsets, used by ``delayed`` on top of ``base``.  ``mref`` is the
    reference martingale for ``residual_qv``: a MartingaleProcess on the tree
    in use, or an expression in ``t`` and ``w`` whose conditional expectations
    define it.  ``K`` is the declared Lipschitz constant; when omitted the
    variant's own bound is used.
    """

    variant: str
    K: float = None
    alpha_z: tuple = ()
    base: str = "ito"
    mref: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown operator variant {self.variant!r}")
        if self.variant == "delayed":
            if self.base not in VARIANTS or self.base == "delayed":
                raise ValidationError(f"invalid base {self.base!r} for delayed operator")
            if not self.alpha_z:
                raise ValidationError("delayed operator needs alpha_z")
            pairs = []
            for off, wgt in self.alpha_z:
                if int(off) != off or off > 0:
                    raise ValidationError(f"alpha_z offset {off} must be a non-positive integer")
                if not (np.isfinite(wgt) and wgt >= 0):
                    raise ValidationError(f"alpha_z weight {wgt} must be finite and >= 0")
                pairs.append((int(off), float(wgt)))
            object.__setattr__(self, "alpha_z", tuple(pairs))
        if self.K is not None and not (np.isfinite(self.K) and self.K >= 0):
            raise ValidationError("K must be finite and nonnegative")

    @property
    def effective(self):
        return self.base if self.variant == "delayed" else self.variant

    @property
    def space(self):
        return "H2" if self.effective in ("ito", "cond_qv") else "S2"

    @property
    def mass(self):
        return sum(w for _, w in self.alpha_z)

    def output_dim(self, d, m):
        return d * m if self.effective == "ito" else (d if self.effective == "identity" else 1)

    def norm(self, p, per_root=False):
        return h2_norm(p, per_root) if self.space == "H2" else s2_norm(p, per_root)

    def default_K(self, horizon):
        base = math.sqrt(horizon) if self.effective == "cond_qv" else 1.0
        return self.mass * base if self.variant == "delayed" else base

    def declared_K(self, horizon):
        return self.default_K(horizon) if self.K is None else self.K

    def to_dict(self):
        out = {"variant": self.variant}
        if self.variant == "delayed":
            out["base"] = self.base
            out["alpha_z"] = [list(p) for p in self.alpha_z]
        if isinstance(self.mref, str):
            out["mref"] = self.mref
        if self.K is not None:
            out["K"] = self.K
        return out

    @classmethod
    def from_dict(cls, spec):
        return cls(variant=spec["variant"], K=spec.get("K"),
                   alpha_z=tuple(tuple(p) for p in spec.get("alpha_z", ())),
                   base=spec.get("base", "ito"), mref=spec.get("mref"))

    def reference(self, tree):
        """The reference martingale on ``tree`` for ``residual_qv``."""
        if self.mref is None:
            raise MissingReference("residual_qv needs a reference martingale")
        if isinstance(self.mref, MartingaleProcess):
            if self.mref.tree is not tree:
                raise DimensionMismatch("reference martingale lives on another tree")
            return self.mref
        key = id(tree)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not tree:
            fn = CoefficientFn.from_strings(self.mref, (1, 1))
            fn.check_names({"t", "w"} | {f"w{j + 1}" for j in range(tree.m)}, "mref")
            xi = fn(bind(t=tree.T, w=tree.W[tree.N]), tree.n_leaves)[:, 0, 0]
            hit = (tree, martingale_from_terminal(tree, xi))
            self._cache.clear()
            self._cache[key] = hit
        return hit[1]


def _sqrt0(a):
    return np.sqrt(np.maximum(a, 0.0))


def _residual_qv(tree, M, ref):
    qv = [np.zeros((tree.size(0), 1))]
    for k in range(tree.N):
        dM = tree.by_children(M.base.at(k + 1))[:, :, 0] - M.base.at(k)
        dR = tree.by_children(ref.base.at(k + 1))[:, :, 0] - ref.base.at(k)
        den = np.mean(dR * dR, axis=1)
        num = np.mean(dM * dR, axis=1)
        z = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        resid = dM - z[:, None] * dR
        step = np.mean(resid * resid, axis=1)[:, None]
        qv.append(tree.expand(qv[k] + step, k, k + 1))
    return qv


def _apply_plain(variant, kind, M):
    tree = M.tree
    if variant in ("cond_qv", "running_qv", "residual_qv") and M.d != 1:
        raise UnsupportedDimension(f"{variant} requires a scalar martingale, got d={M.d}")
    if variant == "ito":
        return M.Z
    if variant == "identity":
        return M.base
    if variant == "cond_qv":
        qvT = M.qv.leaves
        levels = tuple(_sqrt0(conditional_expectation(tree, qvT, k) - M.qv.at(k))
                       for k in range(tree.N + 1))
        return AdaptedProcess(tree, levels)
    if variant == "running_qv":
        return AdaptedProcess(tree, tuple(_sqrt0(q) for q in M.qv.levels))
    ref = kind.reference(tree)
    if ref.d != 1:
        raise UnsupportedDimension("reference martingale must be scalar")
    return AdaptedProcess(tree, tuple(_sqrt0(q) for q in _residual_qv(tree, M, ref)))


def apply_L(kind, M):
    """Apply an operator variant to the martingale ``M``.

    Raises:
      UnsupportedDimension: quadratic variation variants on a vector martingale.
      MissingReference: ``residual_qv`` without a reference martingale.
    """
    if kind.variant != "delayed":
        return _apply_plain(kind.variant, kind, M)
    tree = M.tree
    base = _apply_plain(kind.base, kind, M)
    levels = []
    for k in range(tree.N + 1):
        out = np.zeros((tree.size(k), base.dim))
        for off, wgt in kind.alpha_z:
            j = k + off
            if j >= 0 and wgt:
                out = out + wgt * tree.expand(base.at(j), j, k)
        levels.append(out)
    return AdaptedProcess(tree, tuple(levels))


@dataclass(frozen=True)
class OperatorTuple:
    L1: OperatorKind
    L2: OperatorKind
    L3: OperatorKind

    def __iter__(self):
        return iter((self.L1, self.L2, self.L3))


# --- (L1) checker ----------------------------------------------------------------

@dataclass
class L1Report:
    variant: str
    space: str
    n_samples: int
    K: float
    max_bound_ratio: float
    max_lipschitz_ratio: float
    bound_violations: int
    lipschitz_violations: int

    @property
    def passed(self):
        return self.bound_violations == 0 and self.lipschitz_violations == 0

    def to_dict(self):
        out = dict(self.__dict__)
        out["passed"] = self.passed
        return out


def random_martingale(tree, rng, d=1):
    """Martingale of standard-normal leaf values centred at the root mean."""
    xi = rng.standard_normal((tree.n_leaves, d))
    xi = xi - xi.mean(axis=0)
    return martingale_from_terminal(tree, xi)


def check_L1(kind, tree, n_samples=100, seed=0, rtol=1e-10):
    """Sample boundedness and Lipschitz ratios of ``kind`` against its declared K.

    Draws ``n_samples`` independent pairs of random martingales.
    Ratios are ``|L(M)| / |M|_S2`` and ``|L(M) - L(M')| / |M - M'|_S2`` with the
    output norm of the variant.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    K = kind.declared_K(tree.T - tree.tau)
    bound, lip = [], []
    for _ in range(n_samples):
        M, M2 = random_martingale(tree, rng), random_martingale(tree, rng)
        out, out2 = apply_L(kind, M), apply_L(kind, M2)
        for a, b in ((M, out), (M2, out2)):
            den = s2_norm(a.base)
            if den > 0:
                bound.append(kind.norm(b) / den)
        den = s2_norm(M.base - M2.base)
        if den > 0:
            lip.append(kind.norm(out - out2) / den)
    limit = K * (1 + rtol)
    return L1Report(
        variant=kind.variant, space=kind.space, n_samples=n_samples, K=K,
        max_bound_ratio=float(max(bound, default=0.0)),
        max_lipschitz_ratio=float(max(lip, default=0.0)),
        bound_violations=int(sum(r > limit for r in bound)),
        lipschitz_violations=int(sum(r > limit for r in lip)),
    )
