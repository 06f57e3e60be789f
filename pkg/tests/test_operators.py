import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdsys.errors import MissingReference, UnsupportedDimension, ValidationError
from fdsys.operators import (
    OperatorKind,
    TerminalSpec,
    apply_L,
    apply_M,
    apply_Y,
    check_L1,
    random_martingale,
)
from fdsys.space import (
    AdaptedProcess,
    build_tree,
    conditional_expectation,
    martingale_from_terminal,
    random_adapted,
    s2_norm,
)

TERMINALS = [("1.5", 0.0), ("x", 1.0), ("0.5*abs(x)", 0.5), ("max(-1, min(x, 1))", 1.0)]


def walk(tree, x0=0.0):
    return AdaptedProcess(tree, tuple(x0 + w for w in tree.W))


# --- M and Y ------------------------------------------------------------------

def test_M_of_constant():
    t = build_tree(1.0, 0.0, 3, 1)
    M = apply_M(t, TerminalSpec("2.5"), walk(t), AdaptedProcess.zeros(t, 1))
    assert all(np.all(v == 2.5) for v in M.base.levels)


def test_M_of_walk():
    t = build_tree(1.0, 0.0, 4, 1)
    M = apply_M(t, TerminalSpec("x"), walk(t, 0.3), AdaptedProcess.zeros(t, 1))
    for k in range(5):
        assert np.allclose(M.base.at(k), 0.3 + t.W[k], atol=1e-14)


def test_M_of_asian_constant_path():
    t = build_tree(1.0, 0.0, 3, 1)
    M = apply_M(t, TerminalSpec("x", kind="integral"), AdaptedProcess.constant(t, 1.0),
                AdaptedProcess.zeros(t, 1))
    # path enumeration: every path sums 1*dt over three steps
    assert all(np.allclose(v, 1.0) for v in M.base.levels)


def test_sup_terminal_matches_paths():
    t = build_tree(1.0, 0.0, 3, 1)
    X = walk(t)
    vals = TerminalSpec("abs(x)", kind="sup").values(t, X)[:, 0]
    # enumerate paths in node order
    oracle = []
    for choice in itertools.product([1, -1], repeat=3):
        w = np.cumsum([0.0] + [c * math.sqrt(1 / 3) for c in choice])
        oracle.append(np.max(np.abs(w)))
    assert np.allclose(vals, oracle)


def test_integral_terminal_matches_paths():
    t = build_tree(1.0, 0.0, 3, 1)
    vals = TerminalSpec("x + t", kind="integral").values(t, walk(t))[:, 0]
    oracle = []
    for choice in itertools.product([1, -1], repeat=3):
        w = np.cumsum([0.0] + [c * math.sqrt(1 / 3) for c in choice])
        oracle.append(sum((w[k] + k / 3) / 3 for k in range(3)))
    assert np.allclose(vals, oracle)


def test_Y_examples():
    t = build_tree(1.0, 0.0, 2, 1)
    zero = AdaptedProcess.zeros(t, 1)
    X = walk(t)
    M = apply_M(t, TerminalSpec("x"), X, zero)
    assert all(np.array_equal(a, b) for a, b in zip(apply_Y(t, TerminalSpec("x"), X, zero).levels,
                                                    M.base.levels))
    V = random_adapted(t, 1, np.random.default_rng(1))
    Y = apply_Y(t, TerminalSpec("0"), X, V)
    for k in range(3):
        ce = conditional_expectation(t, V.leaves, k)
        assert np.allclose(Y.at(k), ce - V.at(k))
    assert np.allclose(Y.leaves, 0.0)
    # V_t = t deterministic: Y_t = W_t + 1 - t
    Vt = AdaptedProcess(t, tuple(np.full((t.size(k), 1), t.times[k]) for k in range(3)))
    Y = apply_Y(t, TerminalSpec("x"), X, Vt)
    for k in range(3):
        assert np.allclose(Y.at(k), t.W[k] + 1 - t.times[k])


@pytest.mark.parametrize("src,C", TERMINALS)
def test_terminal_identity(src, C):
    t = build_tree(1.0, 0.0, 8, 1)
    rng = np.random.default_rng(4)
    X, V = random_adapted(t, 1, rng), random_adapted(t, 1, rng)
    term = TerminalSpec(src, lipschitz=C)
    Y = apply_Y(t, term, X, V)
    assert np.max(np.abs(Y.leaves - term.values(t, X))) <= 1e-12


@pytest.mark.parametrize("src,C", TERMINALS)
def test_M_Y_lipschitz(src, C):
    t = build_tree(1.0, 0.0, 6, 1)
    rng = np.random.default_rng(11)
    term = TerminalSpec(src, lipschitz=C)
    for _ in range(50):
        X, X2 = random_adapted(t, 1, rng), random_adapted(t, 1, rng)
        V, V2 = random_adapted(t, 1, rng, start=0), random_adapted(t, 1, rng, start=0)
        dX, dV = s2_norm(X - X2), s2_norm(V - V2)
        M, M2 = apply_M(t, term, X, V), apply_M(t, term, X2, V2)
        assert s2_norm(M.base - M2.base) <= 2 * C * dX + 2 * dV
        dY = s2_norm((M.base - V) - (M2.base - V2))
        assert dY <= 2 * C * dX + 3 * dV


# --- L family ----------------------------------------------------------------------

def test_identity_and_ito():
    t = build_tree(1.0, 0.0, 4, 1)
    M = martingale_from_terminal(t, t.W[4][:, 0])
    assert apply_L(OperatorKind("identity"), M) is M.base
    assert apply_L(OperatorKind("ito"), M) is M.Z


def test_running_qv_of_walk():
    t = build_tree(1.0, 0.0, 4, 1)
    out = apply_L(OperatorKind("running_qv"), martingale_from_terminal(t, t.W[4][:, 0]))
    for k in range(5):
        assert np.allclose(out.at(k), math.sqrt(t.times[k]))


def test_cond_qv_of_walk():
    t = build_tree(1.0, 0.0, 4, 1)
    out = apply_L(OperatorKind("cond_qv"), martingale_from_terminal(t, t.W[4][:, 0]))
    assert out.at(0)[0, 0] == pytest.approx(1.0)
    for k in range(5):
        assert np.allclose(out.at(k), math.sqrt(1.0 - t.times[k]))


def test_delayed_point_mass_is_base():
    t = build_tree(1.0, 0.0, 5, 1)
    M = random_martingale(t, np.random.default_rng(0))
    for base in ("ito", "identity", "running_qv", "cond_qv"):
        a = apply_L(OperatorKind("delayed", base=base, alpha_z=((0, 1.0),)), M)
        b = apply_L(OperatorKind(base), M)
        assert all(np.array_equal(x, y) for x, y in zip(a.levels, b.levels))


def test_delayed_shift_zero_pads():
    t = build_tree(1.0, 0.0, 4, 1)
    M = martingale_from_terminal(t, t.W[4][:, 0])
    out = apply_L(OperatorKind("delayed", base="identity", alpha_z=((-2, 0.5),)), M)
    assert np.all(out.at(0) == 0) and np.all(out.at(1) == 0)
    assert np.allclose(out.at(3), 0.5 * t.expand(t.W[1], 1, 3))


def test_residual_qv_reference_kinds():
    t = build_tree(1.0, 0.0, 3, 2)
    xi = t.W[3][:, 0] + t.W[3][:, 1]
    M = martingale_from_terminal(t, xi)
    by_expr = apply_L(OperatorKind("residual_qv", mref="w1"), M)
    ref = martingale_from_terminal(t, t.W[3][:, 0])
    by_proc = apply_L(OperatorKind("residual_qv", mref=ref), M)
    assert all(np.allclose(a, b) for a, b in zip(by_expr.levels, by_proc.levels))
    # the residual against w1 is w2, whose bracket is t
    for k in range(4):
        assert np.allclose(by_expr.at(k), math.sqrt(t.times[k]))


def test_errors():
    t = build_tree(1.0, 0.0, 2, 1)
    M2 = martingale_from_terminal(t, np.ones((4, 2)))
    with pytest.raises(UnsupportedDimension):
        apply_L(OperatorKind("running_qv"), M2)
    with pytest.raises(MissingReference):
        apply_L(OperatorKind("residual_qv"), martingale_from_terminal(t, np.ones(4)))
    with pytest.raises(ValidationError):
        OperatorKind("delayed", alpha_z=((1, 1.0),))
    with pytest.raises(ValidationError):
        OperatorKind("delayed", alpha_z=((0, -1.0),))
    with pytest.raises(ValidationError):
        OperatorKind("bogus")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_qv_functionals_nodewise_lipschitz(seed):
    t = build_tree(1.0, 0.0, 5, 1)
    rng = np.random.default_rng(seed)
    M, M2 = random_martingale(t, rng), random_martingale(t, rng)
    D = martingale_from_terminal(t, M.base.leaves - M2.base.leaves)
    run = apply_L(OperatorKind("running_qv"), M) - apply_L(OperatorKind("running_qv"), M2)
    cond = apply_L(OperatorKind("cond_qv"), M) - apply_L(OperatorKind("cond_qv"), M2)
    for k in range(6):
        assert np.all(run.at(k) ** 2 <= D.qv.at(k) * (1 + 1e-12) + 1e-15)
        rest = conditional_expectation(t, D.qv.leaves, k) - D.qv.at(k)
        assert np.all(cond.at(k) ** 2 <= rest * (1 + 1e-12) + 1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_residual_dominance(seed):
    t = build_tree(1.0, 0.0, 3, 2)
    rng = np.random.default_rng(seed)
    M = random_martingale(t, rng)
    R = apply_L(OperatorKind("residual_qv", mref="w1 + 0.3*w2"), M)
    full = apply_L(OperatorKind("running_qv"), M)
    for k in range(4):
        assert np.all(R.at(k) <= full.at(k) * (1 + 1e-12) + 1e-15)


def test_residual_additivity():
    # <M> = <M - R(M)> + <R(M)> nodewise, with R(M) the residual part
    t = build_tree(1.0, 0.0, 3, 2)
    M = random_martingale(t, np.random.default_rng(5))
    ref = martingale_from_terminal(t, t.W[3][:, 0])
    R2 = apply_L(OperatorKind("residual_qv", mref=ref), M)
    full = apply_L(OperatorKind("running_qv"), M)
    proj = np.zeros((1, 1))
    for k in range(3):
        dM = t.by_children(M.base.at(k + 1))[:, :, 0] - M.base.at(k)
        dR = t.by_children(ref.base.at(k + 1))[:, :, 0] - ref.base.at(k)
        z = np.mean(dM * dR, axis=1) / np.mean(dR * dR, axis=1)
        proj = t.expand(proj + (z ** 2 * np.mean(dR * dR, axis=1))[:, None], k, k + 1)
        assert np.allclose(full.at(k + 1) ** 2, proj + R2.at(k + 1) ** 2)


@pytest.mark.parametrize("kind", [
    OperatorKind("ito"),
    OperatorKind("identity"),
    OperatorKind("cond_qv"),
    OperatorKind("running_qv"),
    OperatorKind("residual_qv", mref="w"),
    OperatorKind("delayed", base="ito", alpha_z=((0, 0.5), (-1, 0.25), (-3, 0.5))),
])
def test_check_L1(kind):
    t = build_tree(1.0, 0.0, 6, 1)
    rep = check_L1(kind, t, n_samples=30, seed=2)
    assert rep.passed
    if kind.variant == "identity":
        assert rep.max_bound_ratio == pytest.approx(1.0, abs=1e-15)
        assert rep.max_lipschitz_ratio == pytest.approx(1.0, abs=1e-15)


def test_check_L1_flags_understated_K():
    t = build_tree(1.0, 0.0, 6, 1)
    rep = check_L1(OperatorKind("identity", K=0.5), t, n_samples=5, seed=0)
    assert not rep.passed and rep.bound_violations == 10


def test_check_L1_deterministic():
    t = build_tree(1.0, 0.0, 5, 1)
    a = check_L1(OperatorKind("cond_qv"), t, 10, seed=9).to_dict()
    assert a == check_L1(OperatorKind("cond_qv"), t, 10, seed=9).to_dict()
