"""Small problem constructors shared by the test modules."""

from scipy.integrate import solve_ivp

from fdsys.exprdsl import CoefficientFn
from fdsys.operators import OperatorKind, OperatorTuple, TerminalSpec
from fdsys.picard import Problem

ITO = OperatorKind("ito")
IDENTITY = OperatorKind("identity")


def scalar(src):
    return CoefficientFn.from_strings(src, (1, 1))


def make(mu="0", sigma="1", f="0", phi="x", x0=0.0, ops=None, **kw):
    ops = ops or OperatorTuple(ITO, IDENTITY, ITO)
    lipschitz = kw.pop("lipschitz", 1.0)
    kind = kw.pop("kind", "pointwise")
    return Problem(1, 1, 1, scalar(mu), scalar(sigma), scalar(f),
                   TerminalSpec(phi, kind=kind, lipschitz=lipschitz), ops, x0=x0, **kw)


def riccati(**kw):
    kw.setdefault("C", 1.0)
    kw.setdefault("gamma", 1.0)
    kw.setdefault("rho_C", 1.0)
    return make(mu="-y", phi="x", x0=kw.pop("x0", 1.0), **kw)


def counterexample(allow=True):
    return make(sigma="z", phi="x + w", ops=OperatorTuple(ITO, ITO, ITO),
                allow_h2_diffusion=allow)


def riccati_alpha0(T):
    """alpha(0) for alpha' = alpha^2, alpha(T) = 1, integrated numerically backwards."""
    sol = solve_ivp(lambda t, a: a ** 2, (T, 0.0), [1.0], rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1])
