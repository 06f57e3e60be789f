"""Built-in problems with their closed-form values of Y at the root, when known."""

import copy

from .errors import ValidationError

_ITO = {"variant": "ito"}
_IDENTITY = {"variant": "identity"}


def _doc(name, description, coefficients, terminal, operators, x0=(0.0,), dims=(1, 1, 1),
         constants=None, solver=None, steps=8, T=1.0, **extra):
    n, d, m = dims
    doc = {
        "schema": 1,
        "name": name,
        "description": description,
        "dims": {"n": n, "d": d, "m": m},
        "horizon": {"T": T, "tau": 0.0, "steps": steps},
        "coefficients": coefficients,
        "terminal": terminal,
        "operators": operators,
        "initial": {"x0": list(x0), "v0": [0.0] * d},
        "constants": constants or {"C": 1.0, "K": 1.0},
        "solver": {"tol": 1e-10, "max_iter": 200, "divergence_window": 5,
                   "relaxation": 1.0, **(solver or {})},
    }
    doc.update(extra)
    return doc


_BROWNIAN = {"mu": ["0"], "sigma": ["1"], "f": ["0"]}

_BUILTINS = {
    "zero": _doc(
        "zero", "Constant terminal value 1.5 with Brownian forward state.",
        _BROWNIAN, {"kind": "pointwise", "expr": ["1.5"], "lipschitz": 0.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _ITO},
        constants={"C": 1.0, "C_prime": 0.0, "K": 1.0, "gamma": 1.0, "rho_C": 1.0},
        **{"global": {"max_len": 0.5}}),
    "riccati": _doc(
        "riccati", "Linear coupled benchmark dX = -Y dt + dW, Phi(x) = x; "
        "Y_t = X_t / (1 + T - t).",
        {"mu": ["-y"], "sigma": ["1"], "f": ["0"]},
        {"kind": "pointwise", "expr": ["x"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _ITO}, x0=(1.0,),
        constants={"C": 1.0, "C_prime": 1.0, "K": 1.0, "gamma": 1.0, "rho_C": 1.0},
        solver={"relaxation": 0.5}, **{"global": {"max_len": 0.5}}),
    "decoupled_identity": _doc(
        "decoupled_identity", "Brownian forward state; V accumulates half the martingale M "
        "through the identity operator.",
        {"mu": ["0"], "sigma": ["1"], "f": ["0.5*z"]},
        {"kind": "pointwise", "expr": ["x"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _IDENTITY}, x0=(1.0,)),
    "lookback": _doc(
        "lookback", "Lookback terminal sup_t |X_t| of a Brownian forward state.",
        _BROWNIAN, {"kind": "sup", "expr": ["abs(x)"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _ITO}),
    "asian": _doc(
        "asian", "Asian terminal, the time integral of a Brownian forward state.",
        _BROWNIAN, {"kind": "integral", "expr": ["x"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _ITO}, x0=(1.0,)),
    "delayed": _doc(
        "delayed", "V driven by a two-point delayed average of the integrand.",
        {"mu": ["0"], "sigma": ["1"], "f": ["z"]},
        {"kind": "pointwise", "expr": ["x"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY,
         "L3": {"variant": "delayed", "base": "ito", "alpha_z": [[0, 0.5], [-1, 0.5]]}},
        x0=(1.0,)),
    "incomplete": _doc(
        "incomplete", "Two Brownian drivers, terminal w1*w2 orthogonal to the reference "
        "martingale w1; f uses the residual quadratic variation.",
        {"mu": ["0"], "sigma": [["1", "0"]], "f": ["0.5*z"]},
        {"kind": "pointwise", "expr": ["x + w1*w2"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": {"variant": "residual_qv", "mref": "w1"}},
        dims=(1, 1, 2), steps=6),
    "counterexample": _doc(
        "counterexample", "Diffusion driven by the integrand of M itself with Phi(x) = x + W_T; "
        "no solution exists.",
        {"mu": ["0"], "sigma": ["z"], "f": ["0"]},
        {"kind": "pointwise", "expr": ["x + w"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _ITO, "L3": _ITO, "allow_h2_diffusion": True}),
    "bad_lipschitz": _doc(
        "bad_lipschitz", "f = x^2 declared with C = 1, violating the Lipschitz assumption.",
        {"mu": ["0"], "sigma": ["1"], "f": ["x^2"]},
        {"kind": "pointwise", "expr": ["x"], "lipschitz": 1.0},
        {"L1": _ITO, "L2": _IDENTITY, "L3": _ITO}),
}


def _oracle(name, doc):
    T = doc["horizon"]["T"] - doc["horizon"].get("tau", 0.0)
    N = doc["horizon"]["steps"]
    x0 = doc["initial"]["x0"][0]
    dt = T / N
    if name == "zero":
        return 1.5
    if name == "riccati":
        return x0 / (1.0 + T)
    if name == "decoupled_identity":
        # M0 = x0 + 0.5 * sum_k E[M_k] dt = x0 + 0.5 T M0
        return x0 / (1.0 - 0.5 * T) if T < 2 else None
    if name == "asian":
        return x0 * T
    if name == "delayed":
        # Z = 1 before T; the first cell sees only half of it
        return x0 + T - 0.5 * dt
    if name == "bad_lipschitz":
        # E[sum_{k<N} (x0 + W_k)^2 dt]
        return x0 + sum((x0 ** 2 + k * dt) * dt for k in range(N))
    return None


def builtin_names():
    return sorted(_BUILTINS)


def builtin_document(name):
    """A fresh copy of the problem document of builtin ``name``."""
    if name not in _BUILTINS:
        raise ValidationError(f"unknown builtin {name!r}; known: {', '.join(builtin_names())}")
    return copy.deepcopy(_BUILTINS[name])


def oracle_y0(name, doc=None):
    """Closed-form Y at the root for ``doc`` (default the builtin itself), or None."""
    return _oracle(name, doc if doc is not None else _BUILTINS[name])
