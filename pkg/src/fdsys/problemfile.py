"""JSON problem files: schema, loading and saving."""

import copy
import json
from dataclasses import dataclass

import jsonschema

from .errors import ParseError, ValidationError
from .exprdsl import CoefficientFn
from .globalsolve import GlobalConfig
from .operators import OperatorKind, OperatorTuple, TerminalSpec
from .picard import PicardConfig, Problem

SCHEMA_VERSION = 1

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_exprs = {"type": "array", "minItems": 1,
          "items": {"anyOf": [{"type": "string"},
                              {"type": "array", "minItems": 1, "items": {"type": "string"}}]}}
_pairs = {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                      "prefixItems": [{"type": "integer"}, _num]}}
_vector = {"type": "array", "items": _num}

OPERATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["variant"],
    "properties": {
        "variant": {"enum": ["ito", "identity", "cond_qv", "running_qv", "residual_qv",
                             "delayed"]},
        "base": {"enum": ["ito", "identity", "cond_qv", "running_qv", "residual_qv"]},
        "alpha_z": _pairs,
        "K": {"type": "number", "minimum": 0},
        "mref": {"type": "string"},
    },
}


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False, "required": list(required),
            "properties": props}


PROBLEM_SCHEMA = _obj({
    "schema": {"const": SCHEMA_VERSION},
    "name": {"type": "string"},
    "description": {"type": "string"},
    "dims": _obj({k: {"type": "integer", "minimum": 1} for k in "ndm"}, "ndm"),
    "horizon": _obj({"T": {"type": "number", "exclusiveMinimum": 0}, "tau": _num,
                     "steps": {"type": "integer", "minimum": 1}}, ("T", "steps")),
    "coefficients": _obj({"mu": _exprs, "sigma": _exprs, "f": _exprs}, ("mu", "sigma", "f")),
    "terminal": _obj({"kind": {"enum": ["pointwise", "sup", "integral"]}, "expr": _exprs,
                      "lipschitz": _opt_num}, ("expr",)),
    "operators": _obj({"L1": OPERATOR_SCHEMA, "L2": OPERATOR_SCHEMA, "L3": OPERATOR_SCHEMA,
                       "allow_h2_diffusion": {"type": "boolean"}}, ("L1", "L2", "L3")),
    "initial": _obj({"x0": _vector, "v0": _vector}, ("x0",)),
    "measures": _obj({"alpha_V": _pairs}),
    "constants": _obj({k: _opt_num for k in ("C", "C_prime", "K", "gamma", "rho_C")}),
    "solver": _obj({"tol": {"type": "number", "exclusiveMinimum": 0},
                    "max_iter": {"type": "integer", "minimum": 1},
                    "divergence_window": {"type": "integer", "minimum": 2},
                    "relaxation": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}}),
    "global": _obj({"x_grid": {"type": "array", "minItems": 3, "maxItems": 3,
                               "prefixItems": [_num, _num, {"type": "integer", "minimum": 3}]},
                    "max_len": {"type": "number", "exclusiveMinimum": 0},
                    "min_len": {"type": "number", "exclusiveMinimum": 0}}),
}, ("schema", "dims", "horizon", "coefficients", "terminal", "operators", "initial"))


@dataclass
class LoadedProblem:
    """A validated problem with its horizon and solver settings."""

    problem: Problem
    T: float
    tau: float
    steps: int
    picard: PicardConfig
    global_cfg: GlobalConfig
    doc: dict


def validate_document(doc):
    """Check ``doc`` against the problem schema.

    Raises:
      ValidationError: with the path of the first offending key.
    """
    validator = jsonschema.Draft202012Validator(PROBLEM_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ValidationError(f"problem file invalid at {where}: {err.message}")


def _flat(exprs):
    out = []
    for e in exprs:
        out.extend(e if isinstance(e, list) else [e])
    return out


def _coef(exprs, shape, name):
    flat = _flat(exprs)
    if len(flat) != shape[0] * shape[1]:
        raise ValidationError(f"{name} needs {shape[0] * shape[1]} expressions, got {len(flat)}")
    try:
        return CoefficientFn.from_strings(flat, shape)
    except ParseError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def apply_overrides(doc, steps=None, T=None, max_len=None, x_grid=None):
    """Copy of ``doc`` with CLI overrides applied."""
    doc = copy.deepcopy(doc)
    if steps is not None:
        doc["horizon"]["steps"] = int(steps)
    if T is not None:
        doc["horizon"]["T"] = float(T)
    if max_len is not None or x_grid is not None:
        g = doc.setdefault("global", {})
        if max_len is not None:
            g["max_len"] = float(max_len)
        if x_grid is not None:
            lo, hi, G = x_grid
            g["x_grid"] = [float(lo), float(hi), int(G)]
    return doc


def build(doc):
    """Validate a problem document and build its objects."""
    validate_document(doc)
    n, d, m = (doc["dims"][k] for k in "ndm")
    c = doc["coefficients"]
    consts = doc.get("constants", {})
    term = doc["terminal"]
    lipschitz = term.get("lipschitz")
    if lipschitz is None:
        lipschitz = consts.get("C_prime")
    terminal = TerminalSpec(_coef(term["expr"], (d, 1), "terminal"), kind=term.get("kind",
                            "pointwise"), lipschitz=lipschitz)
    ops_doc = doc["operators"]
    ops = OperatorTuple(*(OperatorKind.from_dict(ops_doc[k]) for k in ("L1", "L2", "L3")))
    init = doc["initial"]
    if len(init["x0"]) != n:
        raise ValidationError(f"x0 needs {n} entries")
    if "v0" in init and len(init["v0"]) != d:
        raise ValidationError(f"v0 needs {d} entries")
    alpha_V = doc.get("measures", {}).get("alpha_V")
    problem = Problem(
        n, d, m,
        _coef(c["mu"], (n, 1), "mu"), _coef(c["sigma"], (n, m), "sigma"),
        _coef(c["f"], (d, 1), "f"), terminal, ops,
        x0=init["x0"], v0=init.get("v0"),
        alpha_V=None if alpha_V is None else tuple(tuple(p) for p in alpha_V),
        C=consts.get("C"), K=consts.get("K"), gamma=consts.get("gamma"),
        rho_C=consts.get("rho_C"), name=doc.get("name", "problem"),
        allow_h2_diffusion=ops_doc.get("allow_h2_diffusion", False))
    picard = PicardConfig(**doc.get("solver", {}))
    g = doc.get("global", {})
    global_cfg = GlobalConfig(x_grid=tuple(g["x_grid"]) if "x_grid" in g else None,
                              max_len=g.get("max_len", 0.5), min_len=g.get("min_len"),
                              picard=picard)
    hz = doc["horizon"]
    tau = float(hz.get("tau", 0.0))
    if not float(hz["T"]) > tau:
        raise ValidationError("horizon needs T > tau")
    return LoadedProblem(problem, float(hz["T"]), tau, int(hz["steps"]), picard, global_cfg, doc)


def load(source, **overrides):
    """Load ``builtin:NAME`` or a JSON file path, apply overrides, and build."""
    if source.startswith("builtin:"):
        from .registry import builtin_document
        doc = builtin_document(source[len("builtin:"):])
    else:
        try:
            with open(source) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{source}: not valid JSON ({exc})") from exc
        except OSError as exc:
            raise ValidationError(f"{source}: {exc.strerror}") from exc
    return build(apply_overrides(doc, **overrides))


def save(doc, path):
    """Validate ``doc`` and write it as sorted, indented JSON."""
    build(doc)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
