"""Expression language for coefficient functions.

Grammar (EBNF, whitespace between tokens is ignored)::

    expr       = comparison ;
    comparison = additive [ ( "<" | "<=" | ">" | ">=" | "==" | "!=" ) additive ] ;
    additive   = term { ( "+" | "-" ) term } ;
    term       = unary { ( "*" | "/" ) unary } ;
    unary      = "-" unary | power ;
    power      = primary [ "^" unary ] ;
    primary    = number | name | name "(" expr { "," expr } ")" | "(" expr ")" ;

``^`` is right associative and binds tighter than unary minus, so ``-2^2`` is
``-4``.  Comparisons evaluate to 1 or 0 and are meant for ``select(c, a, b)``.
Evaluation is vectorised over numpy arrays; domain errors are raised rather
than silently producing ``nan`` or ``inf``.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, UnboundVariable, ValidationError

FUNCTIONS = {
    "exp": (1, 1),
    "log": (1, 1),
    "sqrt": (1, 1),
    "abs": (1, 1),
    "tanh": (1, 1),
    "min": (2, None),
    "max": (2, None),
    "select": (3, 3),
}

COMPARISONS = ("<=", ">=", "==", "!=", "<", ">")


# --- syntax tree ------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


def to_source(e):
    """Fully parenthesised source text that parses back to ``e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        return f"({e.op}{to_source(e.operand)})"
    if isinstance(e, Binary):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def free_variables(e):
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Unary):
        return free_variables(e.operand)
    if isinstance(e, Binary):
        return free_variables(e.left) | free_variables(e.right)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= free_variables(a)
        return out
    return set()


# --- tokenizer and parser ---------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|==|!=|[-+*/^(),<>])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src):
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind, text = m.lastgroup, m.group()
        if kind == "ws":
            for i, ch in enumerate(text):
                if ch == "\n":
                    line, line_start = line + 1, pos + i + 1
        else:
            toks.append(_Tok(kind, text, line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("end", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, src):
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def fail(self, expected):
        tok = self.tok
        what = "end of input" if tok.kind == "end" else f"{tok.text!r}"
        raise ParseError(f"unexpected {what}", tok.line, tok.col, expected)

    def accept(self, *texts):
        if self.tok.kind == "op" and self.tok.text in texts:
            self.i += 1
            return self.toks[self.i - 1].text
        return None

    def expect(self, text, also=()):
        if self.accept(text) is None:
            self.fail((text,) + tuple(also))

    def parse(self):
        e = self.comparison()
        if self.tok.kind != "end":
            self.fail(("end of input", "operator"))
        return e

    def comparison(self):
        left = self.additive()
        op = self.accept(*COMPARISONS)
        if op is not None:
            left = Binary(op, left, self.additive())
        return left

    def additive(self):
        left = self.term()
        while (op := self.accept("+", "-")) is not None:
            left = Binary(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while (op := self.accept("*", "/")) is not None:
            left = Binary(op, left, self.unary())
        return left

    def unary(self):
        if self.accept("-") is not None:
            return Unary("-", self.unary())
        return self.power()

    def power(self):
        base = self.primary()
        if self.accept("^") is not None:
            return Binary("^", base, self.unary())
        return base

    def primary(self):
        tok = self.tok
        if tok.kind == "number":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "name":
            self.i += 1
            if self.accept("(") is None:
                return Var(tok.text)
            if tok.text not in FUNCTIONS:
                raise ParseError(f"unknown function {tok.text!r}", tok.line, tok.col,
                                 FUNCTIONS)
            args = [self.comparison()]
            while self.accept(",") is not None:
                args.append(self.comparison())
            self.expect(")", also=(",",))
            lo, hi = FUNCTIONS[tok.text]
            if len(args) < lo or (hi is not None and len(args) > hi):
                want = str(lo) if lo == hi else f"at least {lo}"
                raise ParseError(f"{tok.text} takes {want} arguments, got {len(args)}",
                                 tok.line, tok.col)
            return Call(tok.text, tuple(args))
        if self.accept("(") is not None:
            e = self.comparison()
            self.expect(")")
            return e
        self.fail(("number", "name", "(", "-"))


def parse(src):
    """Parse expression source into a syntax tree.

    Raises:
      ParseError: with 1-based line/column and the expected-token set.
    """
    if not isinstance(src, str):
        raise TypeError("expression source must be a string")
    return _Parser(src).parse()


# --- evaluation ---------------------------------------------------------------

def _check(bad, mask, message):
    if mask is not None:
        bad = bad & mask
    if np.any(bad):
        raise DomainError(message)


def _eval(e, env, mask):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return np.asarray(env[e.name], dtype=float)
        except KeyError:
            raise UnboundVariable(f"unbound variable {e.name!r}") from None
    if isinstance(e, Unary):
        return -_eval(e.operand, env, mask)
    if isinstance(e, Binary):
        a = _eval(e.left, env, mask)
        b = _eval(e.right, env, mask)
        op = e.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            _check(b == 0, mask, "division by zero")
            return a / b
        if op == "^":
            out = np.power(a, b)
            _check(np.isnan(out) & ~np.isnan(a) & ~np.isnan(b), mask,
                   "power of a negative number to a non-integer exponent")
            _check((a == 0) & (b < 0), mask, "zero to a negative power")
            return out
        if op == "<":
            return (a < b).astype(float)
        if op == "<=":
            return (a <= b).astype(float)
        if op == ">":
            return (a > b).astype(float)
        if op == ">=":
            return (a >= b).astype(float)
        if op == "==":
            return (a == b).astype(float)
        if op == "!=":
            return (a != b).astype(float)
        raise ValueError(f"unknown operator {op!r}")
    if isinstance(e, Call):
        name = e.name
        if name == "select":
            cond = _eval(e.args[0], env, mask) != 0
            m_true = cond if mask is None else (mask & cond)
            m_false = ~cond if mask is None else (mask & ~cond)
            a = _eval(e.args[1], env, m_true)
            b = _eval(e.args[2], env, m_false)
            return np.where(cond, a, b)
        args = [_eval(a, env, mask) for a in e.args]
        if name == "min":
            return np.minimum.reduce(np.broadcast_arrays(*args))
        if name == "max":
            return np.maximum.reduce(np.broadcast_arrays(*args))
        (a,) = args
        if name == "exp":
            return np.exp(a)
        if name == "log":
            _check(a <= 0, mask, "log of a non-positive number")
            return np.log(a)
        if name == "sqrt":
            _check(a < 0, mask, "sqrt of a negative number")
            return np.sqrt(a)
        if name == "abs":
            return np.abs(a)
        if name == "tanh":
            return np.tanh(a)
        raise ValueError(f"unknown function {name!r}")
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e, env):
    """Evaluate ``e`` with variables bound in ``env`` (scalars or arrays).

    Returns a float when every binding is scalar, else an array broadcast over
    the bindings.

    Raises:
      UnboundVariable: a free variable has no binding.
      DomainError: log/sqrt outside their domain, division by zero, or a
        power with no real value.
    """
    if isinstance(e, str):
        e = parse(e)
    with np.errstate(all="ignore"):
        out = _eval(e, env, None)
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def finite_diff(e, var, env, h=None):
    """Central difference ``(e(v+h) - e(v-h)) / 2h`` in the variable ``var``.

    ``var`` may be a tuple of names bound to the same value (aliases such as
    ``x`` and ``x1``); all of them move together.  ``h`` defaults to
    ``1e-4 * max(1, |v|)``.
    """
    if isinstance(e, str):
        e = parse(e)
    names = (var,) if isinstance(var, str) else tuple(var)
    if names[0] not in env:
        raise UnboundVariable(f"unbound variable {names[0]!r}")
    v = np.asarray(env[names[0]], dtype=float)
    if h is None:
        h = 1e-4 * np.maximum(1.0, np.abs(v))
    up = dict(env)
    dn = dict(env)
    for name in names:
        up[name] = v + h
        dn[name] = v - h
    out = (np.asarray(evaluate(e, up)) - np.asarray(evaluate(e, dn))) / (2 * h)
    return float(out) if out.ndim == 0 else out


def aliases(name, env):
    """``name`` plus the bare prefix when it names the only component."""
    m = re.fullmatch(r"([A-Za-z_]+)1", name)
    if m and m.group(1) in env and f"{m.group(1)}2" not in env:
        return (name, m.group(1))
    return (name,)


# --- coefficient functions -------------------------------------------------------

def variable_names(prefix, count):
    """Names bound for a vector argument; a lone component also answers to ``prefix``."""
    names = [f"{prefix}{i + 1}" for i in range(count)]
    if count == 1:
        names.append(prefix)
    return names


def bind(t=None, **vectors):
    """Build an evaluation environment from per-node argument arrays.

    Each keyword maps a prefix (``x``, ``y``, ``z``, ``w``) to an array of shape
    ``(size, k)``; components become ``prefix1..prefixk``.
    """
    env = {}
    if t is not None:
        env["t"] = t
    for prefix, arr in vectors.items():
        if arr is None:
            continue
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        for i in range(arr.shape[1]):
            env[f"{prefix}{i + 1}"] = arr[:, i]
        if arr.shape[1] == 1:
            env[prefix] = arr[:, 0]
    return env


class CoefficientFn:
    """Matrix-valued coefficient given by one expression per entry (row-major)."""

    def __init__(self, exprs, output_shape):
        rows, cols = output_shape
        exprs = tuple(parse(e) if isinstance(e, str) else e for e in exprs)
        if len(exprs) != rows * cols:
            raise ValidationError(
                f"expected {rows * cols} expressions for shape {output_shape}, got {len(exprs)}")
        self.exprs = exprs
        self.output_shape = (rows, cols)
        self.variables = set().union(*(free_variables(e) for e in exprs))
        self.uses_randomness = any(v == "w" or re.fullmatch(r"w\d+", v) for v in self.variables)

    @classmethod
    def from_strings(cls, src, output_shape):
        """Accept a flat list, a list of rows, or a single string for a 1x1 slot."""
        if isinstance(src, str):
            src = [src]
        flat = []
        for item in src:
            flat.extend(item if isinstance(item, (list, tuple)) else [item])
        return cls(flat, output_shape)

    @classmethod
    def constant(cls, value, output_shape):
        rows, cols = output_shape
        return cls([Num(float(value))] * (rows * cols), output_shape)

    def references(self, prefix):
        """Whether any entry uses a component of the argument ``prefix``."""
        return any(v == prefix or re.fullmatch(prefix + r"\d+", v) for v in self.variables)

    def check_names(self, allowed, slot="coefficient"):
        extra = sorted(self.variables - set(allowed))
        if extra:
            raise ValidationError(f"{slot} uses undeclared variables: {', '.join(extra)}")

    def sources(self):
        return [to_source(e) for e in self.exprs]

    def __call__(self, env, size):
        """Evaluate every entry; returns an array of shape ``(size, rows, cols)``."""
        rows, cols = self.output_shape
        out = np.empty((size, rows * cols))
        for i, e in enumerate(self.exprs):
            out[:, i] = np.broadcast_to(evaluate(e, env), (size,))
        return out.reshape(size, rows, cols)
