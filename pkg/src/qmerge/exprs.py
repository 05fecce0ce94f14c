"""Immutable symbolic expressions: integer terms, formulas, models.

Terms cover linear integer arithmetic plus array reads (``select``) and
if-then-else selection.  Formulas cover comparisons, boolean connectives and
bounded universal quantification of the fixed shape

    forall i in [lo, hi]. body

All constructors fold constants and normalize a few shapes so that two
expressions built through different routes compare equal when they should:

* conjunction/disjunction are flattened n-ary, with unit elements dropped;
* ``a != b`` is represented as ``not (a == b)``;
* ``a < b`` is represented as the flipped ``b > a``;
* double negation cancels;
* ``+``/``-`` chains with constant offsets are collapsed, so ``(n + 1) - 1``
  is ``n`` and ``1 - 1`` is ``0``.

These rules are the "canonical form" referenced by the rest of the package:
syntactic equality of formulas always means equality of the canonical ASTs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union


class SortError(TypeError):
    """Mixing terms and formulas, or substituting at the wrong sort."""


class EvalError(ValueError):
    """Evaluation failed, e.g. a free symbol has no assignment."""


# ---------------------------------------------------------------------------
# Terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntConst:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Sym:
    """Integer-sorted scalar symbol."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class ArraySym:
    """Array symbol (integer index, integer contents)."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Select:
    array: ArraySym
    index: "Term"

    def __str__(self) -> str:
        return f"{self.array.name}[{self.index}]"


@dataclass(frozen=True)
class Add:
    left: "Term"
    right: "Term"

    def __str__(self) -> str:
        return f"{_paren_term(self.left)} + {_paren_term(self.right)}"


@dataclass(frozen=True)
class Sub:
    left: "Term"
    right: "Term"

    def __str__(self) -> str:
        return f"{_paren_term(self.left)} - {_paren_term(self.right)}"


@dataclass(frozen=True)
class Mul:
    """Multiplication by an integer constant (linear arithmetic only)."""

    scale: int
    term: "Term"

    def __str__(self) -> str:
        return f"{self.scale}*{_paren_term(self.term)}"


@dataclass(frozen=True)
class IteTerm:
    cond: "Formula"
    then: "Term"
    other: "Term"

    def __str__(self) -> str:
        return f"ite({self.cond}, {self.then}, {self.other})"


Term = Union[IntConst, Sym, ArraySym, Select, Add, Sub, Mul, IteTerm]


def _paren_term(t: Term) -> str:
    if isinstance(t, (Add, Sub, Mul, IteTerm)):
        return f"({t})"
    return str(t)


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoolConst:
    value: bool

    def __str__(self) -> str:
        return "true" if self.value else "false"


# Comparison operators kept in canonical form.  Strict less-than is stored as
# the flipped ">"; disequality is stored as a negated "==".
CMP_OPS = ("==", "<=", ">=", ">")

_CMP_EVAL = {
    "==": lambda a, b: a == b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
}

# Dual operator used when a negation is pushed onto a comparison for
# syntactic matching (not used by the canonical constructors).
CMP_NEGATION = {"<=": ">", ">": "<=", ">=": "<"}


@dataclass(frozen=True)
class Cmp:
    op: str
    left: Term
    right: Term

    def __str__(self) -> str:
        return f"{_paren_term(self.left)} {self.op} {_paren_term(self.right)}"


@dataclass(frozen=True)
class Not:
    arg: "Formula"

    def __str__(self) -> str:
        if isinstance(self.arg, Cmp) and self.arg.op == "==":
            return f"{_paren_term(self.arg.left)} != {_paren_term(self.arg.right)}"
        return f"!({self.arg})"


@dataclass(frozen=True)
class And:
    args: tuple["Formula", ...]

    def __str__(self) -> str:
        return " && ".join(_paren_formula(a, And) for a in self.args)


@dataclass(frozen=True)
class Or:
    args: tuple["Formula", ...]

    def __str__(self) -> str:
        return " || ".join(_paren_formula(a, Or) for a in self.args)


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left}) -> ({self.right})"


@dataclass(frozen=True)
class ForallRange:
    """Bounded universal quantifier: forall var in [lo, hi]. body."""

    var: Sym
    lo: Term
    hi: Term
    body: "Formula"

    def __str__(self) -> str:
        return f"forall {self.var} in [{self.lo}, {self.hi}]. ({self.body})"


Formula = Union[BoolConst, Cmp, Not, And, Or, Implies, ForallRange]

TRUE = BoolConst(True)
FALSE = BoolConst(False)


def _paren_formula(f: Formula, ctx: type) -> str:
    if isinstance(f, (Implies, ForallRange)):
        return f"({f})"
    if isinstance(f, (And, Or)) and not isinstance(f, ctx):
        return f"({f})"
    return str(f)


def is_term(x: object) -> bool:
    return isinstance(x, (IntConst, Sym, ArraySym, Select, Add, Sub, Mul, IteTerm))


def is_formula(x: object) -> bool:
    return isinstance(x, (BoolConst, Cmp, Not, And, Or, Implies, ForallRange))


# ---------------------------------------------------------------------------
# Smart constructors (canonical folding)
# ---------------------------------------------------------------------------


def mki(value: int) -> IntConst:
    return IntConst(int(value))


def add(a: Term, b: Term) -> Term:
    if isinstance(a, IntConst) and isinstance(b, IntConst):
        return IntConst(a.value + b.value)
    if isinstance(a, IntConst):
        a, b = b, a
    if isinstance(b, IntConst):
        if b.value == 0:
            return a
        # Collapse trailing constant offsets so folded instances match.
        if isinstance(a, Add) and isinstance(a.right, IntConst):
            return add(a.left, IntConst(a.right.value + b.value))
        if isinstance(a, Sub) and isinstance(a.right, IntConst):
            return add(a.left, IntConst(b.value - a.right.value))
        if b.value < 0:
            return Sub(a, IntConst(-b.value))
        return Add(a, b)
    return Add(a, b)


def sub(a: Term, b: Term) -> Term:
    if isinstance(a, IntConst) and isinstance(b, IntConst):
        return IntConst(a.value - b.value)
    if isinstance(b, IntConst):
        return add(a, IntConst(-b.value))
    if a == b:
        return IntConst(0)
    return Sub(a, b)


def mul(scale: object, term: object) -> Term:
    if isinstance(term, IntConst) and not isinstance(scale, IntConst):
        scale, term = term, scale
    if isinstance(scale, IntConst):
        scale = scale.value
    if not isinstance(scale, int):
        raise SortError("multiplication requires a constant operand")
    assert is_term(term)
    if isinstance(term, IntConst):
        return IntConst(scale * term.value)
    if scale == 0:
        return IntConst(0)
    if scale == 1:
        return term  # type: ignore[return-value]
    return Mul(scale, term)  # type: ignore[arg-type]


def select(array: ArraySym, index: Term) -> Select:
    if not isinstance(array, ArraySym):
        raise SortError(f"select needs an array symbol, got {array!r}")
    if not is_term(index) or isinstance(index, ArraySym):
        raise SortError(f"select index must be an integer term, got {index!r}")
    return Select(array, index)


def ite_term(cond: Formula, then: Term, other: Term) -> Term:
    if isinstance(cond, BoolConst):
        return then if cond.value else other
    if then == other:
        return then
    return IteTerm(cond, then, other)


def not_(f: Formula) -> Formula:
    if isinstance(f, BoolConst):
        return BoolConst(not f.value)
    if isinstance(f, Not):
        return f.arg
    return Not(f)


def and_(*fs: Formula) -> Formula:
    flat: list[Formula] = []
    for f in fs:
        if isinstance(f, BoolConst):
            if not f.value:
                return FALSE
            continue
        if isinstance(f, And):
            flat.extend(f.args)
        else:
            flat.append(f)
    if not flat:
        return TRUE
    if len(flat) == 1:
        return flat[0]
    return And(tuple(flat))


def or_(*fs: Formula) -> Formula:
    flat: list[Formula] = []
    for f in fs:
        if isinstance(f, BoolConst):
            if f.value:
                return TRUE
            continue
        if isinstance(f, Or):
            flat.extend(f.args)
        else:
            flat.append(f)
    if not flat:
        return FALSE
    if len(flat) == 1:
        return flat[0]
    return Or(tuple(flat))


def implies(a: Formula, b: Formula) -> Formula:
    if isinstance(a, BoolConst):
        return b if a.value else TRUE
    if isinstance(b, BoolConst) and b.value:
        return TRUE
    return Implies(a, b)


def cmp_op(op: str, a: Term, b: Term) -> Formula:
    if isinstance(a, IntConst) and isinstance(b, IntConst):
        return BoolConst(_CMP_EVAL[op](a.value, b.value))
    if a == b:
        return BoolConst(_CMP_EVAL[op](0, 0))
    return Cmp(op, a, b)


_cmp = cmp_op


def eq(a: Term, b: Term) -> Formula:
    return _cmp("==", a, b)


def neq(a: Term, b: Term) -> Formula:
    return not_(eq(a, b))


def le(a: Term, b: Term) -> Formula:
    return _cmp("<=", a, b)


def ge(a: Term, b: Term) -> Formula:
    return _cmp(">=", a, b)


def gt(a: Term, b: Term) -> Formula:
    return _cmp(">", a, b)


def lt(a: Term, b: Term) -> Formula:
    # Strict less-than normalizes to the flipped greater-than, matching the
    # conventional rendering of branch conditions like ``n > 0``.
    return _cmp(">", b, a)


def forall_range(var: Sym, lo: Term, hi: Term, body: Formula) -> Formula:
    if isinstance(body, BoolConst) and body.value:
        return TRUE
    if isinstance(lo, IntConst) and isinstance(hi, IntConst) and hi.value < lo.value:
        return TRUE
    return ForallRange(var, lo, hi, body)


def conjuncts(f: Formula) -> tuple[Formula, ...]:
    """Top-level conjuncts of a formula (the formula itself if not an And)."""
    if isinstance(f, And):
        return f.args
    if isinstance(f, BoolConst) and f.value:
        return ()
    return (f,)


# ---------------------------------------------------------------------------
# Traversal helpers
# ---------------------------------------------------------------------------

Node = Union[Term, Formula]


def children(x: Node) -> tuple[Node, ...]:
    if isinstance(x, Select):
        return (x.array, x.index)
    if isinstance(x, (Add, Sub)):
        return (x.left, x.right)
    if isinstance(x, Mul):
        return (x.term,)
    if isinstance(x, IteTerm):
        return (x.cond, x.then, x.other)
    if isinstance(x, Cmp):
        return (x.left, x.right)
    if isinstance(x, Not):
        return (x.arg,)
    if isinstance(x, (And, Or)):
        return x.args
    if isinstance(x, Implies):
        return (x.left, x.right)
    if isinstance(x, ForallRange):
        return (x.var, x.lo, x.hi, x.body)
    return ()


def walk(x: Node) -> Iterator[Node]:
    yield x
    for c in children(x):
        yield from walk(c)


def node_count(x: Node) -> int:
    return sum(1 for _ in walk(x))


def free_scalars(x: Node, bound: frozenset[str] = frozenset()) -> set[str]:
    """Names of free integer scalar symbols in ``x``."""
    if isinstance(x, Sym):
        return set() if x.name in bound else {x.name}
    if isinstance(x, ForallRange):
        out = free_scalars(x.lo, bound) | free_scalars(x.hi, bound)
        out |= free_scalars(x.body, bound | {x.var.name})
        return out
    out: set[str] = set()
    for c in children(x):
        if not isinstance(c, ArraySym):
            out |= free_scalars(c, bound)
    return out


def array_symbols(x: Node) -> set[str]:
    return {n.name for n in walk(x) if isinstance(n, ArraySym)}


def selects_in(x: Node) -> list[Select]:
    """All array-read subterms, in preorder."""
    return [n for n in walk(x) if isinstance(n, Select)]


def mentions_var(x: Node, name: str) -> bool:
    return name in free_scalars(x)


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------

_RENAME_COUNTER = [0]


def substitute(x: Node, var: Sym, replacement: Term) -> Node:
    """Capture-avoiding substitution of ``replacement`` for ``var``.

    Rebuilds through the smart constructors, so instances come out constant
    folded: ``substitute(n > x - 1, x, 1)`` is ``n > 0``.
    """
    if not isinstance(var, Sym):
        raise SortError(f"substitution variable must be a scalar symbol, got {var!r}")
    if not is_term(replacement) or isinstance(replacement, ArraySym):
        raise SortError(f"replacement must be an integer term, got {replacement!r}")
    return _subst(x, var, replacement)


def _subst(x: Node, var: Sym, rep: Term) -> Node:
    if isinstance(x, (IntConst, BoolConst, ArraySym)):
        return x
    if isinstance(x, Sym):
        return rep if x == var else x
    if isinstance(x, Select):
        return select(x.array, _subst(x.index, var, rep))
    if isinstance(x, Add):
        return add(_subst(x.left, var, rep), _subst(x.right, var, rep))
    if isinstance(x, Sub):
        return sub(_subst(x.left, var, rep), _subst(x.right, var, rep))
    if isinstance(x, Mul):
        return mul(x.scale, _subst(x.term, var, rep))
    if isinstance(x, IteTerm):
        return ite_term(
            _subst(x.cond, var, rep), _subst(x.then, var, rep), _subst(x.other, var, rep)
        )
    if isinstance(x, Cmp):
        return _cmp(x.op, _subst(x.left, var, rep), _subst(x.right, var, rep))
    if isinstance(x, Not):
        return not_(_subst(x.arg, var, rep))
    if isinstance(x, And):
        return and_(*(_subst(a, var, rep) for a in x.args))
    if isinstance(x, Or):
        return or_(*(_subst(a, var, rep) for a in x.args))
    if isinstance(x, Implies):
        return implies(_subst(x.left, var, rep), _subst(x.right, var, rep))
    if isinstance(x, ForallRange):
        lo = _subst(x.lo, var, rep)
        hi = _subst(x.hi, var, rep)
        if x.var == var:
            return forall_range(x.var, lo, hi, x.body)
        if x.var.name in free_scalars(rep):
            _RENAME_COUNTER[0] += 1
            fresh = Sym(f"{x.var.name}${_RENAME_COUNTER[0]}")
            body = _subst(x.body, x.var, fresh)
            return forall_range(fresh, lo, hi, _subst(body, var, rep))
        return forall_range(x.var, lo, hi, _subst(x.body, var, rep))
    raise SortError(f"cannot substitute in {x!r}")


# ---------------------------------------------------------------------------
# Models and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrayModelValue:
    """Total integer map: explicit cells plus a default everywhere else."""

    default: int = 0
    cells: tuple[tuple[int, int], ...] = ()

    @staticmethod
    def from_list(values: Iterable[int], default: int = 0) -> "ArrayModelValue":
        return ArrayModelValue(default, tuple(enumerate(values))).normalized()

    @staticmethod
    def from_dict(cells: Mapping[int, int], default: int = 0) -> "ArrayModelValue":
        return ArrayModelValue(default, tuple(sorted(cells.items()))).normalized()

    def normalized(self) -> "ArrayModelValue":
        kept = tuple(sorted((o, v) for o, v in dict(self.cells).items() if v != self.default))
        return ArrayModelValue(self.default, kept)

    def get(self, offset: int) -> int:
        for o, v in self.cells:
            if o == offset:
                return v
        return self.default

    def set(self, offset: int, value: int) -> "ArrayModelValue":
        cells = dict(self.cells)
        cells[offset] = value
        return ArrayModelValue.from_dict(cells, self.default)

    def as_list(self, length: int) -> list[int]:
        return [self.get(i) for i in range(length)]


@dataclass(frozen=True)
class Model:
    """Assignment of integers to scalars and integer maps to arrays."""

    scalars: tuple[tuple[str, int], ...] = ()
    arrays: tuple[tuple[str, ArrayModelValue], ...] = ()

    @staticmethod
    def of(scalars: Mapping[str, int] | None = None,
           arrays: Mapping[str, ArrayModelValue | list[int]] | None = None) -> "Model":
        arr = {}
        for name, v in (arrays or {}).items():
            arr[name] = v.normalized() if isinstance(v, ArrayModelValue) else ArrayModelValue.from_list(v)
        return Model(tuple(sorted((scalars or {}).items())), tuple(sorted(arr.items())))

    def scalar_map(self) -> dict[str, int]:
        return dict(self.scalars)

    def array_map(self) -> dict[str, ArrayModelValue]:
        return dict(self.arrays)

    def scalar(self, name: str) -> int:
        for n, v in self.scalars:
            if n == name:
                return v
        raise EvalError(f"model has no assignment for scalar '{name}'")

    def array(self, name: str) -> ArrayModelValue:
        for n, v in self.arrays:
            if n == name:
                return v
        raise EvalError(f"model has no assignment for array '{name}'")

    def has_scalar(self, name: str) -> bool:
        return any(n == name for n, _ in self.scalars)

    def bind(self, name: str, value: int) -> "Model":
        m = self.scalar_map()
        m[name] = value
        return Model(tuple(sorted(m.items())), self.arrays)

    def update_select(self, array: str, offset: int, value: int) -> "Model":
        """New model differing only at one (array, offset) point."""
        arrs = self.array_map()
        arrs[array] = arrs.get(array, ArrayModelValue()).set(offset, value)
        return Model(self.scalars, tuple(sorted(arrs.items())))

    def to_json(self) -> dict:
        return {
            "scalars": {n: v for n, v in self.scalars},
            "arrays": {
                n: {"default": a.default, "cells": {str(o): v for o, v in a.cells}}
                for n, a in self.arrays
            },
        }


def evaluate(model: Model, x: Node) -> int | bool:
    """Evaluate under ``model``; quantifiers expand over their finite range."""
    return _eval(model, x, {})


def _eval(m: Model, x: Node, env: dict[str, int]) -> int | bool:
    if isinstance(x, IntConst):
        return x.value
    if isinstance(x, BoolConst):
        return x.value
    if isinstance(x, Sym):
        if x.name in env:
            return env[x.name]
        return m.scalar(x.name)
    if isinstance(x, ArraySym):
        raise EvalError("array symbol evaluated outside a select")
    if isinstance(x, Select):
        return m.array(x.array.name).get(_eval_i(m, x.index, env))
    if isinstance(x, Add):
        return _eval_i(m, x.left, env) + _eval_i(m, x.right, env)
    if isinstance(x, Sub):
        return _eval_i(m, x.left, env) - _eval_i(m, x.right, env)
    if isinstance(x, Mul):
        return x.scale * _eval_i(m, x.term, env)
    if isinstance(x, IteTerm):
        return _eval(m, x.then if _eval_b(m, x.cond, env) else x.other, env)
    if isinstance(x, Cmp):
        return _CMP_EVAL[x.op](_eval_i(m, x.left, env), _eval_i(m, x.right, env))
    if isinstance(x, Not):
        return not _eval_b(m, x.arg, env)
    if isinstance(x, And):
        return all(_eval_b(m, a, env) for a in x.args)
    if isinstance(x, Or):
        return any(_eval_b(m, a, env) for a in x.args)
    if isinstance(x, Implies):
        return (not _eval_b(m, x.left, env)) or _eval_b(m, x.right, env)
    if isinstance(x, ForallRange):
        lo = _eval_i(m, x.lo, env)
        hi = _eval_i(m, x.hi, env)
        for v in range(lo, hi + 1):
            inner = dict(env)
            inner[x.var.name] = v
            if not _eval_b(m, x.body, inner):
                return False
        return True
    raise EvalError(f"cannot evaluate {x!r}")


def _eval_i(m: Model, t: Node, env: dict[str, int]) -> int:
    v = _eval(m, t, env)
    if isinstance(v, bool):
        raise SortError(f"expected integer, got boolean from {t}")
    return v


def _eval_b(m: Model, f: Node, env: dict[str, int]) -> bool:
    v = _eval(m, f, env)
    if not isinstance(v, bool):
        raise SortError(f"expected boolean, got integer from {f}")
    return v


# ---------------------------------------------------------------------------
# Structural hashing
# ---------------------------------------------------------------------------

# Every integer constant leaf hashes to this sentinel, so formulas that
# differ only in constants collide on purpose; a negation contributes its
# own tag, so a condition never collides with its negation.
_CONST_SENTINEL = b"#int"


def structural_hash(f: Node) -> int:
    """Constant-blind 64-bit structural digest of a quantifier-free formula."""
    if isinstance(f, ForallRange) or any(isinstance(n, ForallRange) for n in walk(f)):
        raise SortError("structural_hash is defined on quantifier-free formulas")
    h = hashlib.blake2b(digest_size=8)
    _feed(f, h)
    return int.from_bytes(h.digest(), "big")


def _feed(x: Node, h) -> None:
    if isinstance(x, IntConst):
        h.update(_CONST_SENTINEL)
        return
    if isinstance(x, BoolConst):
        h.update(b"#b1" if x.value else b"#b0")
        return
    if isinstance(x, Sym):
        h.update(b"#s" + x.name.encode() + b";")
        return
    if isinstance(x, ArraySym):
        h.update(b"#a" + x.name.encode() + b";")
        return
    tag = {
        Select: b"(sel",
        Add: b"(add",
        Sub: b"(sub",
        Mul: b"(mul",
        IteTerm: b"(ite",
        Not: b"(not",
        And: b"(and",
        Or: b"(or",
        Implies: b"(imp",
    }.get(type(x))
    if tag is None:
        if isinstance(x, Cmp):
            h.update(b"(cmp" + x.op.encode())
        else:
            raise SortError(f"cannot hash {x!r}")
    else:
        h.update(tag)
    for c in children(x):
        _feed(c, h)
    h.update(b")")


def skeleton_key(f: Node) -> str:
    """Constant-blind serialization (the exact information structural_hash digests)."""
    if isinstance(f, IntConst):
        return "#"
    if isinstance(f, BoolConst):
        return str(f.value)
    if isinstance(f, (Sym, ArraySym)):
        return f.name
    op = f.op if isinstance(f, Cmp) else type(f).__name__
    inner = ",".join(skeleton_key(c) for c in children(f))
    return f"{op}({inner})"


# ---------------------------------------------------------------------------
# SMT-LIB v2 printing
# ---------------------------------------------------------------------------


def to_sexpr(x: Node, bound: frozenset[str] = frozenset()) -> str:
    if isinstance(x, IntConst):
        return str(x.value) if x.value >= 0 else f"(- {-x.value})"
    if isinstance(x, BoolConst):
        return "true" if x.value else "false"
    if isinstance(x, (Sym, ArraySym)):
        return x.name
    if isinstance(x, Select):
        return f"(select {x.array.name} {to_sexpr(x.index, bound)})"
    if isinstance(x, Add):
        return f"(+ {to_sexpr(x.left, bound)} {to_sexpr(x.right, bound)})"
    if isinstance(x, Sub):
        return f"(- {to_sexpr(x.left, bound)} {to_sexpr(x.right, bound)})"
    if isinstance(x, Mul):
        return f"(* {to_sexpr(IntConst(x.scale))} {to_sexpr(x.term, bound)})"
    if isinstance(x, IteTerm):
        return f"(ite {to_sexpr(x.cond, bound)} {to_sexpr(x.then, bound)} {to_sexpr(x.other, bound)})"
    if isinstance(x, Cmp):
        op = {"==": "=", "<=": "<=", ">=": ">=", ">": ">"}[x.op]
        return f"({op} {to_sexpr(x.left, bound)} {to_sexpr(x.right, bound)})"
    if isinstance(x, Not):
        return f"(not {to_sexpr(x.arg, bound)})"
    if isinstance(x, And):
        return "(and " + " ".join(to_sexpr(a, bound) for a in x.args) + ")"
    if isinstance(x, Or):
        return "(or " + " ".join(to_sexpr(a, bound) for a in x.args) + ")"
    if isinstance(x, Implies):
        return f"(=> {to_sexpr(x.left, bound)} {to_sexpr(x.right, bound)})"
    if isinstance(x, ForallRange):
        rng = f"(and (<= {to_sexpr(x.lo, bound)} {x.var.name}) (<= {x.var.name} {to_sexpr(x.hi, bound)}))"
        inner = to_sexpr(x.body, bound | {x.var.name})
        return f"(forall (({x.var.name} Int)) (=> {rng} {inner}))"
    raise SortError(f"cannot print {x!r}")


def smtlib_script(clauses: Iterable[Formula], logic: str = "AUFLIA") -> str:
    """Full SMT-LIB script: declarations in first-occurrence order, then asserts."""
    clauses = list(clauses)
    scalars: list[str] = []
    arrays: list[str] = []
    for c in clauses:
        for name in sorted(free_scalars(c)):
            if name not in scalars:
                scalars.append(name)
        for name in sorted(array_symbols(c)):
            if name not in arrays:
                arrays.append(name)
    lines = [f"(set-logic {logic})"]
    lines += [f"(declare-const {n} Int)" for n in scalars]
    lines += [f"(declare-const {n} (Array Int Int))" for n in arrays]
    lines += [f"(assert {to_sexpr(c)})" for c in clauses]
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Diagnostic round-trip parser for the str() rendering
# ---------------------------------------------------------------------------


class PPParseError(ValueError):
    pass


def parse_pp(text: str) -> Node:
    """Parse the ``str()`` rendering of a term or formula back into an AST.

    Array identifiers are recognized by use (``name[...]``), so a bare
    identifier always parses as a scalar symbol.
    """
    toks = _pp_tokens(text)
    p = _PPParser(toks)
    out = p.parse_formula_or_term()
    p.expect_end()
    return out


_PP_PUNCT = ["&&", "||", "->", "==", "!=", "<=", ">=", "<", ">", "(", ")", "[", "]",
             ",", "+", "-", "*", "!", ".", "$"]


def _pp_tokens(text: str) -> list[str]:
    toks: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        for p in _PP_PUNCT:
            if text.startswith(p, i):
                toks.append(p)
                i += len(p)
                break
        else:
            if ch.isdigit():
                j = i
                while j < len(text) and text[j].isdigit():
                    j += 1
                toks.append(text[i:j])
                i = j
            elif ch.isalpha() or ch == "_":
                j = i
                while j < len(text) and (text[j].isalnum() or text[j] in "_$"):
                    j += 1
                toks.append(text[i:j])
                i = j
            else:
                raise PPParseError(f"unexpected character {ch!r}")
    return toks


class _PPParser:
    def __init__(self, toks: list[str]):
        self.toks = toks
        self.pos = 0

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> str:
        t = self.peek()
        if t is None:
            raise PPParseError("unexpected end of input")
        self.pos += 1
        return t

    def expect(self, tok: str) -> None:
        t = self.take()
        if t != tok:
            raise PPParseError(f"expected {tok!r}, got {t!r}")

    def expect_end(self) -> None:
        if self.peek() is not None:
            raise PPParseError(f"trailing input at {self.peek()!r}")

    def parse_formula_or_term(self):
        return self.parse_implies()

    def parse_implies(self):
        left = self.parse_or()
        if self.peek() == "->":
            self.take()
            right = self.parse_implies()
            return implies(left, right)
        return left

    def parse_or(self):
        out = self.parse_and()
        while self.peek() == "||":
            self.take()
            out = or_(out, self.parse_and())
        return out

    def parse_and(self):
        out = self.parse_cmp()
        while self.peek() == "&&":
            self.take()
            out = and_(out, self.parse_cmp())
        return out

    def parse_cmp(self):
        if self.peek() == "forall":
            self.take()
            var = Sym(self.take())
            self.expect("in")
            self.expect("[")
            lo = self.parse_sum()
            self.expect(",")
            hi = self.parse_sum()
            self.expect("]")
            self.expect(".")
            body = self.parse_cmp()
            return forall_range(var, lo, hi, body)
        left = self.parse_sum()
        op = self.peek()
        if op in ("==", "!=", "<=", ">=", "<", ">"):
            self.take()
            right = self.parse_sum()
            return {"==": eq, "!=": neq, "<=": le, ">=": ge, "<": lt, ">": gt}[op](left, right)
        return left

    def parse_sum(self):
        out = self.parse_product()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.parse_product()
            out = add(out, rhs) if op == "+" else sub(out, rhs)
        return out

    def parse_product(self):
        out = self.parse_atom()
        while self.peek() == "*":
            self.take()
            rhs = self.parse_atom()
            out = mul(out, rhs)
        return out

    def parse_atom(self):
        t = self.take()
        if t == "(":
            out = self.parse_formula_or_term()
            self.expect(")")
            return out
        if t == "!":
            self.expect("(")
            inner = self.parse_formula_or_term()
            self.expect(")")
            return not_(inner)
        if t == "-":
            inner = self.parse_atom()
            return sub(IntConst(0), inner) if not isinstance(inner, IntConst) else IntConst(-inner.value)
        if t == "true":
            return TRUE
        if t == "false":
            return FALSE
        if t == "ite":
            self.expect("(")
            c = self.parse_formula_or_term()
            self.expect(",")
            a = self.parse_sum()
            self.expect(",")
            b = self.parse_sum()
            self.expect(")")
            return ite_term(c, a, b)
        if t.isdigit():
            return IntConst(int(t))
        if t[0].isalpha() or t[0] == "_":
            if self.peek() == "[":
                self.take()
                idx = self.parse_sum()
                self.expect("]")
                return select(ArraySym(t), idx)
            return Sym(t)
        raise PPParseError(f"unexpected token {t!r}")
