"""Solving quantified array queries with a staged model-construction procedure.

Queries are conjunctions of clauses where each clause is quantifier free or a
bounded universal of the shape ``forall i in [1, k]. body`` with a
quantifier-free body.  ``compute_model`` works in four stages:

1. *strip*    — weaken to an implied quantifier-free query and solve that;
2. *duplicate* — spread the one explicitly constrained cell value across the
   quantified range of each array;
3. *repair*   — collect conflicting cells, re-solve with targeted
   instantiations and pinned scalars, then duplicate around the conflicts;
4. *fallback* — hand the original quantified query to the backend.

A returned model is always re-checked with ``evaluate`` against the original
query before it is reported.

Two backends are provided: a bounded brute-force enumerator (the default,
also used as the test oracle) and an SMT-LIB v2 subprocess client.
"""

from __future__ import annotations

import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from enum import Enum

from .exprs import (
    And,
    ArrayModelValue,
    ArraySym,
    BoolConst,
    Cmp,
    EvalError,
    FALSE,
    ForallRange,
    Formula,
    Implies,
    IntConst,
    Model,
    Node,
    Not,
    Or,
    Select,
    Sym,
    Term,
    TRUE,
    add,
    and_,
    array_symbols,
    children,
    conjuncts,
    eq,
    evaluate,
    free_scalars,
    ge,
    gt,
    implies,
    is_formula,
    ite_term,
    le,
    mul,
    not_,
    or_,
    select,
    selects_in,
    sub,
    substitute,
    to_sexpr,
    walk,
)


class QueryShapeError(ValueError):
    pass


class DomainTooLarge(ValueError):
    pass


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    """Ordered conjunction of clauses; clause boundaries are preserved."""

    clauses: tuple[Formula, ...]

    @staticmethod
    def of(*clauses: Formula) -> "Query":
        return Query(tuple(clauses))

    @staticmethod
    def from_formula(f: Formula) -> "Query":
        return Query(conjuncts(f))

    def to_formula(self) -> Formula:
        return and_(*self.clauses)

    def quantified(self) -> list[ForallRange]:
        return [c for c in self.clauses if isinstance(c, ForallRange)]

    def qfree(self) -> list[Formula]:
        return [c for c in self.clauses if not isinstance(c, ForallRange)]

    def scalars_in_order(self) -> list[str]:
        out: list[str] = []
        for c in self.clauses:
            bound = {c.var.name} if isinstance(c, ForallRange) else set()
            for node in walk(c):
                if isinstance(node, Sym) and node.name not in bound and node.name not in out:
                    out.append(node.name)
        return out

    def array_names(self) -> list[str]:
        out: list[str] = []
        for c in self.clauses:
            for name in sorted(array_symbols(c)):
                if name not in out:
                    out.append(name)
        return out


def check_canonical(q: Query) -> None:
    """Validate the canonical clause shape; raise QueryShapeError otherwise."""
    for c in q.clauses:
        if isinstance(c, ForallRange):
            if c.lo != IntConst(1):
                raise QueryShapeError(f"quantified clause must start at 1: {c}")
            if not isinstance(c.hi, (Sym, IntConst)):
                raise QueryShapeError(f"quantifier bound must be a scalar or constant: {c}")
            if any(isinstance(n, ForallRange) for n in walk(c.body)):
                raise QueryShapeError("nested quantifiers are not supported")
            if c.var.name in free_scalars(c.lo) | free_scalars(c.hi):
                raise QueryShapeError("bound variable used in its own range")
        elif any(isinstance(n, ForallRange) for n in walk(c)):
            raise QueryShapeError(f"quantifier not at clause top level: {c}")


def evaluate_query(model: Model, q: Query) -> bool:
    return all(evaluate(model, c) is True for c in q.clauses)


def totalize(model: Model, q: Query) -> Model:
    """Extend a model with defaults so it covers every symbol of the query."""
    scalars = model.scalar_map()
    for name in q.scalars_in_order():
        scalars.setdefault(name, 0)
    arrays = model.array_map()
    for name in q.array_names():
        arrays.setdefault(name, ArrayModelValue())
    return Model.of(scalars, arrays)


# ---------------------------------------------------------------------------
# Access pairs
# ---------------------------------------------------------------------------


def reads(c: Node) -> list[tuple[str, Term]]:
    """All (array, index) access pairs in a clause, deduplicated in order."""
    out: list[tuple[str, Term]] = []
    for s in selects_in(c):
        pair = (s.array.name, s.index)
        if pair not in out:
            out.append(pair)
    return out


def q_reads(clause: ForallRange) -> list[tuple[str, Term]]:
    """Access pairs of a quantified clause whose index uses the bound variable."""
    return [(a, e) for a, e in reads(clause.body)
            if clause.var.name in free_scalars(e)]


def q_arrays(q: Query) -> list[str]:
    out: list[str] = []
    for c in q.quantified():
        for a, _ in q_reads(c):
            if a not in out:
                out.append(a)
    return out


# ---------------------------------------------------------------------------
# Stage 1: quantifier stripping
# ---------------------------------------------------------------------------


def _negate_for_match(f: Formula) -> Formula:
    """Negation pushed through connectives with comparisons dualized."""
    if isinstance(f, Not):
        return f.arg
    if isinstance(f, Cmp):
        if f.op == "<=":
            return gt(f.left, f.right)
        if f.op == ">":
            return le(f.left, f.right)
        if f.op == ">=":
            return gt(f.right, f.left)
        return not_(f)  # disequality of '==' stays a negation
    if isinstance(f, And):
        return or_(*(_negate_for_match(a) for a in f.args))
    if isinstance(f, Or):
        return and_(*(_negate_for_match(a) for a in f.args))
    if isinstance(f, Implies):
        return and_(f.left, _negate_for_match(f.right))
    if isinstance(f, BoolConst):
        return BoolConst(not f.value)
    return not_(f)


def _linear_in(t: Term, var: str) -> tuple[int, Term] | None:
    """Decompose t as a*var + rest with rest free of var, if possible."""
    if isinstance(t, Sym) and t.name == var:
        return 1, IntConst(0)
    if var not in free_scalars(t):
        return 0, t
    from .exprs import Add, Mul, Sub
    if isinstance(t, Add):
        lin_l = _linear_in(t.left, var)
        lin_r = _linear_in(t.right, var)
        if lin_l is None or lin_r is None:
            return None
        return lin_l[0] + lin_r[0], add(lin_l[1], lin_r[1])
    if isinstance(t, Sub):
        lin_l = _linear_in(t.left, var)
        lin_r = _linear_in(t.right, var)
        if lin_l is None or lin_r is None:
            return None
        return lin_l[0] - lin_r[0], sub(lin_l[1], lin_r[1])
    if isinstance(t, Mul):
        lin = _linear_in(t.term, var)
        if lin is None:
            return None
        return t.scale * lin[0], mul(t.scale, lin[1])
    return None


def _solve_instantiation(pattern: Formula, var: str, target: Formula) -> Term | None:
    """Find t with pattern[t/var] syntactically equal to target."""
    diffs: list[tuple[Node, Node]] = []

    def collect(p: Node, t: Node) -> bool:
        if p == t:
            return True
        same_shape = type(p) is type(t)
        if same_shape and isinstance(p, Cmp):
            same_shape = p.op == t.op  # type: ignore[union-attr]
        from .exprs import Mul
        if same_shape and isinstance(p, Mul):
            same_shape = p.scale == t.scale  # type: ignore[union-attr]
        kids_p, kids_t = children(p), children(t)
        if same_shape and len(kids_p) == len(kids_t) and kids_p:
            return all(collect(a, b) for a, b in zip(kids_p, kids_t))
        if var in free_scalars(p):
            diffs.append((p, t))
            return True
        return False

    if not collect(pattern, target):
        return None
    for p, t in diffs:
        lin = _linear_in(p, var)  # type: ignore[arg-type]
        if lin is None:
            continue
        a, rest = lin
        candidate: Term | None = None
        if a == 1:
            candidate = sub(t, rest)  # type: ignore[arg-type]
        elif a == -1:
            candidate = sub(rest, t)  # type: ignore[arg-type]
        elif a != 0:
            diff = sub(t, rest)  # type: ignore[arg-type]
            if isinstance(diff, IntConst) and diff.value % a == 0:
                candidate = IntConst(diff.value // a)
        if candidate is None:
            continue
        if substitute(pattern, Sym(var), candidate) == target:
            return candidate
    return None


def strip(q: Query) -> Query:
    """Weaken to an implied quantifier-free query.

    Every quantified clause contributes its first instantiation (guarded by
    the range being nonempty) and, for every quantifier-free clause that is
    syntactically a negated instance of its body, a range exclusion for the
    matched instantiation point.
    """
    out: list[Formula] = list(q.qfree())
    for qc in q.quantified():
        out.append(implies(ge(qc.hi, IntConst(1)),
                           substitute(qc.body, qc.var, IntConst(1))))
        negated = _negate_for_match(qc.body)
        for theta in q.qfree():
            t = _solve_instantiation(negated, qc.var.name, theta)
            if t is not None:
                out.append(not_(and_(le(IntConst(1), t), le(t, qc.hi))))
    return Query(tuple(out))


# ---------------------------------------------------------------------------
# Stage 2: assignment duplication
# ---------------------------------------------------------------------------


def _term_order(t: Term) -> str:
    return to_sexpr(t)


def duplicate(q: Query, model: Model,
              conflicts: set[tuple[str, int]] | frozenset[tuple[str, int]] = frozenset()) -> Model:
    """Copy each quantified array's first-instance value across its range.

    The access pair used per array is the minimum under a total term order,
    fixing the pseudo-nondeterministic choice.  Cells listed in ``conflicts``
    are left untouched.
    """
    m = model
    for qc in q.quantified():
        k_val = int(evaluate(m, qc.hi))  # type: ignore[arg-type]
        arrays_here: list[str] = []
        for a, _ in q_reads(qc):
            if a not in arrays_here:
                arrays_here.append(a)
        for a in arrays_here:
            pairs = [(a2, e) for a2, e in q_reads(qc) if a2 == a]
            _, e = min(pairs, key=lambda p: _term_order(p[1]))
            v = int(evaluate(m.bind(qc.var.name, 1), select(ArraySym(a), e)))  # type: ignore[arg-type]
            for n in range(2, k_val + 1):
                off = int(evaluate(m.bind(qc.var.name, n), e))  # type: ignore[arg-type]
                if (a, off) not in conflicts:
                    m = m.update_select(a, off, v)
    return m


# ---------------------------------------------------------------------------
# Stage 3: model repair
# ---------------------------------------------------------------------------


@dataclass
class RepairInfo:
    strengthened: Query | None = None
    conflicts: tuple[tuple[str, int], ...] = ()
    backend_status: str = ""


def repair(q: Query, m_d: Model, backend: "Backend") -> tuple[Model | None, RepairInfo]:
    """Conflict-driven repair of a duplicated model that misses the query."""
    conflicts: list[tuple[str, int]] = []

    def note(pair: tuple[str, int]) -> None:
        if pair not in conflicts:
            conflicts.append(pair)

    # (1) cells read by violated quantified-clause instantiations
    for qc in q.quantified():
        k_val = int(evaluate(m_d, qc.hi))  # type: ignore[arg-type]
        for n in range(1, k_val + 1):
            bound = m_d.bind(qc.var.name, n)
            if evaluate(bound, qc.body) is not True:
                for a, e in q_reads(qc):
                    note((a, int(evaluate(bound, e))))  # type: ignore[arg-type]

    # (2) cells read by violated quantifier-free clauses
    for theta in q.qfree():
        if evaluate(m_d, theta) is not True:
            for a, e in reads(theta):
                note((a, int(evaluate(m_d, e))))  # type: ignore[arg-type]

    # (3) instantiations that constrain a conflicting cell
    mapping: dict[tuple[str, int], list[Formula]] = {}
    for qc in q.quantified():
        k_val = int(evaluate(m_d, qc.hi))  # type: ignore[arg-type]
        for n in range(1, k_val + 1):
            bound = m_d.bind(qc.var.name, n)
            for a, e in q_reads(qc):
                pair = (a, int(evaluate(bound, e)))  # type: ignore[arg-type]
                if pair in conflicts:
                    inst = substitute(qc.body, qc.var, IntConst(n))
                    bucket = mapping.setdefault(pair, [])
                    if inst not in bucket:
                        bucket.append(inst)

    # (4) strengthen the stripped query and pin everything else to m_d
    clauses = list(strip(q).clauses)
    for pair in conflicts:
        for inst in mapping.get(pair, []):
            if inst not in clauses:
                clauses.append(inst)
    quantified_arrays = set(q_arrays(q))
    for name in q.scalars_in_order():
        clauses.append(eq(Sym(name), IntConst(m_d.scalar(name))))
    pinned_selects: list[Select] = []
    for c in q.clauses:
        for s in selects_in(c):
            if s.array.name not in quantified_arrays and s not in pinned_selects:
                pinned_selects.append(s)
    for s in pinned_selects:
        clauses.append(eq(s, IntConst(int(evaluate(m_d, s)))))  # type: ignore[arg-type]

    strengthened = Query(tuple(clauses))
    info = RepairInfo(strengthened, tuple(conflicts))
    status, m2 = backend.solve(strengthened)
    info.backend_status = status
    if status != "sat" or m2 is None:
        return None, info

    # (5) duplicate again, skipping the explicitly repaired cells
    m2 = totalize(m2, q)
    return duplicate(q, m2, frozenset(conflicts)), info


# ---------------------------------------------------------------------------
# compute-model pipeline
# ---------------------------------------------------------------------------


class Stage(Enum):
    STRIP = "S"
    DUPLICATE = "S + D"
    REPAIR = "S + D + R"
    FALLBACK = "Fallback"


@dataclass
class SolveResult:
    outcome: str  # 'sat' | 'unsat' | 'unknown'
    model: Model | None
    stage: Stage | None
    stripped: Query | None = None
    repair_info: RepairInfo | None = None


@dataclass
class SolveStats:
    total: int = 0
    quantified_total: int = 0
    sat: int = 0
    unsat: int = 0
    unknown: int = 0
    stages: dict[str, int] = field(default_factory=dict)

    def record(self, result: SolveResult, quantified: bool) -> None:
        self.total += 1
        if quantified:
            self.quantified_total += 1
            if result.stage is not None:
                key = result.stage.value
                self.stages[key] = self.stages.get(key, 0) + 1
        setattr(self, result.outcome, getattr(self, result.outcome) + 1)

    def to_json(self) -> dict:
        solved = sum(v for k, v in self.stages.items() if k != Stage.FALLBACK.value)
        percent = (100.0 * solved / self.quantified_total) if self.quantified_total else 0.0
        return {
            "Total": self.quantified_total,
            "Solved (%)": round(percent, 2),
            "S": self.stages.get(Stage.STRIP.value, 0),
            "S + D": self.stages.get(Stage.DUPLICATE.value, 0),
            "S + D + R": self.stages.get(Stage.REPAIR.value, 0),
            "Fallback": self.stages.get(Stage.FALLBACK.value, 0),
            "queries": self.total,
            "sat": self.sat,
            "unsat": self.unsat,
            "unknown": self.unknown,
        }


def compute_model(q: Query, backend: "Backend", *, use_procedure: bool = True,
                  stats: SolveStats | None = None) -> SolveResult:
    """Four-stage solving; SAT results are verified against the original query."""
    quantified = bool(q.quantified())
    result = _compute_model(q, backend, use_procedure)
    if stats is not None:
        stats.record(result, quantified)
    return result


def _compute_model(q: Query, backend: "Backend", use_procedure: bool) -> SolveResult:
    if not use_procedure:
        return _fallback(q, backend, None, None)

    stripped = strip(q)
    status, m = backend.solve(stripped)
    if status == "unsat":
        # The stripped query is implied by the original, so this is sound.
        return SolveResult("unsat", None, Stage.STRIP, stripped)
    if status == "sat" and m is not None:
        m = totalize(m, q)
        if evaluate_query(m, q):
            return SolveResult("sat", m, Stage.STRIP, stripped)
        m_d = duplicate(q, m, frozenset())
        if evaluate_query(m_d, q):
            return SolveResult("sat", m_d, Stage.DUPLICATE, stripped)
        m_r, info = repair(q, m_d, backend)
        if m_r is not None and evaluate_query(m_r, q):
            return SolveResult("sat", m_r, Stage.REPAIR, stripped, info)
        return _fallback(q, backend, stripped, info)
    return _fallback(q, backend, stripped, None)


def _fallback(q: Query, backend: "Backend", stripped: Query | None,
              info: RepairInfo | None) -> SolveResult:
    status, m = backend.solve(q)
    if status == "sat" and m is not None:
        m = totalize(m, q)
        if evaluate_query(m, q):
            return SolveResult("sat", m, Stage.FALLBACK, stripped, info)
        return SolveResult("unknown", None, Stage.FALLBACK, stripped, info)
    if status == "unsat":
        return SolveResult("unsat", None, Stage.FALLBACK, stripped, info)
    return SolveResult("unknown", None, Stage.FALLBACK, stripped, info)


# ---------------------------------------------------------------------------
# Bounded brute-force model search (default backend and test oracle)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrayDomain:
    length: int
    values: tuple[int, ...]


@dataclass(frozen=True)
class DomainSpec:
    scalars: dict[str, tuple[int, ...]]
    arrays: dict[str, ArrayDomain]

    def size(self) -> int:
        n = 1
        for vals in self.scalars.values():
            n *= max(1, len(vals))
        for dom in self.arrays.values():
            n *= max(1, len(dom.values)) ** dom.length
        return n

    @staticmethod
    def infer(clauses: list[Formula], array_lengths: dict[str, int] | None = None,
              max_array_length: int = 16) -> "DomainSpec":
        consts = {0}
        for c in clauses:
            for node in walk(c):
                if isinstance(node, IntConst):
                    consts.add(node.value)
        values = sorted(consts | {v - 1 for v in consts} | {v + 1 for v in consts})
        scalar_names: set[str] = set()
        bound_names: set[str] = set()
        for c in clauses:
            scalar_names |= free_scalars(c)
            for node in walk(c):
                if isinstance(node, ForallRange):
                    bound_names.add(node.var.name)
        arrays: dict[str, ArrayDomain] = {}
        for c in clauses:
            for name in array_symbols(c):
                if name not in arrays:
                    if array_lengths and name in array_lengths:
                        length = array_lengths[name]
                    else:
                        length = min(max(v for v in values) + 1, max_array_length)
                        length = max(length, 1)
                    arrays[name] = ArrayDomain(length, tuple(values))
        return DomainSpec(
            {n: tuple(values) for n in sorted(scalar_names - bound_names)},
            arrays,
        )


def _partial_eval(x: Node, scalars: dict[str, int], cells: dict[str, list[int | None]],
                  env: dict[str, int]):
    """Three-valued evaluation: int/bool when determined, None when open."""
    if isinstance(x, IntConst):
        return x.value
    if isinstance(x, BoolConst):
        return x.value
    if isinstance(x, Sym):
        if x.name in env:
            return env[x.name]
        return scalars.get(x.name)
    if isinstance(x, Select):
        idx = _partial_eval(x.index, scalars, cells, env)
        if idx is None:
            return None
        arr = cells.get(x.array.name)
        if arr is None:
            return 0
        if 0 <= idx < len(arr):
            return arr[idx]
        return 0  # cells outside the enumerated window hold the default
    kids = children(x)
    if isinstance(x, (And, Or)):
        vals = [_partial_eval(a, scalars, cells, env) for a in kids]
        if isinstance(x, And):
            if any(v is False for v in vals):
                return False
            if any(v is None for v in vals):
                return None
            return True
        if any(v is True for v in vals):
            return True
        if any(v is None for v in vals):
            return None
        return False
    if isinstance(x, Not):
        v = _partial_eval(x.arg, scalars, cells, env)
        return None if v is None else not v
    if isinstance(x, Implies):
        lv = _partial_eval(x.left, scalars, cells, env)
        if lv is False:
            return True
        rv = _partial_eval(x.right, scalars, cells, env)
        if lv is True:
            return rv
        return True if rv is True else None
    if isinstance(x, Cmp):
        a = _partial_eval(x.left, scalars, cells, env)
        b = _partial_eval(x.right, scalars, cells, env)
        if a is None or b is None:
            return None
        return {"==": a == b, "<=": a <= b, ">=": a >= b, ">": a > b}[x.op]
    if isinstance(x, ForallRange):
        lo = _partial_eval(x.lo, scalars, cells, env)
        hi = _partial_eval(x.hi, scalars, cells, env)
        if lo is None or hi is None:
            return None
        result: bool | None = True
        for v in range(lo, hi + 1):
            inner = dict(env)
            inner[x.var.name] = v
            r = _partial_eval(x.body, scalars, cells, inner)
            if r is False:
                return False
            if r is None:
                result = None
        return result
    # arithmetic
    vals = [_partial_eval(k, scalars, cells, env) for k in kids]
    if any(v is None for v in vals):
        return None
    from .exprs import Add, IteTerm, Mul, Sub
    if isinstance(x, Add):
        return vals[0] + vals[1]
    if isinstance(x, Sub):
        return vals[0] - vals[1]
    if isinstance(x, Mul):
        return x.scale * vals[0]
    if isinstance(x, IteTerm):
        return vals[1] if vals[0] else vals[2]
    raise EvalError(f"cannot evaluate {x!r}")


def brute_force_model(clauses: list[Formula], domain: DomainSpec,
                      limit: int = 10_000_000) -> Model | None:
    """First model in lexicographic slot order, or None within the domain.

    Slots are scalars sorted by name, then array cells sorted by
    (array, offset); each ranges over the domain's sorted value list.
    Partial evaluation prunes assignments that already falsify a clause.
    """
    if domain.size() > limit:
        raise DomainTooLarge(f"domain has {domain.size()} points (limit {limit})")
    scalar_slots = [(name, tuple(sorted(vals))) for name, vals in sorted(domain.scalars.items())]
    cell_slots = [(name, off, tuple(sorted(dom.values)))
                  for name, dom in sorted(domain.arrays.items())
                  for off in range(dom.length)]
    scalars: dict[str, int] = {}
    cells: dict[str, list[int | None]] = {
        name: [None] * dom.length for name, dom in domain.arrays.items()
    }

    def consistent() -> bool:
        return all(_partial_eval(c, scalars, cells, {}) is not False for c in clauses)

    def rec(idx: int) -> bool:
        if idx == len(scalar_slots) + len(cell_slots):
            return all(_partial_eval(c, scalars, cells, {}) is True for c in clauses)
        if idx < len(scalar_slots):
            name, vals = scalar_slots[idx]
            for v in vals:
                scalars[name] = v
                if consistent() and rec(idx + 1):
                    return True
            del scalars[name]
            return False
        name, off, vals = cell_slots[idx - len(scalar_slots)]
        for v in vals:
            cells[name][off] = v
            if consistent() and rec(idx + 1):
                return True
        cells[name][off] = None
        return False

    if not rec(0):
        return None
    return Model.of(
        dict(scalars),
        {name: ArrayModelValue.from_list([v if v is not None else 0 for v in col])
         for name, col in cells.items()},
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Backend:
    """Answers (status, model) for a query; status in {'sat','unsat','unknown'}."""

    def solve(self, q: Query) -> tuple[str, Model | None]:
        raise NotImplementedError


class OracleBackend(Backend):
    """Bounded enumeration; complete only within the inferred finite domain."""

    def __init__(self, array_lengths: dict[str, int] | None = None,
                 domain: DomainSpec | None = None, limit: int = 10_000_000):
        self.array_lengths = array_lengths or {}
        self.domain = domain
        self.limit = limit

    def solve(self, q: Query) -> tuple[str, Model | None]:
        domain = self.domain or DomainSpec.infer(list(q.clauses), self.array_lengths)
        try:
            m = brute_force_model(list(q.clauses), domain, self.limit)
        except DomainTooLarge:
            return "unknown", None
        if m is None:
            return "unsat", None
        return "sat", m


class ScriptedBackend(Backend):
    """Replays canned responses and records queries (used by tests)."""

    def __init__(self, responses: list[tuple[str, Model | None]]):
        self.responses = list(responses)
        self.queries: list[Query] = []

    def solve(self, q: Query) -> tuple[str, Model | None]:
        self.queries.append(q)
        if not self.responses:
            return "unknown", None
        return self.responses.pop(0)


class SmtLibProcessBackend(Backend):
    """SMT-LIB v2 subprocess client (e.g. ``z3 -in`` or the bundled minisolver).

    Writes declarations and asserts, reads the check-sat answer, then fetches
    scalar values and the array cells at every offset mentioned by the query
    (expanding quantified index terms up to the model's bound).
    """

    def __init__(self, command: str | list[str], timeout: float = 10.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.last_error: str | None = None

    def solve(self, q: Query) -> tuple[str, Model | None]:
        try:
            return self._solve(q)
        except Exception as exc:  # protocol or process failure
            self.last_error = f"{type(exc).__name__}: {exc}"
            return "unknown", None

    def _solve(self, q: Query) -> tuple[str, Model | None]:
        proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )
        timer = threading.Timer(self.timeout, proc.kill)
        timer.start()
        try:
            scalars = q.scalars_in_order()
            arrays = q.array_names()
            send = proc.stdin
            assert send is not None and proc.stdout is not None
            send.write("(set-logic AUFLIA)\n")
            for n in scalars:
                send.write(f"(declare-const {n} Int)\n")
            for n in arrays:
                send.write(f"(declare-const {n} (Array Int Int))\n")
            for c in q.clauses:
                send.write(f"(assert {to_sexpr(c)})\n")
            send.write("(check-sat)\n")
            send.flush()
            status = proc.stdout.readline().strip()
            while status == "":
                if proc.poll() is not None:
                    return "unknown", None
                status = proc.stdout.readline().strip()
            if status == "unsat":
                return "unsat", None
            if status != "sat":
                self.last_error = f"solver answered {status!r}"
                return "unknown", None

            scalar_map: dict[str, int] = {}
            if scalars:
                send.write(f"(get-value ({' '.join(scalars)}))\n")
                send.flush()
                for name, value in self._read_values(proc.stdout):
                    scalar_map[name] = value
            model = Model.of(scalar_map, {})

            offsets: dict[str, set[int]] = {a: set() for a in arrays}
            for c in q.clauses:
                if isinstance(c, ForallRange):
                    hi = int(evaluate(totalize(model, q), c.hi))  # type: ignore[arg-type]
                    for a, e in reads(c.body):
                        if c.var.name in free_scalars(e):
                            for n in range(1, hi + 1):
                                offsets[a].add(int(evaluate(totalize(model, q).bind(c.var.name, n), e)))  # type: ignore[arg-type]
                        else:
                            offsets[a].add(int(evaluate(totalize(model, q), e)))  # type: ignore[arg-type]
                else:
                    for a, e in reads(c):
                        offsets[a].add(int(evaluate(totalize(model, q), e)))  # type: ignore[arg-type]
            array_map: dict[str, ArrayModelValue] = {}
            for a in arrays:
                offs = sorted(offsets[a])
                cells: dict[int, int] = {}
                if offs:
                    terms = " ".join(f"(select {a} {_int_sexpr(o)})" for o in offs)
                    send.write(f"(get-value ({terms}))\n")
                    send.flush()
                    values = self._read_values(proc.stdout)
                    for off, (_, value) in zip(offs, values):
                        cells[off] = value
                array_map[a] = ArrayModelValue.from_dict(cells)
            send.write("(exit)\n")
            send.flush()
            return "sat", Model.of(scalar_map, array_map)
        finally:
            timer.cancel()
            proc.kill()
            proc.wait()

    def _read_values(self, out) -> list[tuple[str, int]]:
        text = ""
        while True:
            line = out.readline()
            if not line:
                raise RuntimeError("solver closed the stream mid-answer")
            text += line
            if text.count("(") > 0 and text.count("(") == text.count(")"):
                break
        parsed = parse_sexprs(text)
        if not parsed:
            raise RuntimeError(f"unparseable get-value answer: {text!r}")
        pairs = parsed[0]
        out_pairs: list[tuple[str, int]] = []
        for entry in pairs:
            expr, value = entry[0], entry[1]
            name = expr if isinstance(expr, str) else str(expr)
            out_pairs.append((name, _sexpr_int(value)))
        return out_pairs


def _int_sexpr(v: int) -> str:
    return str(v) if v >= 0 else f"(- {-v})"


def _sexpr_int(x) -> int:
    if isinstance(x, str):
        return int(x)
    if isinstance(x, list) and len(x) == 2 and x[0] == "-":
        return -_sexpr_int(x[1])
    raise ValueError(f"expected integer value, got {x!r}")


# ---------------------------------------------------------------------------
# SMT-LIB v2 reading (query corpus)
# ---------------------------------------------------------------------------


def parse_sexprs(text: str) -> list:
    """Parse a sequence of s-expressions into nested lists of atom strings."""
    toks: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in "()":
            toks.append(ch)
            i += 1
        elif ch == ";":
            while i < len(text) and text[i] != "\n":
                i += 1
        elif ch == '"':
            j = i + 1
            while j < len(text) and text[j] != '"':
                j += 1
            toks.append(text[i:j + 1])
            i = j + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "();":
                j += 1
            toks.append(text[i:j])
            i = j
    out: list = []
    stack: list[list] = []
    for tok in toks:
        if tok == "(":
            stack.append([])
        elif tok == ")":
            done = stack.pop()
            (stack[-1] if stack else out).append(done)
        else:
            (stack[-1] if stack else out).append(tok)
    if stack:
        raise ValueError("unbalanced parentheses in SMT-LIB input")
    return out


def parse_smtlib_query(text: str) -> tuple[Query, dict[str, str]]:
    """Read one SMT-LIB script (declare-const/assert/check-sat) as a Query."""
    scalars: set[str] = set()
    arrays: set[str] = set()
    clauses: list[Formula] = []
    info: dict[str, str] = {}

    def build(e, bound: dict[str, Sym]) -> Node:
        if isinstance(e, str):
            if e.lstrip("-").isdigit():
                return IntConst(int(e))
            if e in bound:
                return bound[e]
            if e in arrays:
                return ArraySym(e)
            if e in scalars:
                return Sym(e)
            if e == "true":
                return TRUE
            if e == "false":
                return FALSE
            raise QueryShapeError(f"undeclared symbol {e!r}")
        head = e[0]
        if head == "forall":
            (var_name, sort), = [tuple(b) for b in e[1]]
            if sort != "Int":
                raise QueryShapeError("quantified variables must be Int")
            var = Sym(var_name)
            inner_bound = dict(bound)
            inner_bound[var_name] = var
            body = e[2]
            if not (isinstance(body, list) and body[0] == "=>"):
                raise QueryShapeError("quantified clause must be an implication")
            rng, inner = body[1], body[2]
            ok = (isinstance(rng, list) and rng[0] == "and" and len(rng) == 3
                  and rng[1][0] == "<=" and rng[2][0] == "<="
                  and rng[1][2] == var_name and rng[2][1] == var_name)
            if not ok:
                raise QueryShapeError("quantифier range must be 'lo <= v and v <= hi'")
            lo = build(rng[1][1], bound)
            hi = build(rng[2][2], bound)
            return ForallRange(var, lo, hi, build(inner, inner_bound))  # type: ignore[arg-type]
        args = [build(a, bound) for a in e[1:]]
        if head == "and":
            return and_(*args)  # type: ignore[arg-type]
        if head == "or":
            return or_(*args)  # type: ignore[arg-type]
        if head == "not":
            return not_(args[0])  # type: ignore[arg-type]
        if head == "=>":
            return implies(args[0], args[1])  # type: ignore[arg-type]
        if head == "=":
            return eq(args[0], args[1])  # type: ignore[arg-type]
        if head == "distinct":
            return not_(eq(args[0], args[1]))  # type: ignore[arg-type]
        if head == "<=":
            return le(args[0], args[1])  # type: ignore[arg-type]
        if head == "<":
            return gt(args[1], args[0])  # type: ignore[arg-type]
        if head == ">=":
            return ge(args[0], args[1])  # type: ignore[arg-type]
        if head == ">":
            return gt(args[0], args[1])  # type: ignore[arg-type]
        if head == "+":
            out = args[0]
            for a in args[1:]:
                out = add(out, a)  # type: ignore[arg-type]
            return out
        if head == "-":
            if len(args) == 1:
                return sub(IntConst(0), args[0])  # type: ignore[arg-type]
            return sub(args[0], args[1])  # type: ignore[arg-type]
        if head == "*":
            a, b = args
            if isinstance(a, IntConst):
                return mul(a.value, b)  # type: ignore[arg-type]
            if isinstance(b, IntConst):
                return mul(b.value, a)  # type: ignore[arg-type]
            raise QueryShapeError("nonlinear multiplication")
        if head == "select":
            return select(args[0], args[1])  # type: ignore[arg-type]
        if head == "ite":
            return ite_term(args[0], args[1], args[2])  # type: ignore[arg-type]
        raise QueryShapeError(f"unsupported operator {head!r}")

    for form in parse_sexprs(text):
        if not isinstance(form, list) or not form:
            continue
        head = form[0]
        if head == "set-info" and len(form) == 3:
            info[str(form[1]).lstrip(":")] = str(form[2]).strip("|\"")
        elif head in ("declare-const", "declare-fun"):
            name = form[1]
            sort = form[-1]
            if sort == "Int":
                scalars.add(name)
            elif isinstance(sort, list) and sort[:1] == ["Array"]:
                arrays.add(name)
            else:
                raise QueryShapeError(f"unsupported sort {sort!r}")
        elif head == "assert":
            f = build(form[1], {})
            if not is_formula(f):
                raise QueryShapeError("assert of a non-boolean expression")
            clauses.append(f)  # type: ignore[arg-type]
    q = Query(tuple(clauses))
    check_canonical(q)
    return q, info


def query_to_smtlib(q: Query, info: dict[str, str] | None = None) -> str:
    lines = ["(set-logic AUFLIA)"]
    for key, value in (info or {}).items():
        lines.append(f"(set-info :{key} {value})")
    for n in q.scalars_in_order():
        lines.append(f"(declare-const {n} Int)")
    for n in q.array_names():
        lines.append(f"(declare-const {n} (Array Int Int))")
    for c in q.clauses:
        lines.append(f"(assert {to_sexpr(c)})")
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Engine-facing facade
# ---------------------------------------------------------------------------


class EngineSolver:
    """Feasibility/model interface the executor drives during exploration."""

    def __init__(self, backend: Backend, *, use_procedure: bool = True,
                 stats: SolveStats | None = None,
                 query_log: list[str] | None = None):
        self.backend = backend
        self.use_procedure = use_procedure
        self.stats = stats if stats is not None else SolveStats()
        self.query_log = query_log
        self._cache: dict[Formula, tuple[str, Model | None]] = {}

    def check(self, f: Formula) -> tuple[str, Model | None]:
        if f in self._cache:
            return self._cache[f]
        q = Query.from_formula(f)
        if self.query_log is not None:
            self.query_log.append(query_to_smtlib(q))
        res = compute_model(q, self.backend, use_procedure=self.use_procedure,
                            stats=self.stats)
        out = (res.outcome, res.model)
        self._cache[f] = out
        return out
