"""Symbolic executor: states, execution trees, region exploration.

A state runs in "big steps" from decision point to decision point: concrete
control flow is folded away, and the state parks whenever the next move
depends on a symbolic branch condition.  Every park/exit produces a node in
an execution tree whose per-node conditions multiply out the path
constraint: for every node, ``node.state.pc`` is equivalent to
``root.state.pc && tpc(root, node)``.

Array writes never build store terms: a write appends an (index, value)
pair to the variable's array value, and reads materialize the pending
writes as nested if-then-else selections.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

from . import lang
from .exprs import (
    ArraySym,
    BoolConst,
    Formula,
    IntConst,
    Model,
    Node,
    Select,
    Sym,
    Term,
    TRUE,
    and_,
    eq,
    evaluate,
    EvalError,
    ge,
    gt,
    is_term,
    ite_term,
    not_,
    or_,
    select,
    structural_hash,
    substitute,
    to_sexpr,
)

RET_SLOT = "$ret"


class BudgetExceeded(RuntimeError):
    """Step budget ran out; carries whatever tree was built so far."""

    def __init__(self, tree: "ExecTree | None" = None):
        super().__init__("step budget exceeded")
        self.tree = tree


@dataclass
class Budget:
    limit: int
    used: int = 0

    def consume(self, n: int = 1) -> None:
        self.used += n
        if self.used > self.limit:
            raise BudgetExceeded()


@dataclass(frozen=True)
class Finding:
    kind: str  # 'assert' | 'oob'
    ic: int
    line: int
    detail: str

    def key(self) -> tuple:
        return (self.kind, self.ic, self.line, self.detail)


class FindingLog:
    def __init__(self) -> None:
        self._seen: set[tuple] = set()
        self.findings: list[Finding] = []
        self.warnings: list[str] = []

    def add(self, f: Finding) -> None:
        if f.key() not in self._seen:
            self._seen.add(f.key())
            self.findings.append(f)

    def warn(self, message: str) -> None:
        self.warnings.append(message)


# ---------------------------------------------------------------------------
# Array values in the store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstArray:
    """Array with concrete contents, plus any pending symbolic writes."""

    cells: tuple[int, ...]
    writes: tuple[tuple[Term, Term], ...] = ()

    def read(self, index: Term) -> Term:
        if isinstance(index, IntConst) and not self.writes:
            return IntConst(self.cells[index.value])
        base: Term
        if isinstance(index, IntConst):
            base = IntConst(self.cells[index.value])
        else:
            base = IntConst(self.cells[-1])
            for off in range(len(self.cells) - 2, -1, -1):
                base = ite_term(eq(index, IntConst(off)), IntConst(self.cells[off]), base)
        return _apply_writes(base, self.writes, index)

    def write(self, index: Term, value: Term) -> "ConstArray":
        if isinstance(index, IntConst) and isinstance(value, IntConst) and not self.writes:
            cells = list(self.cells)
            cells[index.value] = value.value
            return ConstArray(tuple(cells))
        return ConstArray(self.cells, self.writes + ((index, value),))


@dataclass(frozen=True)
class SymArray:
    """Array with symbolic base contents, plus any pending writes."""

    sym: ArraySym
    writes: tuple[tuple[Term, Term], ...] = ()

    def read(self, index: Term) -> Term:
        return _apply_writes(select(self.sym, index), self.writes, index)

    def write(self, index: Term, value: Term) -> "SymArray":
        return SymArray(self.sym, self.writes + ((index, value),))


@dataclass(frozen=True)
class MergedArray:
    """Guarded choice between array values, from state merging."""

    guards: tuple[Formula, ...]  # one per branch except the last
    branches: tuple["ArrayValue", ...]

    def read(self, index: Term) -> Term:
        out = self.branches[-1].read(index)
        for g, b in zip(reversed(self.guards), reversed(self.branches[:-1])):
            out = ite_term(g, b.read(index), out)
        return out

    def write(self, index: Term, value: Term) -> "MergedArray":
        return MergedArray(self.guards, tuple(b.write(index, value) for b in self.branches))


ArrayValue = ConstArray | SymArray | MergedArray


def _apply_writes(base: Term, writes: tuple[tuple[Term, Term], ...], index: Term) -> Term:
    out = base
    for w_idx, w_val in writes:  # later writes end up outermost
        out = ite_term(eq(index, w_idx), w_val, out)
    return out


StoreValue = Term | ArrayValue


# ---------------------------------------------------------------------------
# Symbolic state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymbolicState:
    pc: Formula
    mem: tuple[tuple[str, StoreValue], ...]
    ic: int

    @staticmethod
    def make(pc: Formula, mem: dict[str, StoreValue], ic: int) -> "SymbolicState":
        return SymbolicState(pc, tuple(sorted(mem.items())), ic)

    def store(self) -> dict[str, StoreValue]:
        return dict(self.mem)

    def get(self, name: str) -> StoreValue:
        for n, v in self.mem:
            if n == name:
                return v
        raise KeyError(name)

    def set(self, name: str, value: StoreValue) -> "SymbolicState":
        mem = self.store()
        mem[name] = value
        return SymbolicState.make(self.pc, mem, self.ic)

    def with_pc(self, pc: Formula) -> "SymbolicState":
        return SymbolicState(pc, self.mem, self.ic)

    def at(self, ic: int) -> "SymbolicState":
        return SymbolicState(self.pc, self.mem, ic)

    def var_names(self) -> frozenset[str]:
        return frozenset(n for n, _ in self.mem)


def initial_state(program: lang.Program, entry_ic: int) -> SymbolicState:
    mem: dict[str, StoreValue] = {}
    for d in program.scalars.values():
        mem[d.name] = Sym(d.name) if d.symbolic else IntConst(0)
    for d in program.arrays.values():
        if d.symbolic:
            mem[d.name] = SymArray(ArraySym(d.name))
        else:
            assert d.contents is not None
            mem[d.name] = ConstArray(d.contents)
    return SymbolicState.make(TRUE, mem, entry_ic)


# ---------------------------------------------------------------------------
# Program expression evaluation against a store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundsCheck:
    array: str
    index: Term
    length: int

    def oob(self) -> Formula:
        return or_(gt(IntConst(0), self.index), ge(self.index, IntConst(self.length)))

    def in_bounds(self) -> Formula:
        return not_(self.oob())


def eval_in_store(state: SymbolicState, expr: Node,
                  lengths: dict[str, int]) -> tuple[Node, list[BoundsCheck]]:
    """Resolve program variables through the store; collect bounds checks."""
    from . import exprs

    checks: list[BoundsCheck] = []

    def go(x: Node) -> Node:
        if isinstance(x, Sym):
            return state.get(x.name)
        if isinstance(x, Select):
            idx = go(x.index)
            assert is_term(idx)
            checks.append(BoundsCheck(x.array.name, idx, lengths[x.array.name]))
            arr = state.get(x.array.name)
            assert isinstance(arr, (ConstArray, SymArray, MergedArray))
            return arr.read(idx)
        if isinstance(x, (IntConst, BoolConst, ArraySym)):
            return x
        rebuilt = [go(c) for c in exprs.children(x)]
        if isinstance(x, exprs.Add):
            return exprs.add(*rebuilt)
        if isinstance(x, exprs.Sub):
            return exprs.sub(*rebuilt)
        if isinstance(x, exprs.Mul):
            return exprs.mul(x.scale, rebuilt[0])
        if isinstance(x, exprs.IteTerm):
            return exprs.ite_term(*rebuilt)
        if isinstance(x, exprs.Cmp):
            return exprs.cmp_op(x.op, *rebuilt)
        if isinstance(x, exprs.Not):
            return exprs.not_(rebuilt[0])
        if isinstance(x, exprs.And):
            return exprs.and_(*rebuilt)
        if isinstance(x, exprs.Or):
            return exprs.or_(*rebuilt)
        if isinstance(x, exprs.Implies):
            return exprs.implies(*rebuilt)
        raise TypeError(f"unexpected program expression {x!r}")

    return go(expr), checks


# ---------------------------------------------------------------------------
# Execution trees
# ---------------------------------------------------------------------------


class NodeStatus(Enum):
    ACTIVE = "active"      # parked at a symbolic branch, awaiting expansion
    INTERNAL = "internal"  # expanded; children carry the sides
    EXITED = "exited"      # left the explored fragment (or finished the program)
    DEAD = "dead"          # path became infeasible or was terminated


@dataclass
class ExitInfo:
    ic: int
    completed: bool          # True: program finished; False: parked at frontier
    region_entry: bool = False  # stopped right before entering a merge region


class ExecNode:
    def __init__(self, node_id: int, cond: Formula, parent: "ExecNode | None"):
        self.id = node_id
        self.cond = cond
        self.parent = parent
        self.children: list[ExecNode] = []
        self.state: SymbolicState | None = None
        self.status = NodeStatus.ACTIVE
        self.pending: Formula | None = None  # residual branch condition when ACTIVE
        self.witness: Model | None = None
        self.exit: ExitInfo | None = None
        self.detached = False

    def depth(self) -> int:
        d = 0
        n = self
        while n.parent is not None:
            n = n.parent
            d += 1
        return d

    def alive_children(self) -> list["ExecNode"]:
        return [c for c in self.children if not c.detached]

    def ancestors(self) -> list["ExecNode"]:
        out = []
        n = self.parent
        while n is not None:
            out.append(n)
            n = n.parent
        return out

    def __repr__(self) -> str:
        return f"<node {self.id} {self.status.value} cond={self.cond}>"


class ExecTree:
    def __init__(self, root_state: SymbolicState):
        self._next_id = 0
        self.root = self.new_node(TRUE, None)
        self.root.state = root_state
        self.reactivated: list[ExecNode] = []

    def new_node(self, cond: Formula, parent: ExecNode | None) -> ExecNode:
        node = ExecNode(self._next_id, cond, parent)
        self._next_id += 1
        if parent is not None:
            parent.children.append(node)
        return node

    def nodes(self) -> list[ExecNode]:
        out: list[ExecNode] = []

        def visit(n: ExecNode) -> None:
            if n.detached:
                return
            out.append(n)
            for c in n.children:
                visit(c)

        visit(self.root)
        return sorted(out, key=lambda n: n.id)

    def leaves(self) -> list[ExecNode]:
        return [n for n in self.nodes() if not n.alive_children()]

    def exited_leaves(self) -> list[ExecNode]:
        return [n for n in self.nodes() if n.status is NodeStatus.EXITED]

    def detach(self, node: ExecNode) -> None:
        node.detached = True
        for c in node.children:
            self.detach(c)

    def path(self, frm: ExecNode, to: ExecNode) -> list[ExecNode]:
        """Nodes from ``frm`` down to ``to`` (inclusive); error if unrelated."""
        chain = [to]
        n = to
        while n is not frm:
            if n.parent is None:
                raise ValueError(f"node {to.id} is not a descendant of node {frm.id}")
            n = n.parent
            chain.append(n)
        chain.reverse()
        return chain

    def to_json(self) -> dict:
        nodes = []
        for n in self.nodes():
            entry: dict = {
                "id": n.id,
                "parent": n.parent.id if n.parent else None,
                "cond": str(n.cond),
                "cond_hash": f"{structural_hash(n.cond):016x}",
                "status": n.status.value,
                "ic": n.state.ic if n.state else None,
            }
            if n.exit is not None:
                entry["exit"] = {"ic": n.exit.ic, "completed": n.exit.completed}
            nodes.append(entry)
        return {"root": self.root.id, "nodes": nodes}


def tpc(tree: ExecTree, frm: ExecNode, to: ExecNode) -> Formula:
    """Tree path condition: conjunction of conditions from ``frm`` to ``to``."""
    return and_(*(n.cond for n in tree.path(frm, to)))


def tpc_tail(tree: ExecTree, frm: ExecNode, to: ExecNode) -> Formula:
    """Like :func:`tpc` but excluding the first node's own condition."""
    return and_(*(n.cond for n in tree.path(frm, to)[1:]))


# ---------------------------------------------------------------------------
# Exploration
# ---------------------------------------------------------------------------


@dataclass
class ExploreOptions:
    incremental: bool = False
    liveness: lang.LivenessResult | None = None
    budget: Budget | None = None
    stop_at_regions: bool = False
    findings: FindingLog | None = None


class _BigStepOutcome:
    pass


@dataclass
class _ParkedBranch(_BigStepOutcome):
    state: SymbolicState
    cond: Formula


@dataclass
class _ParkedConstraint(_BigStepOutcome):
    state: SymbolicState  # still at the constraint statement
    cond: Formula
    next_ic: int
    is_assert: bool
    line: int


@dataclass
class _Exited(_BigStepOutcome):
    state: SymbolicState
    info: ExitInfo


@dataclass
class _Dead(_BigStepOutcome):
    reason: str


def fork(state: SymbolicState, cond: Formula, solver) -> tuple[SymbolicState | None, SymbolicState | None]:
    """Split on ``cond``; each feasible side keeps its strengthened pc."""
    if isinstance(cond, BoolConst):
        if cond.value:
            return state, None
        return None, state
    sides = []
    for c in (cond, not_(cond)):
        pc = and_(state.pc, c)
        status, _ = solver.check(pc)
        sides.append(state.with_pc(pc) if status != "unsat" else None)
    return sides[0], sides[1]


class Explorer:
    """Drives depth-first exploration of a program or of a single region."""

    def __init__(self, cfg: lang.Cfg, solver, opts: ExploreOptions | None = None):
        self.cfg = cfg
        self.solver = solver
        self.opts = opts or ExploreOptions()
        self.findings = self.opts.findings if self.opts.findings is not None else FindingLog()
        self.lengths = cfg.program.array_lengths()

    # feasibility helpers -------------------------------------------------

    def _check(self, pc: Formula, witness: Model | None) -> tuple[bool, Model | None]:
        """(feasible?, witness).  Unknown counts as feasible, with a warning."""
        if witness is not None:
            try:
                if evaluate(witness, pc) is True:
                    return True, witness
            except EvalError:
                pass
        status, model = self.solver.check(pc)
        if status == "sat":
            return True, model
        if status == "unsat":
            return False, None
        self.findings.warn(f"solver returned unknown for: {pc}")
        return True, None

    # big-step interpreter -------------------------------------------------

    def _big_step(self, state: SymbolicState, region: lang.Region | None) -> _BigStepOutcome:
        cfg = self.cfg
        while True:
            ic = state.ic
            if region is not None and not region.contains(ic):
                return _Exited(state, ExitInfo(ic, completed=False))
            if self.opts.stop_at_regions and cfg.region_at(ic) is not None and region is None:
                return _Exited(state, ExitInfo(ic, completed=False, region_entry=True))
            if ic == cfg.exit_ic:
                state = state.set(RET_SLOT, IntConst(0)) if RET_SLOT not in state.var_names() else state
                return _Exited(state, ExitInfo(ic, completed=True))
            if self.opts.budget is not None:
                self.opts.budget.consume()
            node = cfg.node(ic)
            stmt = node.stmt
            assert stmt is not None

            if isinstance(stmt, lang.Assign):
                value, checks = eval_in_store(state, stmt.value, self.lengths)
                handled = self._bounds(state, checks, stmt)
                if not isinstance(handled, SymbolicState):
                    return handled
                state = handled.set(stmt.target, value).at(node.succ)
                continue

            if isinstance(stmt, lang.ArrayAssign):
                idx, checks = eval_in_store(state, stmt.index, self.lengths)
                value, vchecks = eval_in_store(state, stmt.value, self.lengths)
                checks.append(BoundsCheck(stmt.target, idx, self.lengths[stmt.target]))
                handled = self._bounds(state, checks + vchecks, stmt)
                if not isinstance(handled, SymbolicState):
                    return handled
                arr = handled.get(stmt.target)
                assert isinstance(arr, (ConstArray, SymArray, MergedArray))
                state = handled.set(stmt.target, arr.write(idx, value)).at(node.succ)
                continue

            if isinstance(stmt, (lang.Assume, lang.Assert)):
                cond, checks = eval_in_store(state, stmt.cond, self.lengths)
                handled = self._bounds(state, checks, stmt)
                if not isinstance(handled, SymbolicState):
                    return handled
                state = handled
                is_assert = isinstance(stmt, lang.Assert)
                if isinstance(cond, BoolConst):
                    if cond.value:
                        state = state.at(node.succ)
                        continue
                    if is_assert:
                        self._report(stmt, "assert", str(stmt.cond))
                    return _Dead("assert failed" if is_assert else "assume false")
                # Violation side feasible?  If not, the constraint is implied
                # and no tree node is needed.
                viol, _ = self._check(and_(state.pc, not_(cond)), None)
                if not viol:
                    state = state.at(node.succ)
                    continue
                if is_assert:
                    self._report(stmt, "assert", str(stmt.cond))
                return _ParkedConstraint(state, cond, node.succ, is_assert, stmt.line)

            if isinstance(stmt, lang.Return):
                value, checks = eval_in_store(state, stmt.value, self.lengths)
                handled = self._bounds(state, checks, stmt)
                if not isinstance(handled, SymbolicState):
                    return handled
                state = handled.set(RET_SLOT, value)
                return _Exited(state, ExitInfo(stmt.ic, completed=True))

            if isinstance(stmt, (lang.If, lang.While)):
                cond, checks = eval_in_store(state, stmt.cond, self.lengths)
                handled = self._bounds(state, checks, stmt)
                if not isinstance(handled, SymbolicState):
                    return handled
                state = handled
                if isinstance(cond, BoolConst):
                    target = node.succ_true if cond.value else node.succ_false
                    assert target is not None
                    state = state.at(target)
                    continue
                return _ParkedBranch(state, cond)

            raise TypeError(f"unexpected statement {stmt!r}")

    def _bounds(self, state: SymbolicState, checks: list[BoundsCheck],
                stmt: lang.Stmt) -> SymbolicState | _BigStepOutcome:
        """Apply bounds checks: report feasible violations, keep in-bounds side."""
        for chk in checks:
            oob = chk.oob()
            if isinstance(oob, BoolConst):
                if oob.value:
                    self._report(stmt, "oob", f"{chk.array}[{chk.index}]")
                    return _Dead("out-of-bounds access")
                continue
            feasible_oob, _ = self._check(and_(state.pc, oob), None)
            if not feasible_oob:
                continue
            self._report(stmt, "oob", f"{chk.array}[{chk.index}]")
            inb = chk.in_bounds()
            ok, _ = self._check(and_(state.pc, inb), None)
            if not ok:
                return _Dead("out-of-bounds access on every continuation")
            state = state.with_pc(and_(state.pc, inb))
        return state

    def _report(self, stmt: lang.Stmt, kind: str, detail: str) -> None:
        self.findings.add(Finding(kind, stmt.ic, stmt.line, detail))

    # tree construction ----------------------------------------------------

    def explore(self, entry: SymbolicState, region: lang.Region | None = None) -> ExecTree:
        tree = ExecTree(entry)
        try:
            self._explore_into(tree, region)
        except BudgetExceeded as exc:
            raise BudgetExceeded(tree) from exc
        return tree

    def _explore_into(self, tree: ExecTree, region: lang.Region | None) -> None:
        stack: list[ExecNode] = []
        self._settle(tree, tree.root, tree.root.state, None, region, stack)
        while stack:
            node = stack.pop()
            if node.detached or node.status is not NodeStatus.ACTIVE:
                continue
            self._expand(tree, node, region, stack)
            while tree.reactivated:
                stack.append(tree.reactivated.pop())

    def _expand(self, tree: ExecTree, node: ExecNode, region: lang.Region | None,
                stack: list[ExecNode]) -> None:
        assert node.state is not None and node.pending is not None
        cfg_node = self.cfg.node(node.state.ic)
        cond = node.pending
        node.status = NodeStatus.INTERNAL
        sides = (
            (cond, cfg_node.succ_true),
            (not_(cond), cfg_node.succ_false),
        )
        for side_cond, target in sides:
            assert target is not None
            pc = and_(node.state.pc, side_cond)
            feasible, witness = self._check(pc, node.witness)
            if not feasible:
                continue
            child = tree.new_node(side_cond, node)
            child.witness = witness
            self._settle(tree, child, node.state.with_pc(pc).at(target), witness, region, stack)

    def _settle(self, tree: ExecTree, node: ExecNode, state: SymbolicState,
                witness: Model | None, region: lang.Region | None,
                stack: list[ExecNode]) -> None:
        """Run ``state`` forward and pin the outcome onto ``node``."""
        while True:
            out = self._big_step(state, region)
            if isinstance(out, _ParkedBranch):
                node.state = out.state
                node.pending = out.cond
                node.witness = witness
                node.status = NodeStatus.ACTIVE
                stack.append(node)
                break
            if isinstance(out, _Exited):
                node.state = out.state
                node.status = NodeStatus.EXITED
                node.exit = out.info
                node.witness = witness
                break
            if isinstance(out, _Dead):
                node.state = state
                node.status = NodeStatus.DEAD
                return
            assert isinstance(out, _ParkedConstraint)
            # Single-child node keeps the tree path conditions in sync with
            # the strengthened pc.
            pc = and_(out.state.pc, out.cond)
            feasible, witness = self._check(pc, witness)
            if not feasible:
                node.state = out.state
                node.status = NodeStatus.DEAD
                return
            node.state = out.state
            node.status = NodeStatus.INTERNAL
            child = tree.new_node(out.cond, node)
            child.witness = witness
            node = child
            state = out.state.with_pc(pc).at(out.next_ic)
        if self.opts.incremental and node.status in (NodeStatus.ACTIVE, NodeStatus.EXITED):
            self._try_incremental(tree, node, stack)

    def _try_incremental(self, tree: ExecTree, leaf: ExecNode, stack: list[ExecNode]) -> None:
        from . import merge as merge_mod

        live = self.opts.liveness
        assert live is not None, "incremental exploration needs liveness results"
        while True:
            merged = merge_mod.incremental_insert(tree, leaf, live)
            if merged is None:
                return
            if merged.status is NodeStatus.ACTIVE:
                stack.append(merged)
            leaf = merged


def explore_region(entry: SymbolicState, cfg: lang.Cfg, region: lang.Region | None,
                   solver, opts: ExploreOptions | None = None) -> ExecTree:
    """Explore ``region`` (or the whole program when None) from ``entry``."""
    return Explorer(cfg, solver, opts).explore(entry, region)
