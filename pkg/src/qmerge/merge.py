"""State merging: standard, pattern-based (quantified), and incremental.

Standard merging disjoins path constraints and selects store values through
nested if-then-else chains.  Pattern-based merging first abstracts every
root-to-leaf path to a word of constant-blind condition hashes, partitions
the leaves whose words share a ``prefix repeat^k suffix`` shape, synthesizes
a matching formula template, and encodes the whole partition with one fresh
counter and one bounded universal quantifier.  Incremental merging compresses
the execution tree while it is being built by merging a fresh leaf with the
highest compatible node.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import lang
from .exprs import (
    Formula,
    IntConst,
    Node,
    Sym,
    Term,
    TRUE,
    add,
    and_,
    cmp_op,
    eq,
    forall_range,
    free_scalars,
    ge,
    gt,
    implies,
    is_term,
    ite_term,
    le,
    mul,
    not_,
    or_,
    select,
    structural_hash,
    substitute,
)
from .symex import (
    ArrayValue,
    ConstArray,
    ExecNode,
    ExecTree,
    MergedArray,
    NodeStatus,
    StoreValue,
    SymArray,
    SymbolicState,
    tpc,
    tpc_tail,
)


class MergeError(ValueError):
    pass


HOLE = Sym("$y")


# ---------------------------------------------------------------------------
# Standard merging
# ---------------------------------------------------------------------------


def _merge_values(values: list[StoreValue], guards: list[Formula]) -> StoreValue:
    """Right-nested guarded selection; collapses when all values agree."""
    first = values[0]
    if all(v == first for v in values[1:]):
        return first
    if all(is_term(v) for v in values):
        out = values[-1]
        for g, v in zip(reversed(guards), reversed(values[:-1])):
            out = ite_term(g, v, out)  # type: ignore[arg-type]
        return out
    if all(isinstance(v, (ConstArray, SymArray, MergedArray)) for v in values):
        return MergedArray(tuple(guards), tuple(values))  # type: ignore[arg-type]
    raise MergeError("cannot merge a scalar value with an array value")


def _check_compatible(states: list[SymbolicState]) -> None:
    if not states:
        raise MergeError("cannot merge an empty set of states")
    ic = states[0].ic
    names = states[0].var_names()
    for s in states[1:]:
        if s.ic != ic:
            raise MergeError(f"merge-incompatible states: ic {s.ic} != {ic}")
        if s.var_names() != names:
            raise MergeError("merge-incompatible states: different variable sets")


def merge_standard(states: list[SymbolicState],
                   guards: list[Formula] | None = None) -> SymbolicState:
    """Merged state: disjoined pc, if-then-else selected store values.

    ``guards`` defaults to the states' own path constraints; tree-level
    callers pass path-condition tails instead.
    """
    _check_compatible(states)
    if len(states) == 1:
        return states[0]
    if guards is None:
        guards = [s.pc for s in states]
    pc = or_(*(g for g in guards))
    mem: dict[str, StoreValue] = {}
    for name in sorted(states[0].var_names()):
        mem[name] = _merge_values([s.get(name) for s in states], guards[:-1])
    return SymbolicState.make(pc, mem, states[0].ic)


def standard_merge_leaves(tree: ExecTree, leaves: list[ExecNode]) -> SymbolicState:
    """Standard merge of tree leaves, guarded by their path conditions."""
    if len(leaves) == 1:
        assert leaves[0].state is not None
        return leaves[0].state
    guards = [tpc(tree, tree.root, leaf) for leaf in leaves]
    rel = [leaf.state.with_pc(g) for leaf, g in zip(leaves, guards)]  # type: ignore[union-attr]
    merged = merge_standard(rel, guards)
    assert tree.root.state is not None
    return merged.with_pc(and_(tree.root.state.pc, merged.pc))


# ---------------------------------------------------------------------------
# Path hashing and regular patterns
# ---------------------------------------------------------------------------

Word = tuple[int, ...]


def hash_path(tree: ExecTree, leaf: ExecNode) -> Word:
    """Word of per-node condition hashes along the root-to-leaf path."""
    return tuple(structural_hash(n.cond) for n in tree.path(tree.root, leaf))


def check_hash_validity(tree: ExecTree) -> bool:
    """True iff every pair of sibling conditions hashes differently."""
    for node in tree.nodes():
        hashes = [structural_hash(c.cond) for c in node.alive_children()]
        if len(hashes) != len(set(hashes)):
            return False
    return True


def path_hash_index(tree: ExecTree) -> dict[Word, ExecNode]:
    """Map every node's path-hash word to the node; words must be unique."""
    index: dict[Word, ExecNode] = {}
    for node in tree.nodes():
        word = hash_path(tree, node)
        if word in index:
            raise MergeError(f"path hash collision between nodes "
                             f"{index[word].id} and {node.id}")
        index[word] = node
    return index


@dataclass(frozen=True)
class RegularPattern:
    prefix: Word
    repeat: Word
    suffix: Word

    def match(self, word: Word) -> int | None:
        """Repetition count k with word == prefix repeat^k suffix, if any."""
        rem = len(word) - len(self.prefix) - len(self.suffix)
        if rem < 0 or rem % len(self.repeat) != 0:
            return None
        k = rem // len(self.repeat)
        if word == self.prefix + self.repeat * k + self.suffix:
            return k
        return None

    def to_json(self) -> dict:
        return {
            "prefix": [f"{h:016x}" for h in self.prefix],
            "repeat": [f"{h:016x}" for h in self.repeat],
            "suffix": [f"{h:016x}" for h in self.suffix],
        }


@dataclass(frozen=True)
class RegularPartition:
    members: tuple[tuple[ExecNode, int], ...]  # (leaf, k), sorted by k

    def leaves(self) -> list[ExecNode]:
        return [n for n, _ in self.members]

    def ks(self) -> list[int]:
        return [k for _, k in self.members]


def _decompose(short: Word, longer: Word) -> RegularPattern | None:
    """Split the two seed words as prefix.suffix / prefix.repeat.suffix.

    Prefers the shortest prefix (equivalently, the longest shared suffix);
    any valid split yields a correct template, and this choice keeps the
    per-iteration conditions inside the repeated block.
    """
    p_max = 0
    while p_max < len(short) and p_max < len(longer) and short[p_max] == longer[p_max]:
        p_max += 1
    s_max = 0
    while (s_max < len(short) and s_max < len(longer)
           and short[len(short) - 1 - s_max] == longer[len(longer) - 1 - s_max]):
        s_max += 1
    lo = max(1, len(short) - s_max)
    hi = min(p_max, len(short))
    if lo > hi:
        return None
    p = lo
    prefix = short[:p]
    suffix = short[p:]
    repeat = longer[p:len(longer) - len(suffix)]
    if not repeat:
        return None
    return RegularPattern(prefix, repeat, suffix)


def find_regular_partitioning(
    tree: ExecTree,
    group: list[ExecNode],
    threshold: int = 8,
) -> tuple[list[tuple[RegularPattern, RegularPartition]], list[ExecNode]]:
    """Greedy partitioning of a merge group by regular path-hash patterns.

    Returns the disjoint partitions plus the residual leaves.  If more than
    ``threshold`` partitions come out, the result is empty and the whole
    group is residual (the caller falls back to standard merging).
    """
    unassigned: list[tuple[Word, ExecNode]] = sorted(
        ((hash_path(tree, leaf), leaf) for leaf in group),
        key=lambda wl: (len(wl[0]), wl[0], wl[1].id),
    )
    partitions: list[tuple[RegularPattern, RegularPartition]] = []
    while True:
        pattern = None
        for i, (w0, _) in enumerate(unassigned):
            for w1, _ in unassigned[i + 1:]:
                if len(w1) <= len(w0):
                    continue
                pattern = _decompose(w0, w1)
                if pattern is not None:
                    break
            if pattern is not None:
                break
        if pattern is None:
            break
        members = []
        rest = []
        for word, leaf in unassigned:
            k = pattern.match(word)
            if k is None:
                rest.append((word, leaf))
            else:
                members.append((leaf, k))
        members.sort(key=lambda lk: lk[1])
        if len({k for _, k in members}) != len(members):
            raise MergeError("distinct leaves matched the same repetition count")
        partitions.append((pattern, RegularPartition(tuple(members))))
        unassigned = rest
    if len(partitions) > threshold:
        return [], list(group)
    residual = [leaf for _, leaf in unassigned]
    return partitions, residual


# ---------------------------------------------------------------------------
# Extraction and synthesis
# ---------------------------------------------------------------------------


def extract(tree: ExecTree, word: Word, longer_word: Word | None = None) -> Formula:
    """Path-condition tail of the node (or node pair) named by hash words."""
    index = path_hash_index(tree)
    if word not in index:
        raise MergeError("no node with the requested path hash")
    n1 = index[word]
    if longer_word is None:
        return tpc_tail(tree, tree.root, n1)
    if longer_word not in index:
        raise MergeError("no node with the requested path hash")
    return tpc_tail(tree, n1, index[longer_word])


def synthesize_linear_term(points: list[tuple[int, int]]) -> tuple[int, int] | None:
    """Integer (a, b) with a*d + b == g for all points (d, g), if any."""
    if not points:
        return None
    if len(points) == 1:
        return (0, points[0][1])
    (d1, g1), (d2, g2) = points[0], points[1]
    if d1 == d2:
        return None
    if (g2 - g1) % (d2 - d1) != 0:
        return None
    a = (g2 - g1) // (d2 - d1)
    b = g1 - a * d1
    if all(a * d + b == g for d, g in points):
        return (a, b)
    return None


def linear_term_ast(a: int, b: int, var: Sym) -> Term:
    if a == 0:
        return IntConst(b)
    return add(mul(a, var), IntConst(b))


@dataclass(frozen=True)
class SynthesisTask:
    """One template-fitting problem: find phi with phi[d/var] == psi for all rows."""

    equations: tuple[tuple[int, Node], ...]
    skeleton: Node | None = None
    gammas: tuple[int, ...] | None = None
    linear: tuple[int, int] | None = None
    solution: Node | None = None


class _Mismatch(Exception):
    pass


def anti_unify(instances: list[Node]) -> tuple[Node, tuple[int, ...] | None]:
    """Generalize syntactically identical instances up to one constant.

    Returns (skeleton, gammas): the skeleton carries ``HOLE`` at every
    position where the instances differ, and gammas gives the per-instance
    constant filling the holes.  All differing positions must be integer
    constants, and within each instance they must agree on a single value.
    Raises ``_Mismatch`` if no such generalization exists.
    """
    gammas: list[tuple[int, ...] | None] = [None]

    def walk(nodes: list[Node]) -> Node:
        first = nodes[0]
        if all(n == first for n in nodes[1:]):
            return first
        if all(isinstance(n, IntConst) for n in nodes):
            values = tuple(n.value for n in nodes)  # type: ignore[union-attr]
            if gammas[0] is None:
                gammas[0] = values
            elif gammas[0] != values:
                raise _Mismatch()
            return HOLE
        if len({type(n) for n in nodes}) != 1:
            raise _Mismatch()
        from . import exprs
        if isinstance(first, exprs.Cmp) and len({n.op for n in nodes}) != 1:  # type: ignore[union-attr]
            raise _Mismatch()
        if isinstance(first, exprs.Mul) and len({n.scale for n in nodes}) != 1:  # type: ignore[union-attr]
            raise _Mismatch()
        if isinstance(first, (exprs.Sym, exprs.ArraySym, exprs.BoolConst)):
            raise _Mismatch()
        kid_lists = [exprs.children(n) for n in nodes]
        if len({len(k) for k in kid_lists}) != 1:
            raise _Mismatch()
        rebuilt = [walk([k[i] for k in kid_lists]) for i in range(len(kid_lists[0]))]
        return _rebuild(first, rebuilt)

    skeleton = walk(instances)
    return skeleton, gammas[0]


def _rebuild(template: Node, kids: list[Node]) -> Node:
    from . import exprs
    if isinstance(template, exprs.Select):
        return select(kids[0], kids[1])  # type: ignore[arg-type]
    if isinstance(template, exprs.Add):
        return add(*kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Sub):
        from .exprs import sub as sub_
        return sub_(*kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Mul):
        return mul(template.scale, kids[0])
    if isinstance(template, exprs.IteTerm):
        return ite_term(*kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Cmp):
        return cmp_op(template.op, *kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Not):
        return not_(kids[0])  # type: ignore[arg-type]
    if isinstance(template, exprs.And):
        return and_(*kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Or):
        return or_(*kids)  # type: ignore[arg-type]
    if isinstance(template, exprs.Implies):
        return implies(*kids)  # type: ignore[arg-type]
    raise _Mismatch()


def synthesize_template(equations: list[tuple[int, Node]], var: Sym) -> SynthesisTask:
    """Solve phi[d/var] == psi for all (d, psi); `solution` is None on failure."""
    task = SynthesisTask(tuple(equations))
    try:
        skeleton, gammas = anti_unify([psi for _, psi in equations])
    except _Mismatch:
        return task
    if gammas is None:
        candidate: Node = skeleton
        fit = None
    else:
        fit = synthesize_linear_term([(d, g) for (d, _), g in zip(equations, gammas)])
        if fit is None:
            return SynthesisTask(tuple(equations), skeleton, gammas)
        candidate = substitute(skeleton, HOLE, linear_term_ast(fit[0], fit[1], var))
    for d, psi in equations:
        if substitute(candidate, var, IntConst(d)) != psi:
            return SynthesisTask(tuple(equations), skeleton, gammas, fit)
    return SynthesisTask(tuple(equations), skeleton, gammas, fit, candidate)


@dataclass(frozen=True)
class FormulaPattern:
    """(closed prefix, step(var), suffix(var)) template for a leaf partition."""

    prefix: Formula
    step: Formula
    suffix: Formula
    var: Sym

    def instantiate(self, k: int) -> Formula:
        """The path-condition shape for repetition count k."""
        steps = [substitute(self.step, self.var, IntConst(i)) for i in range(1, k + 1)]
        return and_(self.prefix, *steps, substitute(self.suffix, self.var, IntConst(k)))

    def to_json(self) -> dict:
        return {"prefix": str(self.prefix), "step": str(self.step),
                "suffix": str(self.suffix), "var": self.var.name}


def _pattern_var(tree: ExecTree) -> Sym:
    used: set[str] = set()
    for node in tree.nodes():
        used |= free_scalars(node.cond)
        if node.state is not None:
            used |= {n for n, _ in node.state.mem}
    return Sym("x") if "x" not in used else Sym("$x")


def synthesize_formula_pattern(tree: ExecTree, pattern: RegularPattern,
                               partition: RegularPartition) -> FormulaPattern | None:
    """Build and verify the formula template for a regular partition."""
    var = _pattern_var(tree)
    max_k = max(partition.ks())
    prefix_formula = extract(tree, pattern.prefix)

    step_eqs: list[tuple[int, Node]] = []
    for i in range(1, max_k + 1):
        lhs = pattern.prefix + pattern.repeat * (i - 1)
        rhs = pattern.prefix + pattern.repeat * i
        step_eqs.append((i, extract(tree, lhs, rhs)))
    suffix_eqs: list[tuple[int, Node]] = []
    for leaf, k in partition.members:
        base = pattern.prefix + pattern.repeat * k
        suffix_eqs.append((k, extract(tree, base, hash_path(tree, leaf))))

    step = synthesize_template(step_eqs, var).solution if step_eqs else None
    if step_eqs and step is None:
        return None
    suffix = synthesize_template(suffix_eqs, var).solution
    if suffix is None:
        return None
    if not step_eqs:
        step = TRUE
    fp = FormulaPattern(prefix_formula, step, suffix, var)  # type: ignore[arg-type]

    # Guard against matcher bugs: re-verify the defining equation per member.
    for leaf, k in partition.members:
        if tpc(tree, tree.root, leaf) != fp.instantiate(k):
            return None
    return fp


# ---------------------------------------------------------------------------
# Pattern-based merged states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MergedState:
    state: SymbolicState
    kind: str  # 'pattern' | 'standard'
    counter: str | None = None
    k_domain: tuple[int, ...] = ()
    leaf_ids: tuple[int, ...] = ()
    pattern: RegularPattern | None = None
    formula_pattern: FormulaPattern | None = None

    def to_json(self) -> dict:
        out: dict = {
            "kind": self.kind,
            "pc": str(self.state.pc),
            "mem": {n: str(v) if is_term(v) else _array_json(v)
                    for n, v in self.state.mem},
            "ic": self.state.ic,
            "leaves": list(self.leaf_ids),
        }
        if self.kind == "pattern":
            out["counter"] = self.counter
            out["k_domain"] = list(self.k_domain)
            assert self.pattern is not None and self.formula_pattern is not None
            out["regular_pattern"] = self.pattern.to_json()
            out["formula_pattern"] = self.formula_pattern.to_json()
        return out


def _array_json(v: StoreValue) -> dict:
    if isinstance(v, ConstArray):
        return {"array": "const", "cells": list(v.cells),
                "writes": [[str(i), str(x)] for i, x in v.writes]}
    if isinstance(v, SymArray):
        return {"array": "sym", "base": v.sym.name,
                "writes": [[str(i), str(x)] for i, x in v.writes]}
    assert isinstance(v, MergedArray)
    return {"array": "merged", "guards": [str(g) for g in v.guards],
            "branches": [_array_json(b) for b in v.branches]}


def _contiguous(ks: list[int]) -> bool:
    return ks == list(range(ks[0], ks[0] + len(ks)))


def merge_pattern_based(tree: ExecTree, partition: RegularPartition,
                        fp: FormulaPattern, counter_name: str,
                        bound_var_name: str = "i") -> MergedState:
    """Quantified merged state for a partition matching a formula pattern."""
    leaves = partition.leaves()
    states = [leaf.state for leaf in leaves]
    assert all(s is not None for s in states)
    _check_compatible(states)  # type: ignore[arg-type]
    ks = partition.ks()
    k = Sym(counter_name)
    bound = Sym(bound_var_name)

    if _contiguous(ks):
        k_range = and_(le(IntConst(ks[0]), k), le(k, IntConst(ks[-1])))
    else:
        k_range = or_(*(eq(k, IntConst(kj)) for kj in ks))
    quantified = forall_range(bound, IntConst(1), k, substitute(fp.step, fp.var, bound))
    assert tree.root.state is not None
    pc = and_(tree.root.state.pc, k_range, fp.prefix, quantified,
              substitute(fp.suffix, fp.var, k))

    guards = [tpc(tree, tree.root, leaf) for leaf in leaves]
    mem: dict[str, StoreValue] = {}
    for name in sorted(states[0].var_names()):  # type: ignore[union-attr]
        values = [s.get(name) for s in states]  # type: ignore[union-attr]
        mem[name] = _merge_indexed_value(values, ks, k, guards)

    state = SymbolicState.make(pc, mem, states[0].ic)  # type: ignore[union-attr]
    return MergedState(
        state=state,
        kind="pattern",
        counter=counter_name,
        k_domain=tuple(ks),
        leaf_ids=tuple(leaf.id for leaf in leaves),
        pattern=None,
        formula_pattern=fp,
    )


def _merge_indexed_value(values: list[StoreValue], ks: list[int], k: Sym,
                         guards: list[Formula]) -> StoreValue:
    first = values[0]
    if all(v == first for v in values[1:]):
        return first
    if all(is_term(v) for v in values):
        try:
            skeleton, gammas = anti_unify(list(values))
        except _Mismatch:
            return _merge_values(values, guards[:-1])
        if gammas is not None:
            fit = synthesize_linear_term(list(zip(ks, gammas)))
            if fit is not None:
                candidate = substitute(skeleton, HOLE, linear_term_ast(fit[0], fit[1], k))
                if all(substitute(candidate, k, IntConst(kj)) == v
                       for kj, v in zip(ks, values)):
                    return candidate
    return _merge_values(values, guards[:-1])


# ---------------------------------------------------------------------------
# Incremental tree compression
# ---------------------------------------------------------------------------


def _live_store_equal(a: SymbolicState, b: SymbolicState,
                      live: frozenset[str]) -> bool:
    if a.var_names() != b.var_names():
        return False
    return all(a.get(v) == b.get(v) for v in sorted(live) if v in a.var_names())


def _lca(a: ExecNode, b: ExecNode) -> ExecNode:
    seen = {id(n) for n in [a] + a.ancestors()}
    n: ExecNode | None = b
    while n is not None:
        if id(n) in seen:
            return n
        n = n.parent
    raise MergeError("nodes are not in the same tree")


def incremental_insert(tree: ExecTree, leaf: ExecNode,
                       live: lang.LivenessResult) -> ExecNode | None:
    """Try to merge a freshly settled leaf with the highest compatible node.

    On success the leaf and its partner (plus the partner's subtree) are
    replaced by a merged node under their lowest common ancestor, single-child
    parents are collapsed into their child, and the merged node is returned.
    Returns None when no merge applies.
    """
    if leaf.detached or leaf.state is None:
        return None
    ancestor_ids = {n.id for n in leaf.ancestors()}
    live_here = live.at(leaf.state.ic)
    candidates: list[ExecNode] = []
    for node in tree.nodes():
        if node is leaf or node.detached or node.state is None:
            continue
        if node.status is NodeStatus.DEAD:
            continue
        if node.id in ancestor_ids:
            continue  # the leaf is reachable from it
        if node.state.ic != leaf.state.ic:
            continue
        if node.status is NodeStatus.EXITED or leaf.status is NodeStatus.EXITED:
            if node.status is not leaf.status:
                continue
        if not _live_store_equal(node.state, leaf.state, live_here):
            continue
        lca = _lca(leaf, node)
        if lca is not leaf.parent and lca is not node.parent:
            continue
        candidates.append(node)
    if not candidates:
        return None
    partner = min(candidates, key=lambda n: (n.depth(), n.id))
    return _merge_pair(tree, leaf, partner)


def _merge_pair(tree: ExecTree, leaf: ExecNode, partner: ExecNode) -> ExecNode:
    lca = _lca(leaf, partner)
    first, second = sorted((partner, leaf), key=lambda n: n.id)
    tail_first = tpc_tail(tree, lca, first)
    tail_second = tpc_tail(tree, lca, second)
    assert first.state is not None and second.state is not None
    merged = merge_standard(
        [first.state.with_pc(tail_first), second.state.with_pc(tail_second)],
        [tail_first, tail_second],
    )
    assert tree.root.state is not None
    prefix_pc = and_(tree.root.state.pc, tpc(tree, tree.root, lca))
    new_cond = or_(tail_first, tail_second)

    node = tree.new_node(new_cond, lca)
    node.state = merged.with_pc(and_(prefix_pc, new_cond))
    node.witness = first.witness or second.witness
    if leaf.status is NodeStatus.EXITED:
        assert partner.exit is not None and leaf.exit is not None
        assert partner.exit.completed == leaf.exit.completed
        node.status = NodeStatus.EXITED
        node.exit = leaf.exit
    else:
        node.status = NodeStatus.ACTIVE
        node.pending = leaf.pending if leaf.pending is not None else partner.pending
        assert node.pending is not None

    parents = [p for p in (leaf.parent, partner.parent) if p is not None and p is not lca]
    tree.detach(leaf)
    tree.detach(partner)
    for p in parents:
        if p.detached:
            continue
        kids = p.alive_children()
        if len(kids) == 1:
            child = kids[0]
            child.cond = and_(p.cond, child.cond)
            child.parent = p.parent
            assert p.parent is not None
            p.parent.children.append(child)
            p.detached = True
        elif not kids:
            # The parent lost its only child; its snapshot state becomes a
            # leaf again and must be re-explored.
            if p.status is NodeStatus.INTERNAL and p.pending is not None:
                p.status = NodeStatus.ACTIVE
                tree.reactivated.append(p)
    return node
