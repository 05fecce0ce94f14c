"""Parser, control-flow graph and liveness analysis for `.mini` programs.

Grammar (ASCII only, C-like tokens):

    program  ::= decl* stmt*
    decl     ::= "sym" "int" IDENT ";"
               | "sym" "byte" IDENT "[" INT "]" ";"
               | "byte" IDENT "[" INT "]" "=" STRING ";"
               | "int" IDENT ";"
    stmt     ::= IDENT "=" expr ";"
               | IDENT "[" expr "]" "=" expr ";"
               | "if" "(" expr ")" block ("else" block)?
               | "@merge"? "while" "(" expr ")" block
               | "assume" "(" expr ")" ";"
               | "assert" "(" expr ")" ";"
               | "return" expr ";"
    block    ::= "{" stmt* "}"
    expr     ::= or-expr; operators (tightest first):
                 unary ! -, * (one side constant), + -,
                 == != < <= > >=, &&, ||

`sym int` declares a symbolic integer input, `sym byte a[N]` a symbolic
array of N integer cells, `byte a[N] = "lit"` a concrete array holding the
ASCII codes of the literal zero-padded to length N, and `int` a local scalar
initialized to 0.  String literals must leave room for at least one padding
zero (C-style terminator).  A `@merge` annotation marks a loop as a state
merging region; `@merge` loops may not be nested inside each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .exprs import (
    ArraySym,
    Formula,
    IntConst,
    Node,
    Sym,
    Term,
    add,
    and_,
    eq,
    free_scalars,
    ge,
    gt,
    is_formula,
    is_term,
    le,
    lt,
    mul,
    neq,
    not_,
    or_,
    select,
    sub,
)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarDecl:
    name: str
    symbolic: bool
    line: int


@dataclass(frozen=True)
class ArrayDecl:
    name: str
    length: int
    symbolic: bool
    contents: tuple[int, ...] | None  # concrete cell values, None if symbolic
    line: int


@dataclass
class Stmt:
    ic: int = field(init=False, default=-1)
    line: int = field(init=False, default=0)


@dataclass
class Assign(Stmt):
    target: str
    value: Node


@dataclass
class ArrayAssign(Stmt):
    target: str
    index: Node
    value: Node


@dataclass
class If(Stmt):
    cond: Node
    then: list[Stmt]
    orelse: list[Stmt]


@dataclass
class While(Stmt):
    cond: Node
    body: list[Stmt]
    merge: bool


@dataclass
class Assume(Stmt):
    cond: Node


@dataclass
class Assert(Stmt):
    cond: Node


@dataclass
class Return(Stmt):
    value: Node


@dataclass
class Program:
    name: str
    scalars: dict[str, ScalarDecl]
    arrays: dict[str, ArrayDecl]
    body: list[Stmt]

    def array_lengths(self) -> dict[str, int]:
        return {a.name: a.length for a in self.arrays.values()}


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_PUNCT = ["@merge", "&&", "||", "==", "!=", "<=", ">=", "<", ">", "=", "(", ")",
          "[", "]", "{", "}", ";", ",", "+", "-", "*", "!"]

_KEYWORDS = {"sym", "int", "byte", "if", "else", "while", "assume", "assert", "return"}


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'punct' | 'ident' | 'int' | 'string' | 'eof'
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, col = 1, 1
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        if src.startswith("//", i):
            while i < n and src[i] != "\n":
                i += 1
            continue
        if ch == '"':
            j = i + 1
            while j < n and src[j] != '"':
                if src[j] == "\n":
                    raise ParseError("unterminated string literal", line, col)
                j += 1
            if j >= n:
                raise ParseError("unterminated string literal", line, col)
            toks.append(_Tok("string", src[i + 1:j], line, col))
            col += j - i + 1
            i = j + 1
            continue
        matched = False
        for p in _PUNCT:
            if src.startswith(p, i):
                toks.append(_Tok("punct", p, line, col))
                i += len(p)
                col += len(p)
                matched = True
                break
        if matched:
            continue
        if ch.isdigit():
            j = i
            while j < n and src[j].isdigit():
                j += 1
            toks.append(_Tok("int", src[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(_Tok("ident", src[i:j], line, col))
            col += j - i
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, toks: list[_Tok], name: str):
        self.toks = toks
        self.pos = 0
        self.name = name
        self.scalars: dict[str, ScalarDecl] = {}
        self.arrays: dict[str, ArrayDecl] = {}

    # token plumbing

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def take(self) -> _Tok:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def at(self, text: str) -> bool:
        t = self.peek()
        return t.kind in ("punct", "ident") and t.text == text

    def eat(self, text: str) -> _Tok:
        t = self.peek()
        if not self.at(text):
            raise ParseError(f"expected {text!r}, got {t.text!r}", t.line, t.col)
        return self.take()

    def eat_ident(self) -> _Tok:
        t = self.peek()
        if t.kind != "ident" or t.text in _KEYWORDS:
            raise ParseError(f"expected identifier, got {t.text!r}", t.line, t.col)
        return self.take()

    def eat_int(self) -> int:
        t = self.peek()
        if t.kind != "int":
            raise ParseError(f"expected integer literal, got {t.text!r}", t.line, t.col)
        self.take()
        return int(t.text)

    # declarations

    def check_fresh(self, name: str, tok: _Tok) -> None:
        if name in self.scalars or name in self.arrays:
            raise ParseError(f"duplicate declaration of '{name}'", tok.line, tok.col)

    def parse_decls(self) -> None:
        while True:
            t = self.peek()
            if t.kind == "ident" and t.text in ("sym", "int", "byte"):
                self.parse_decl()
            else:
                return

    def parse_decl(self) -> None:
        t = self.take()
        if t.text == "sym":
            kind = self.take()
            if kind.text == "int":
                ident = self.eat_ident()
                self.check_fresh(ident.text, ident)
                self.eat(";")
                self.scalars[ident.text] = ScalarDecl(ident.text, True, ident.line)
                return
            if kind.text == "byte":
                ident = self.eat_ident()
                self.check_fresh(ident.text, ident)
                self.eat("[")
                length = self.eat_int()
                self.eat("]")
                self.eat(";")
                if length < 1:
                    raise ParseError(f"array '{ident.text}' must have length >= 1",
                                     ident.line, ident.col)
                self.arrays[ident.text] = ArrayDecl(ident.text, length, True, None, ident.line)
                return
            raise ParseError(f"expected 'int' or 'byte' after 'sym'", kind.line, kind.col)
        if t.text == "int":
            ident = self.eat_ident()
            self.check_fresh(ident.text, ident)
            self.eat(";")
            self.scalars[ident.text] = ScalarDecl(ident.text, False, ident.line)
            return
        if t.text == "byte":
            ident = self.eat_ident()
            self.check_fresh(ident.text, ident)
            self.eat("[")
            length = self.eat_int()
            self.eat("]")
            self.eat("=")
            lit = self.peek()
            if lit.kind != "string":
                raise ParseError("expected string literal", lit.line, lit.col)
            self.take()
            self.eat(";")
            codes = tuple(ord(c) for c in lit.text)
            if any(c > 255 for c in codes):
                raise ParseError("string literals must be ASCII", lit.line, lit.col)
            if length < len(codes) + 1:
                raise ParseError(
                    f"array '{ident.text}' too short for literal plus terminator",
                    ident.line, ident.col)
            contents = codes + (0,) * (length - len(codes))
            self.arrays[ident.text] = ArrayDecl(ident.text, length, False, contents, ident.line)
            return
        raise ParseError(f"unexpected token {t.text!r}", t.line, t.col)

    # statements

    def parse_block(self) -> list[Stmt]:
        self.eat("{")
        out = []
        while not self.at("}"):
            out.append(self.parse_stmt())
        self.eat("}")
        return out

    def parse_stmt(self) -> Stmt:
        t = self.peek()
        if self.at("@merge"):
            self.take()
            w = self.eat("while")
            return self.parse_while(w, merge=True)
        if self.at("while"):
            w = self.take()
            return self.parse_while(w, merge=False)
        if self.at("if"):
            self.take()
            self.eat("(")
            cond = self.parse_expr(want="formula")
            self.eat(")")
            then = self.parse_block()
            orelse: list[Stmt] = []
            if self.at("else"):
                self.take()
                orelse = self.parse_block()
            s: Stmt = If(cond, then, orelse)
            s.line = t.line
            return s
        if self.at("assume") or self.at("assert"):
            kw = self.take()
            self.eat("(")
            cond = self.parse_expr(want="formula")
            self.eat(")")
            self.eat(";")
            s = Assume(cond) if kw.text == "assume" else Assert(cond)
            s.line = kw.line
            return s
        if self.at("return"):
            self.take()
            value = self.parse_expr(want="term")
            self.eat(";")
            s = Return(value)
            s.line = t.line
            return s
        ident = self.eat_ident()
        if self.at("["):
            if ident.text not in self.arrays:
                raise ParseError(f"undeclared array '{ident.text}'", ident.line, ident.col)
            self.take()
            index = self.parse_expr(want="term")
            self.eat("]")
            self.eat("=")
            value = self.parse_expr(want="term")
            self.eat(";")
            s = ArrayAssign(ident.text, index, value)
            s.line = ident.line
            return s
        if ident.text not in self.scalars:
            raise ParseError(f"undeclared variable '{ident.text}'", ident.line, ident.col)
        self.eat("=")
        value = self.parse_expr(want="term")
        self.eat(";")
        s = Assign(ident.text, value)
        s.line = ident.line
        return s

    def parse_while(self, w: _Tok, merge: bool) -> Stmt:
        self.eat("(")
        cond = self.parse_expr(want="formula")
        self.eat(")")
        body = self.parse_block()
        s = While(cond, body, merge)
        s.line = w.line
        return s

    # expressions; source expressions reuse the logic AST with variables as
    # plain symbols, resolved against the store during execution

    def parse_expr(self, want: str) -> Node:
        out = self.parse_or()
        t = self.peek()
        if want == "formula" and not is_formula(out):
            raise ParseError("condition must be boolean", t.line, t.col)
        if want == "term" and not is_term(out):
            raise ParseError("expected an integer expression", t.line, t.col)
        return out

    def parse_or(self) -> Node:
        out = self.parse_and()
        while self.at("||"):
            t = self.take()
            rhs = self.parse_and()
            out = or_(self._as_formula(out, t), self._as_formula(rhs, t))
        return out

    def parse_and(self) -> Node:
        out = self.parse_cmp()
        while self.at("&&"):
            t = self.take()
            rhs = self.parse_cmp()
            out = and_(self._as_formula(out, t), self._as_formula(rhs, t))
        return out

    def parse_cmp(self) -> Node:
        out = self.parse_sum()
        t = self.peek()
        if t.kind == "punct" and t.text in ("==", "!=", "<", "<=", ">", ">="):
            self.take()
            rhs = self.parse_sum()
            ctor = {"==": eq, "!=": neq, "<": lt, "<=": le, ">": gt, ">=": ge}[t.text]
            return ctor(self._as_term(out, t), self._as_term(rhs, t))
        return out

    def parse_sum(self) -> Node:
        out = self.parse_product()
        while self.peek().kind == "punct" and self.peek().text in ("+", "-"):
            t = self.take()
            rhs = self.parse_product()
            a, b = self._as_term(out, t), self._as_term(rhs, t)
            out = add(a, b) if t.text == "+" else sub(a, b)
        return out

    def parse_product(self) -> Node:
        out = self.parse_unary()
        while self.at("*"):
            t = self.take()
            rhs = self.parse_unary()
            a, b = self._as_term(out, t), self._as_term(rhs, t)
            if not isinstance(a, IntConst) and not isinstance(b, IntConst):
                raise ParseError("one side of '*' must be a constant", t.line, t.col)
            out = mul(a if isinstance(a, IntConst) else b,
                      b if isinstance(a, IntConst) else a)
        return out

    def parse_unary(self) -> Node:
        t = self.peek()
        if self.at("!"):
            self.take()
            inner = self.parse_unary()
            return not_(self._as_formula(inner, t))
        if self.at("-"):
            self.take()
            inner = self.parse_unary()
            return sub(IntConst(0), self._as_term(inner, t))
        return self.parse_atom()

    def parse_atom(self) -> Node:
        t = self.peek()
        if self.at("("):
            self.take()
            out = self.parse_or()
            self.eat(")")
            return out
        if t.kind == "int":
            self.take()
            return IntConst(int(t.text))
        if t.kind == "ident" and t.text not in _KEYWORDS:
            self.take()
            if self.at("["):
                if t.text not in self.arrays:
                    raise ParseError(f"undeclared array '{t.text}'", t.line, t.col)
                self.take()
                idx = self.parse_expr(want="term")
                self.eat("]")
                return select(ArraySym(t.text), idx)
            if t.text in self.arrays:
                raise ParseError(f"array '{t.text}' used without an index", t.line, t.col)
            if t.text not in self.scalars:
                raise ParseError(f"undeclared variable '{t.text}'", t.line, t.col)
            return Sym(t.text)
        raise ParseError(f"unexpected token {t.text!r}", t.line, t.col)

    def _as_formula(self, x: Node, t: _Tok) -> Formula:
        if not is_formula(x):
            raise ParseError("expected a boolean expression", t.line, t.col)
        return x  # type: ignore[return-value]

    def _as_term(self, x: Node, t: _Tok) -> Term:
        if not is_term(x):
            raise ParseError("expected an integer expression", t.line, t.col)
        return x  # type: ignore[return-value]


def parse(source: str, name: str = "<program>") -> Program:
    toks = _tokenize(source)
    p = _Parser(toks, name)
    p.parse_decls()
    body = []
    while p.peek().kind != "eof":
        body.append(p.parse_stmt())
    prog = Program(name, p.scalars, p.arrays, body)
    _number_statements(prog)
    _check_merge_nesting(prog.body, inside=False)
    return prog


def _number_statements(prog: Program) -> None:
    counter = [0]

    def visit(stmts: list[Stmt]) -> None:
        for s in stmts:
            s.ic = counter[0]
            counter[0] += 1
            if isinstance(s, If):
                visit(s.then)
                visit(s.orelse)
            elif isinstance(s, While):
                visit(s.body)

    visit(prog.body)


def _check_merge_nesting(stmts: list[Stmt], inside: bool) -> None:
    for s in stmts:
        if isinstance(s, While):
            if s.merge and inside:
                raise ParseError("nested @merge regions are not supported", s.line, 1)
            _check_merge_nesting(s.body, inside or s.merge)
        elif isinstance(s, If):
            _check_merge_nesting(s.then, inside)
            _check_merge_nesting(s.orelse, inside)


# ---------------------------------------------------------------------------
# Pretty-printer (parse . pretty . parse is the identity)
# ---------------------------------------------------------------------------


def pretty(prog: Program) -> str:
    lines: list[str] = []
    for d in prog.scalars.values():
        lines.append(f"sym int {d.name};" if d.symbolic else f"int {d.name};")
    for d in prog.arrays.values():
        if d.symbolic:
            lines.append(f"sym byte {d.name}[{d.length}];")
        else:
            assert d.contents is not None
            text = "".join(chr(c) for c in d.contents).rstrip("\x00")
            lines.append(f'byte {d.name}[{d.length}] = "{text}";')

    def emit(stmts: list[Stmt], indent: int) -> None:
        pad = "    " * indent
        for s in stmts:
            if isinstance(s, Assign):
                lines.append(f"{pad}{s.target} = {s.value};")
            elif isinstance(s, ArrayAssign):
                lines.append(f"{pad}{s.target}[{s.index}] = {s.value};")
            elif isinstance(s, Assume):
                lines.append(f"{pad}assume({s.cond});")
            elif isinstance(s, Assert):
                lines.append(f"{pad}assert({s.cond});")
            elif isinstance(s, Return):
                lines.append(f"{pad}return {s.value};")
            elif isinstance(s, If):
                lines.append(f"{pad}if ({s.cond}) {{")
                emit(s.then, indent + 1)
                if s.orelse:
                    lines.append(f"{pad}}} else {{")
                    emit(s.orelse, indent + 1)
                lines.append(f"{pad}}}")
            elif isinstance(s, While):
                kw = "@merge while" if s.merge else "while"
                lines.append(f"{pad}{kw} ({s.cond}) {{")
                emit(s.body, indent + 1)
                lines.append(f"{pad}}}")
    emit(prog.body, 0)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Control-flow graph
# ---------------------------------------------------------------------------


@dataclass
class CfgNode:
    ic: int
    stmt: Stmt | None  # None for the virtual exit node
    succ: int | None = None          # fall-through successor
    succ_true: int | None = None     # branch target when cond holds
    succ_false: int | None = None    # branch target when cond fails

    @property
    def is_branch(self) -> bool:
        return isinstance(self.stmt, (If, While))

    def successors(self) -> list[int]:
        if self.is_branch:
            return [s for s in (self.succ_true, self.succ_false) if s is not None]
        return [self.succ] if self.succ is not None else []


@dataclass(frozen=True)
class Region:
    """A single-entry `@merge` loop: its header plus all body statements."""

    header_ic: int
    body_ics: frozenset[int]
    exit_ic: int  # first instruction after the loop

    def contains(self, ic: int) -> bool:
        return ic == self.header_ic or ic in self.body_ics


@dataclass
class Cfg:
    program: Program
    nodes: dict[int, CfgNode]
    entry_ic: int
    exit_ic: int
    regions: list[Region]

    def node(self, ic: int) -> CfgNode:
        return self.nodes[ic]

    def region_at(self, ic: int) -> Region | None:
        for r in self.regions:
            if r.header_ic == ic:
                return r
        return None


def lower_to_cfg(prog: Program) -> Cfg:
    exit_ic = max((s.ic for s in _all_stmts(prog.body)), default=-1) + 1
    nodes: dict[int, CfgNode] = {exit_ic: CfgNode(exit_ic, None)}
    regions: list[Region] = []

    def wire(stmts: list[Stmt], after: int) -> int:
        """Build nodes for the list, return the entry ic (or `after` if empty)."""
        entry = after
        for s in reversed(stmts):
            entry = wire_one(s, entry)
        return entry

    def wire_one(s: Stmt, after: int) -> int:
        n = CfgNode(s.ic, s)
        nodes[s.ic] = n
        if isinstance(s, If):
            n.succ_true = wire(s.then, after)
            n.succ_false = wire(s.orelse, after)
        elif isinstance(s, While):
            n.succ_true = wire(s.body, s.ic)
            n.succ_false = after
            if s.merge:
                regions.append(Region(s.ic, frozenset(x.ic for x in _all_stmts(s.body)), after))
        elif isinstance(s, Return):
            n.succ = exit_ic
        else:
            n.succ = after
        return s.ic

    entry_ic = wire(prog.body, exit_ic)
    regions.sort(key=lambda r: r.header_ic)
    return Cfg(prog, nodes, entry_ic, exit_ic, regions)


def _all_stmts(stmts: list[Stmt]):
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from _all_stmts(s.then)
            yield from _all_stmts(s.orelse)
        elif isinstance(s, While):
            yield from _all_stmts(s.body)


# ---------------------------------------------------------------------------
# Liveness (backward may-analysis, fixpoint by worklist)
# ---------------------------------------------------------------------------


@dataclass
class LivenessResult:
    live_in: dict[int, frozenset[str]]

    def at(self, ic: int) -> frozenset[str]:
        return self.live_in.get(ic, frozenset())


def _uses_defs(stmt: Stmt | None) -> tuple[set[str], set[str]]:
    if stmt is None:
        return set(), set()
    if isinstance(stmt, Assign):
        return _vars_of(stmt.value), {stmt.target}
    if isinstance(stmt, ArrayAssign):
        # A cell write leaves the other cells visible, so the array is both
        # used and defined.
        return _vars_of(stmt.index) | _vars_of(stmt.value) | {stmt.target}, {stmt.target}
    if isinstance(stmt, (If, While)):
        return _vars_of(stmt.cond), set()
    if isinstance(stmt, (Assume, Assert)):
        return _vars_of(stmt.cond), set()
    if isinstance(stmt, Return):
        return _vars_of(stmt.value), set()
    return set(), set()


def _vars_of(x: Node) -> set[str]:
    from .exprs import array_symbols
    return free_scalars(x) | array_symbols(x)


def liveness(cfg: Cfg) -> LivenessResult:
    use: dict[int, set[str]] = {}
    defs: dict[int, set[str]] = {}
    preds: dict[int, list[int]] = {ic: [] for ic in cfg.nodes}
    for ic, n in cfg.nodes.items():
        use[ic], defs[ic] = _uses_defs(n.stmt)
        for s in n.successors():
            preds[s].append(ic)

    live_in: dict[int, set[str]] = {ic: set() for ic in cfg.nodes}
    work = list(cfg.nodes)
    while work:
        ic = work.pop()
        n = cfg.nodes[ic]
        live_out: set[str] = set()
        for s in n.successors():
            live_out |= live_in[s]
        new_in = use[ic] | (live_out - defs[ic])
        if new_in != live_in[ic]:
            live_in[ic] = new_in
            work.extend(preds[ic])
    return LivenessResult({ic: frozenset(v) for ic, v in live_in.items()})
