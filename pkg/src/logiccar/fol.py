"""First-order rule language: AST, text format, and rule generators.

One rule per line, `#` starts a comment. The grammar:

    formula := "forall" IDENT "(" expr ")"
    expr    := disj ("=>" expr)?          right-associative
    disj    := conj ("or" conj)*
    conj    := unary ("and" unary)*
    unary   := "not" unary | atom
    atom    := GRANULARITY ":" NAME "(" IDENT ")" | "(" expr ")"

Precedence: not > and > or > =>. Predicates are qualified label
references that resolve against a symbol table; printing is canonical and
round-trips to a structurally identical formula.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce

from .data import LabelSpace
from .errors import ValidationError
from .hierarchy import Hierarchy, slugify

GRANULARITIES = ("composition", "verb", "object", "coarse_verb", "coarse_object")


class ParseError(ValidationError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class LabelRef:
    granularity: str
    index: int


@dataclass(frozen=True)
class Pred:
    ref: LabelRef
    var: str


@dataclass(frozen=True)
class Not:
    body: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    antecedent: "Formula"
    consequent: "Formula"


@dataclass(frozen=True)
class ForAll:
    var: str
    body: "Formula"


Formula = Pred | Not | And | Or | Implies | ForAll


@dataclass(frozen=True)
class Rule:
    """A generated or parsed rule; trivial marks degenerate always-true
    rules (empty exclusivity sibling sets), stored as self-implications
    because the connective set has no constant-true formula."""

    formula: ForAll
    kind: str = "user"
    trivial: bool = False


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...]
    provenance: str

    def __post_init__(self):
        seen: set[Formula] = set()
        for r in self.rules:
            if r.formula in seen:
                raise ValidationError(f"duplicate rule: {r.formula}")
            seen.add(r.formula)

    def formulas(self) -> tuple[ForAll, ...]:
        return tuple(r.formula for r in self.rules)


# -- symbol table -------------------------------------------------------------


class SymbolTable:
    """Bidirectional granularity-qualified name <-> index mapping."""

    def __init__(self, names: dict[str, tuple[str, ...]]):
        self.names = {g: tuple(ns) for g, ns in names.items()}
        self.index: dict[tuple[str, str], int] = {}
        for g, ns in self.names.items():
            if g not in GRANULARITIES:
                raise ValidationError(f"unknown granularity {g!r}")
            for i, n in enumerate(ns):
                key = (g, n)
                if key in self.index:
                    raise ValidationError(f"slug collision in {g}: {n!r}")
                self.index[key] = i

    @classmethod
    def from_space(cls, ls: LabelSpace, hierarchy: Hierarchy | None = None) -> "SymbolTable":
        names = {
            "verb": tuple(slugify(v) for v in ls.verbs),
            "object": tuple(slugify(o) for o in ls.objects),
            "composition": tuple(
                slugify(f"{ls.objects[c.object]} {ls.verbs[c.verb]}") for c in ls.compositions
            ),
        }
        if hierarchy is not None:
            names["coarse_verb"] = tuple(slugify(n) for n in hierarchy.coarse_verbs)
            names["coarse_object"] = tuple(slugify(n) for n in hierarchy.coarse_objects)
        return cls(names)

    def name_of(self, ref: LabelRef) -> str:
        try:
            return self.names[ref.granularity][ref.index]
        except (KeyError, IndexError) as exc:
            raise ValidationError(f"unresolvable label reference {ref}") from exc

    def resolve(self, granularity: str, name: str) -> int | None:
        return self.index.get((granularity, name))


# -- parser -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#.*)
  | (?P<arrow>=>)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<qual>[a-z_][a-z0-9_]*:[a-z0-9_]+)
  | (?P<ident>[a-zA-Z_][a-zA-Z0-9_]*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"forall", "and", "or", "not"}


@dataclass
class _Token:
    kind: str
    value: str
    line: int
    col: int


def _tokenize(line_text: str, line_no: int) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(line_text):
        m = _TOKEN_RE.match(line_text, pos)
        if m is None:
            raise ParseError(f"unexpected character {line_text[pos]!r}", line_no, pos + 1)
        kind = m.lastgroup
        if kind == "comment":
            break
        if kind != "ws":
            value = m.group()
            if kind == "ident" and value in _KEYWORDS:
                kind = value
            tokens.append(_Token(kind, value, line_no, pos + 1))
        pos = m.end()
    tokens.append(_Token("eof", "", line_no, len(line_text) + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token], symbols: SymbolTable):
        self.toks = tokens
        self.pos = 0
        self.symbols = symbols
        self.bound_var: str | None = None

    def peek(self) -> _Token:
        return self.toks[self.pos]

    def take(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"expected {what}, found {tok.value or 'end of line'!r}", tok.line, tok.col)
        self.pos += 1
        return tok

    def parse_formula(self) -> ForAll:
        self.take("forall", "'forall'")
        var = self.take("ident", "a variable name")
        self.bound_var = var.value
        self.take("lparen", "'('")
        body = self.parse_expr()
        self.take("rparen", "')'")
        self.take("eof", "end of line")
        return ForAll(var.value, body)

    def parse_expr(self) -> Formula:
        left = self.parse_disj()
        if self.peek().kind == "arrow":
            self.pos += 1
            return Implies(left, self.parse_expr())
        return left

    def parse_disj(self) -> Formula:
        node = self.parse_conj()
        while self.peek().kind == "or":
            self.pos += 1
            node = Or(node, self.parse_conj())
        return node

    def parse_conj(self) -> Formula:
        node = self.parse_unary()
        while self.peek().kind == "and":
            self.pos += 1
            node = And(node, self.parse_unary())
        return node

    def parse_unary(self) -> Formula:
        if self.peek().kind == "not":
            self.pos += 1
            return Not(self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> Formula:
        tok = self.peek()
        if tok.kind == "lparen":
            self.pos += 1
            inner = self.parse_expr()
            self.take("rparen", "')'")
            return inner
        if tok.kind == "qual":
            self.pos += 1
            gran, name = tok.value.split(":", 1)
            if gran not in GRANULARITIES:
                raise ParseError(f"unknown granularity {gran!r}", tok.line, tok.col)
            idx = self.symbols.resolve(gran, name)
            if idx is None:
                raise ParseError(f"unresolved predicate {tok.value!r}", tok.line, tok.col)
            self.take("lparen", "'('")
            var = self.take("ident", "a variable name")
            self.take("rparen", "')'")
            if var.value != self.bound_var:
                raise ParseError(
                    f"unbound variable {var.value!r} (quantifier binds {self.bound_var!r})",
                    var.line,
                    var.col,
                )
            return Pred(LabelRef(gran, idx), var.value)
        raise ParseError(f"expected a predicate or '(', found {tok.value or 'end of line'!r}", tok.line, tok.col)


def parse_rule(text: str, symbols: SymbolTable, line_no: int = 1) -> ForAll:
    return _Parser(_tokenize(text, line_no), symbols).parse_formula()


def parse_rules(text: str, symbols: SymbolTable, provenance: str = "parsed") -> RuleSet:
    rules: list[Rule] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        rules.append(Rule(parse_rule(line, symbols, line_no), kind="user"))
    return RuleSet(rules=tuple(rules), provenance=provenance)


# -- printer ------------------------------------------------------------------

_PREC = {Implies: 0, Or: 1, And: 2, Not: 3, Pred: 4}


def _prec(f: Formula) -> int:
    return _PREC[type(f)]


def _print_expr(f: Formula, symbols: SymbolTable) -> str:
    if isinstance(f, Pred):
        return f"{f.ref.granularity}:{symbols.name_of(f.ref)}({f.var})"
    if isinstance(f, Not):
        inner = _print_expr(f.body, symbols)
        if _prec(f.body) < _PREC[Not]:
            inner = f"({inner})"
        return f"not {inner}"
    if isinstance(f, And):
        left = _print_expr(f.left, symbols)
        right = _print_expr(f.right, symbols)
        if _prec(f.left) < _PREC[And]:
            left = f"({left})"
        if _prec(f.right) <= _PREC[And]:
            right = f"({right})"
        return f"{left} and {right}"
    if isinstance(f, Or):
        left = _print_expr(f.left, symbols)
        right = _print_expr(f.right, symbols)
        if _prec(f.left) < _PREC[Or]:
            left = f"({left})"
        if _prec(f.right) <= _PREC[Or]:
            right = f"({right})"
        return f"{left} or {right}"
    if isinstance(f, Implies):
        left = _print_expr(f.antecedent, symbols)
        right = _print_expr(f.consequent, symbols)
        if _prec(f.antecedent) <= _PREC[Implies]:
            left = f"({left})"
        return f"{left} => {right}"
    raise ValidationError(f"cannot print {type(f).__name__} inside an expression")


def print_rule(f: ForAll, symbols: SymbolTable) -> str:
    if not isinstance(f, ForAll):
        raise ValidationError("top-level formula must be a quantified rule")
    return f"forall {f.var} ({_print_expr(f.body, symbols)})"


def print_rules(ruleset: RuleSet, symbols: SymbolTable) -> str:
    lines = [f"# provenance: {ruleset.provenance}"]
    lines += [print_rule(r.formula, symbols) for r in ruleset.rules]
    return "\n".join(lines) + "\n"


def write_rules(path: str, ruleset: RuleSet, symbols: SymbolTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(print_rules(ruleset, symbols))


def read_rules(path: str, symbols: SymbolTable) -> RuleSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(fh.read(), symbols, provenance="parsed")


# -- rule generators -----------------------------------------------------------

VAR = "x"


def _conj(parts: list[Formula]) -> Formula:
    return reduce(And, parts)


def _exclusivity_rule(granularity: str, index: int, universe: int, kind: str) -> Rule:
    me = Pred(LabelRef(granularity, index), VAR)
    siblings = [Pred(LabelRef(granularity, j), VAR) for j in range(universe) if j != index]
    if not siblings:
        return Rule(ForAll(VAR, Implies(me, me)), kind=kind, trivial=True)
    body = _conj([Not(s) for s in siblings])
    return Rule(ForAll(VAR, Implies(me, body)), kind=kind)


def gen_ecl_rules(ls: LabelSpace, scope: str = "seen") -> RuleSet:
    """Rules tying each composition to its parts, plus pairwise exclusivity
    over verbs and over objects. Deterministic order: compositions (two
    rules each), then verbs, then objects."""
    if scope not in ("seen", "all"):
        raise ValidationError(f"unknown composition scope {scope!r}")
    comp_ids = ls.seen_ids() if scope == "seen" else ls.composition_ids()
    rules: list[Rule] = []
    for cid in comp_ids:
        comp = ls.compositions[cid]
        c = Pred(LabelRef("composition", cid), VAR)
        rules.append(
            Rule(ForAll(VAR, Implies(c, Pred(LabelRef("verb", comp.verb), VAR))), kind="comp_verb")
        )
        rules.append(
            Rule(ForAll(VAR, Implies(c, Pred(LabelRef("object", comp.object), VAR))), kind="comp_object")
        )
    for v in range(len(ls.verbs)):
        rules.append(_exclusivity_rule("verb", v, len(ls.verbs), "verb_excl"))
    for o in range(len(ls.objects)):
        rules.append(_exclusivity_rule("object", o, len(ls.objects), "object_excl"))
    return RuleSet(rules=tuple(rules), provenance="ecl")


def gen_hpl_rules(ls: LabelSpace, h: Hierarchy) -> RuleSet:
    """Rules tying each fine category to its coarse parent, plus pairwise
    exclusivity over each coarse level. Deterministic order: verbs,
    objects, coarse verbs, coarse objects."""
    if len(h.verb_parent) != len(ls.verbs) or len(h.object_parent) != len(ls.objects):
        raise ValidationError("hierarchy does not cover the label space")
    rules: list[Rule] = []
    for v in range(len(ls.verbs)):
        rules.append(
            Rule(
                ForAll(
                    VAR,
                    Implies(
                        Pred(LabelRef("verb", v), VAR),
                        Pred(LabelRef("coarse_verb", h.verb_parent[v]), VAR),
                    ),
                ),
                kind="verb_parent",
            )
        )
    for o in range(len(ls.objects)):
        rules.append(
            Rule(
                ForAll(
                    VAR,
                    Implies(
                        Pred(LabelRef("object", o), VAR),
                        Pred(LabelRef("coarse_object", h.object_parent[o]), VAR),
                    ),
                ),
                kind="object_parent",
            )
        )
    for cv in range(len(h.coarse_verbs)):
        rules.append(_exclusivity_rule("coarse_verb", cv, len(h.coarse_verbs), "coarse_verb_excl"))
    for co in range(len(h.coarse_objects)):
        rules.append(_exclusivity_rule("coarse_object", co, len(h.coarse_objects), "coarse_object_excl"))
    return RuleSet(rules=tuple(rules), provenance="hpl")
