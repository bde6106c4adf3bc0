"""Rule DSL: boolean antecedents over proposition ids with an atomic consequent.

Grammar (EBNF)::

    rule     = expr "=>" IDENT [ "[" "w" "=" NUMBER "]" ] ;
    expr     = term { "OR" term } ;
    term     = factor { "AND" factor } ;
    factor   = "NOT" factor | "(" expr ")" | IDENT ;
    IDENT    = ( letter | "_" ) { letter | digit | "_" } ;   (* ASCII only *)
    NUMBER   = digit { digit } [ "." { digit } ] | "." digit { digit } ;

Keywords are upper-case and reserved. Binary connectives are left-associative
with precedence NOT > AND > OR.
"""

from __future__ import annotations

import re
from decimal import Decimal
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

__all__ = [
    "Atom",
    "Not",
    "And",
    "Or",
    "RuleExpr",
    "Rule",
    "RuleSyntaxError",
    "RuleFileError",
    "parse_expr",
    "parse_rule",
    "parse_rule_file",
    "parse_rule_lines",
    "render",
    "render_rule",
    "atoms",
    "negated_atoms",
]


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "RuleExpr"


@dataclass(frozen=True)
class And:
    left: "RuleExpr"
    right: "RuleExpr"


@dataclass(frozen=True)
class Or:
    left: "RuleExpr"
    right: "RuleExpr"


RuleExpr = Union[Atom, Not, And, Or]


@dataclass(frozen=True)
class Rule:
    antecedent: RuleExpr
    consequent: str
    weight: float = 1.0
    source: str = ""
    id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"rule weight {self.weight} outside [0, 1]")


class RuleSyntaxError(ValueError):
    """Located parse failure.

    ``offset`` is a byte offset into the UTF-8 encoded input; ``expected``
    is the set of token kinds that would have been accepted there.
    """

    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset(), line: int | None = None):
        self.reason = message
        self.offset = offset
        self.expected = expected
        self.line = line
        where = f"line {line}, " if line is not None else ""
        exp = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{where}offset {offset}: {message}{exp}")


class RuleFileError(ValueError):
    def __init__(self, errors: list[RuleSyntaxError]):
        self.errors = errors
        super().__init__("\n".join(str(e) for e in errors))


KEYWORDS = {"AND", "OR", "NOT"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<arrow>=>)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<lbrack>\[)
  | (?P<rbrack>\])
  | (?P<eq>=)
  | (?P<number>\d+(?:\.\d*)?|\.\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    offset: int


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "ident" and value in KEYWORDS:
                kind = value
            toks.append(_Tok(kind, value, _byte_offset(text, pos)))
        pos = m.end()
    toks.append(_Tok("end", "", len(text.encode("utf-8"))))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def take(self, *kinds: str) -> _Tok:
        tok = self.cur
        if tok.kind not in kinds:
            shown = "end of input" if tok.kind == "end" else repr(tok.text)
            raise RuleSyntaxError(f"unexpected {shown}", tok.offset, frozenset(kinds))
        self.i += 1
        return tok

    def expr(self) -> RuleExpr:
        node = self.term()
        while self.cur.kind == "OR":
            self.i += 1
            node = Or(node, self.term())
        return node

    def term(self) -> RuleExpr:
        node = self.factor()
        while self.cur.kind == "AND":
            self.i += 1
            node = And(node, self.factor())
        return node

    def factor(self) -> RuleExpr:
        tok = self.take("NOT", "lparen", "ident")
        if tok.kind == "NOT":
            return Not(self.factor())
        if tok.kind == "lparen":
            node = self.expr()
            self.take("rparen")
            return node
        return Atom(tok.text)

    def rule(self) -> Rule:
        antecedent = self.expr()
        if self.cur.kind not in ("arrow",):
            # an antecedent may legally continue with AND/OR, so report those too
            self.take("arrow", "AND", "OR")
        self.i += 1
        consequent = self.take("ident").text
        weight = 1.0
        if self.cur.kind == "lbrack":
            self.i += 1
            key = self.take("ident")
            if key.text != "w":
                raise RuleSyntaxError(f"unknown rule option {key.text!r}", key.offset, frozenset({"w"}))
            self.take("eq")
            num = self.take("number")
            weight = float(num.text)
            self.take("rbrack")
            if not 0.0 <= weight <= 1.0:
                raise RuleSyntaxError(f"weight {num.text} outside [0, 1]", num.offset)
        self.take("end")
        return Rule(antecedent, consequent, weight)


def parse_expr(text: str) -> RuleExpr:
    p = _Parser(text)
    node = p.expr()
    p.take("end")
    return node


def parse_rule(text: str, *, source: str = "", id: str = "") -> Rule:
    """Parse one rule such as ``"NOT a AND b OR c => d [w=0.9]"``."""
    rule = _Parser(text).rule()
    return Rule(rule.antecedent, rule.consequent, rule.weight, source=source, id=id)


def parse_rule_lines(lines, origin: str = "<rules>") -> list[Rule]:
    rules: list[Rule] = []
    errors: list[RuleSyntaxError] = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            rules.append(parse_rule(text, source=f"{origin}:{lineno}", id=f"r{lineno}"))
        except RuleSyntaxError as exc:
            errors.append(RuleSyntaxError(exc.reason, exc.offset, exc.expected, line=lineno))
    if errors:
        raise RuleFileError(errors)
    return rules


def parse_rule_file(path) -> list[Rule]:
    """One rule per line, ``#`` comments. All syntax errors are reported together."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_rule_lines(fh.read().splitlines(), origin=path.name)


_PREC = {Or: 1, And: 2, Not: 3, Atom: 4}


def render(expr: RuleExpr, _parent: int = 0) -> str:
    """Minimal-parenthesis rendering; ``parse_expr(render(e)) == e``."""
    if isinstance(expr, Atom):
        return expr.name
    prec = _PREC[type(expr)]
    if isinstance(expr, Not):
        out = "NOT " + render(expr.operand, prec)
    else:
        op = " AND " if isinstance(expr, And) else " OR "
        # right operand of the same precedence needs parens to preserve left-associativity
        out = render(expr.left, prec) + op + render(expr.right, prec + 1)
    return f"({out})" if prec < _parent else out


def _format_weight(w: float) -> str:
    text = repr(float(w))
    if "e" in text:
        text = format(Decimal(text), "f")
    return text


def render_rule(rule: Rule) -> str:
    text = f"{render(rule.antecedent)} => {rule.consequent}"
    if rule.weight != 1.0:
        text += f" [w={_format_weight(rule.weight)}]"
    return text


def _walk(expr: RuleExpr, negated: bool = False) -> Iterator[tuple[str, bool]]:
    if isinstance(expr, Atom):
        yield expr.name, negated
    elif isinstance(expr, Not):
        yield from _walk(expr.operand, True)
    else:
        yield from _walk(expr.left, negated)
        yield from _walk(expr.right, negated)


def atoms(expr: RuleExpr) -> set[str]:
    return {name for name, _ in _walk(expr)}


def negated_atoms(expr: RuleExpr) -> set[str]:
    """Atoms appearing anywhere under a NOT."""
    return {name for name, neg in _walk(expr) if neg}
