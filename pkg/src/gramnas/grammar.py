"""Parser for the human-readable production-rule format driving the search.

A grammar file holds rules of the form::

    <name> ::= token token | token ...

where each token is a nonterminal reference ``<other>``, a terminal
attribute ``key:value``, or a numeric parameter ``[name,type,count,min,max]``
with type ``int`` or ``float``. Lines without ``::=`` continue the previous
rule; ``#`` lines are comments. Grammars are immutable once parsed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union


class GrammarError(ValueError):
    """Raised for malformed grammar text or unresolvable rules."""


INTEGER = "integer"
REAL = "real"
_KIND_BY_TYPENAME = {"int": INTEGER, "float": REAL}
_TYPENAME_BY_KIND = {v: k for k, v in _KIND_BY_TYPENAME.items()}


@dataclass(frozen=True)
class ParameterSpec:
    """Numeric search variable: `count` values drawn uniformly from [min, max]."""

    name: str
    kind: str
    count: int
    minimum: float
    maximum: float

    def __post_init__(self):
        if not self.name:
            raise GrammarError("parameter name must be nonempty")
        if self.kind not in (INTEGER, REAL):
            raise GrammarError(f"parameter kind must be integer or real, got {self.kind!r}")
        if self.count < 1:
            raise GrammarError(f"parameter {self.name!r}: count must be >= 1, got {self.count}")
        if self.minimum > self.maximum:
            raise GrammarError(
                f"parameter {self.name!r}: min {self.minimum} exceeds max {self.maximum}"
            )


@dataclass(frozen=True)
class NonterminalRef:
    name: str


@dataclass(frozen=True)
class TerminalAttribute:
    key: str
    value: str


@dataclass(frozen=True)
class Parameter:
    spec: ParameterSpec


Symbol = Union[NonterminalRef, TerminalAttribute, Parameter]
Alternative = tuple


@dataclass(frozen=True)
class Grammar:
    """Ordered map of rule name -> alternatives (each a tuple of symbols)."""

    rules: dict = field(default_factory=dict)

    def alternatives(self, name: str) -> tuple:
        try:
            return self.rules[name]
        except KeyError:
            raise GrammarError(f"grammar has no rule <{name}>") from None

    def __contains__(self, name: str) -> bool:
        return name in self.rules


def _parse_number(text: str, kind: str, where: str):
    try:
        value = float(text)
    except ValueError:
        raise GrammarError(f"{where}: {text!r} is not a number") from None
    if kind == INTEGER:
        if value != int(value):
            raise GrammarError(f"{where}: {text!r} is not an integer")
        return int(value)
    return value


def _parse_token(token: str, line_no: int) -> Symbol:
    where = f"line {line_no}"
    if token.startswith("<"):
        if not token.endswith(">") or len(token) < 3:
            raise GrammarError(f"{where}: malformed nonterminal reference {token!r}")
        return NonterminalRef(token[1:-1])
    if token.startswith("["):
        if not token.endswith("]"):
            raise GrammarError(f"{where}: unclosed '[' in parameter {token!r}")
        parts = token[1:-1].split(",")
        if len(parts) != 5:
            raise GrammarError(
                f"{where}: parameter {token!r} must have 5 comma-separated fields"
            )
        name, typename, count_s, min_s, max_s = (p.strip() for p in parts)
        kind = _KIND_BY_TYPENAME.get(typename)
        if kind is None:
            raise GrammarError(f"{where}: unknown parameter type {typename!r}")
        try:
            spec = ParameterSpec(
                name=name,
                kind=kind,
                count=_parse_number(count_s, INTEGER, where),
                minimum=_parse_number(min_s, kind, where),
                maximum=_parse_number(max_s, kind, where),
            )
        except GrammarError as exc:
            raise GrammarError(f"{where}: {exc}") from None
        return Parameter(spec)
    if ":" in token:
        key, _, value = token.partition(":")
        if not key:
            raise GrammarError(f"{where}: attribute {token!r} has an empty key")
        return TerminalAttribute(key, value)
    raise GrammarError(f"{where}: unrecognised token {token!r}")


def _split_alternatives(chunks: Iterable, rule: str) -> tuple:
    """chunks: (line_no, text) pieces of one rule body, in source order."""
    alternatives = [[]]
    for line_no, text in chunks:
        for i, piece in enumerate(text.split("|")):
            if i > 0:
                alternatives.append([])
            alternatives[-1].extend(_parse_token(token, line_no) for token in piece.split())
    for symbols in alternatives:
        if not symbols:
            raise GrammarError(f"rule <{rule}> has an empty alternative")
    return tuple(tuple(symbols) for symbols in alternatives)


def parse_grammar(text: str) -> Grammar:
    """Parse grammar source text into an immutable rule table.

    Raises GrammarError (with the offending line number where possible) on
    malformed tokens, duplicate rules, or nonterminal references that no
    rule defines.
    """
    if not text.strip():
        raise GrammarError("grammar text is empty")
    # Group the source into rules, keeping line numbers for diagnostics.
    rule_chunks: dict = {}
    order: list = []
    current_rule = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "::=" in line:
            head, _, body = line.partition("::=")
            head = head.strip()
            if not (head.startswith("<") and head.endswith(">") and len(head) > 2):
                raise GrammarError(f"line {line_no}: rule head {head!r} must look like <name>")
            name = head[1:-1]
            if name in rule_chunks:
                raise GrammarError(f"line {line_no}: duplicate rule <{name}>")
            rule_chunks[name] = [(line_no, body)]
            order.append(name)
            current_rule = name
        else:
            if current_rule is None:
                raise GrammarError(f"line {line_no}: content before the first rule")
            rule_chunks[current_rule].append((line_no, line))

    rules = {name: _split_alternatives(rule_chunks[name], name) for name in order}

    for name, alternatives in rules.items():
        for alternative in alternatives:
            for symbol in alternative:
                if isinstance(symbol, NonterminalRef) and symbol.name not in rules:
                    raise GrammarError(
                        f"rule <{name}> references undefined nonterminal <{symbol.name}>"
                    )
    return Grammar(rules=rules)


def load_grammar(path) -> Grammar:
    return parse_grammar(Path(path).read_text(encoding="utf-8"))


def _render_number(value, kind: str) -> str:
    if kind == INTEGER:
        return str(int(value))
    return repr(float(value))


def render_symbol(symbol: Symbol) -> str:
    if isinstance(symbol, NonterminalRef):
        return f"<{symbol.name}>"
    if isinstance(symbol, TerminalAttribute):
        return f"{symbol.key}:{symbol.value}"
    spec = symbol.spec
    return "[{},{},{},{},{}]".format(
        spec.name,
        _TYPENAME_BY_KIND[spec.kind],
        spec.count,
        _render_number(spec.minimum, spec.kind),
        _render_number(spec.maximum, spec.kind),
    )


def render_grammar(grammar: Grammar) -> str:
    """Render a Grammar back to parseable source (round-trips structurally)."""
    lines = []
    for name, alternatives in grammar.rules.items():
        rendered = " | ".join(" ".join(render_symbol(s) for s in alt) for alt in alternatives)
        lines.append(f"<{name}> ::= {rendered}")
    return "\n".join(lines) + "\n"


def validate(grammar: Grammar, structure) -> list:
    """Cross-check a grammar against an outer structure.

    Returns a list of human-readable diagnostics; empty means every start
    symbol exists and every nonterminal reference resolves.
    """
    diagnostics = []
    for module_index, module in enumerate(structure.modules):
        for start in module.start_symbols:
            if start not in grammar:
                diagnostics.append(
                    f"structure module {module_index}: start symbol <{start}> "
                    "is not defined by the grammar"
                )
    for name, alternatives in grammar.rules.items():
        for alt_index, alternative in enumerate(alternatives):
            for symbol in alternative:
                if isinstance(symbol, NonterminalRef) and symbol.name not in grammar:
                    diagnostics.append(
                        f"rule <{name}> alternative {alt_index} references "
                        f"undefined nonterminal <{symbol.name}>"
                    )
    return diagnostics
