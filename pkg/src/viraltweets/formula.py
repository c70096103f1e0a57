"""Tiny model formula grammar: ``response ~ term (+ term)*`` with ``term = name | name^2``."""

from __future__ import annotations

import re

from .regress import ModelSpec, RegressionError, Term

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.:]*)|(?P<op>\^2|[~+]))")


class FormulaError(RegressionError):
    def __init__(self, text: str, pos: int, message: str):
        self.text, self.pos = text, pos
        super().__init__(f"{message} at position {pos}\n  {text}\n  {' ' * pos}^")


def _tokens(text: str):
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = len(text) - len(text[pos:].lstrip())
            raise FormulaError(text, start, "unexpected character")
        kind = "name" if m.group("name") else m.group("op")
        yield kind, m.group(kind if kind == "name" else "op"), m.start(kind if kind == "name" else "op")
        pos = m.end()
    yield "end", "", len(text)


def parse_formula(text: str, family: str = "poisson") -> ModelSpec:
    """
    Parse ``"y ~ a + a^2"`` into a :class:`ModelSpec`.

    Names are not checked against any frame here; that happens when the
    design matrix is built.
    """
    toks = list(_tokens(text))
    i = 0

    def expect(kind, what):
        nonlocal i
        k, val, pos = toks[i]
        if k != kind:
            raise FormulaError(text, pos, f"expected {what}")
        i += 1
        return val, pos

    response, _ = expect("name", "response name")
    expect("~", "'~'")
    terms: list[Term] = []
    labels: dict[str, int] = {}
    while True:
        name, pos = expect("name", "term name")
        squared = toks[i][0] == "^2"
        if squared:
            i += 1
        term = Term(name, squared)
        if term.label in labels:
            raise FormulaError(text, pos, f"duplicate term {term.label!r}")
        if name == response:
            raise FormulaError(text, pos, "response used as a term")
        labels[term.label] = pos
        terms.append(term)
        k, _, pos = toks[i]
        if k == "end":
            break
        if k != "+":
            raise FormulaError(text, pos, "expected '+' or end of formula")
        i += 1
    return ModelSpec(response=response, terms=tuple(terms), family=family)
