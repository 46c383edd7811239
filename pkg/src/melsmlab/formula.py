"""Parser and design-matrix builder for the lme4-style model mini-language.

The accepted grammar is deliberately small::

    formula     := response "~" term ("+" term)*
    response    := IDENT | "log" "(" IDENT ")"
    term        := "1" | fixed | random
    fixed       := IDENT | IDENT "(" IDENT ")"          # transform call
    random      := "(" re_part "|" group ")"
    re_part     := "1" ("+" IDENT)* | IDENT ("+" IDENT)*
    group       := IDENT | "gr" "(" IDENT "," "dist" "=" STRING ")"

The only admitted transform is ``sin``; the only admitted random-effect
distributions are ``gaussian`` and ``student``.  Interactions, nested
grouping and intercept suppression are rejected with explicit errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset

TRANSFORMS = ("identity", "sin")
RE_FAMILIES = ("gaussian", "student")
GROUP_ALIASES = ("id", "subject_id")


class FormulaError(ValueError):
    """Syntax or semantic error in a model formula.

    Carries the byte offset of the offending token and, for pure syntax
    errors, the set of token kinds that would have been accepted.
    """

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f" at offset {offset}"
        if expected:
            detail += " (expected " + " or ".join(expected) + ")"
        super().__init__(message + detail)


class DesignError(ValueError):
    """Formula does not fit the dataset it is being applied to."""


@dataclass(frozen=True)
class Term:
    covariate: str
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise FormulaError(f"unknown transform '{self.transform}'", 0)

    @property
    def column_name(self) -> str:
        if self.transform == "identity":
            return self.covariate
        return f"{self.transform}({self.covariate})"


@dataclass(frozen=True)
class RandomTerm:
    group: str
    intercept: bool = True
    slope_covariates: tuple[str, ...] = ()
    re_family: str = "gaussian"

    def __post_init__(self):
        if self.re_family not in RE_FAMILIES:
            raise FormulaError(f"unknown random-effect family '{self.re_family}'", 0)


@dataclass(frozen=True)
class FormulaAst:
    response: str
    fixed_terms: tuple[Term, ...] = ()
    random_terms: tuple[RandomTerm, ...] = ()
    intercept: bool = True

    @property
    def is_scale(self) -> bool:
        return self.response == "log(omega)"

    @property
    def n_fixed_columns(self) -> int:
        return int(self.intercept) + len(self.fixed_terms)

    @property
    def n_random_columns(self) -> int:
        return sum(int(t.intercept) + len(t.slope_covariates) for t in self.random_terms)


@dataclass
class DesignMatrices:
    """Fixed-effect matrix plus stacked per-subject random-effect blocks."""

    x: np.ndarray
    x_names: list[str]
    z: np.ndarray
    z_names: list[str]
    subject_index: np.ndarray
    n_subjects: int

    @property
    def column_names(self) -> list[str]:
        return self.x_names + self.z_names

    def z_block(self, i: int) -> np.ndarray:
        return self.z[self.subject_index == i]


# --- tokenizer -------------------------------------------------------------

_QUOTES = "'`‘’"
_REJECTED_CHARS = {
    ":": "interaction terms are not supported",
    "*": "interaction terms are not supported",
    "/": "nested grouping is not supported",
    "-": "intercept suppression is not supported",
}


@dataclass(frozen=True)
class _Token:
    kind: str
    value: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "~+()|,=":
            tokens.append(_Token(c, c, i))
            i += 1
            continue
        if c in _QUOTES:
            j = i + 1
            while j < n and text[j] not in _QUOTES:
                j += 1
            if j >= n:
                raise FormulaError("unterminated quoted string", i, ("closing quote",))
            tokens.append(_Token("STRING", text[i + 1 : j], i))
            i = j + 1
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("IDENT", text[i:j], i))
            i = j
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(_Token("NUMBER", text[i:j], i))
            i = j
            continue
        if c in _REJECTED_CHARS:
            raise FormulaError(_REJECTED_CHARS[c], i)
        raise FormulaError(f"unexpected character {c!r}", i, ("identifier", "'1'", "'('"))
    tokens.append(_Token("EOF", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise FormulaError(
                f"unexpected token {tok.value!r}" if tok.kind != "EOF" else "unexpected end of formula",
                tok.offset,
                (kind,),
            )
        return self.advance()

    @staticmethod
    def check_number(tok: _Token) -> None:
        if tok.value == "0":
            raise FormulaError("intercept suppression is not supported", tok.offset)
        if tok.value != "1":
            raise FormulaError(f"unexpected number {tok.value!r}", tok.offset, ("'1'",))

    # response := IDENT | log "(" IDENT ")"
    def parse_response(self) -> str:
        tok = self.expect("IDENT")
        if tok.value == "log":
            self.expect("(")
            inner = self.expect("IDENT")
            self.expect(")")
            return f"log({inner.value})"
        return tok.value

    def parse(self) -> FormulaAst:
        response = self.parse_response()
        self.expect("~")
        fixed: list[Term] = []
        random: list[RandomTerm] = []
        saw_one = False
        while True:
            tok = self.peek()
            if tok.kind == "NUMBER":
                self.check_number(tok)
                if saw_one:
                    raise FormulaError("duplicate intercept marker '1'", tok.offset)
                saw_one = True
                self.advance()
            elif tok.kind == "(":
                random.append(self.parse_random_term())
            elif tok.kind == "IDENT":
                fixed.append(self.parse_fixed_term())
            else:
                raise FormulaError(
                    "expected a model term",
                    tok.offset,
                    ("identifier", "'1'", "'('"),
                )
            nxt = self.peek()
            if nxt.kind == "+":
                self.advance()
                continue
            if nxt.kind == "EOF":
                break
            raise FormulaError(f"unexpected token {nxt.value!r}", nxt.offset, ("'+'", "end of formula"))
        return FormulaAst(
            response=response,
            fixed_terms=tuple(fixed),
            random_terms=tuple(random),
            intercept=True,
        )

    # fixed := IDENT | IDENT "(" IDENT ")"
    def parse_fixed_term(self) -> Term:
        name = self.expect("IDENT")
        if self.peek().kind == "(":
            if name.value not in TRANSFORMS or name.value == "identity":
                raise FormulaError(f"unknown transform '{name.value}'", name.offset, ("sin",))
            self.advance()
            arg = self.expect("IDENT")
            self.expect(")")
            return Term(covariate=arg.value, transform=name.value)
        return Term(covariate=name.value)

    # random := "(" re_part "|" group ")"
    def parse_random_term(self) -> RandomTerm:
        self.expect("(")
        intercept = False
        slopes: list[str] = []
        first = self.peek()
        if first.kind == "NUMBER":
            self.check_number(first)
            intercept = True
            self.advance()
        elif first.kind == "IDENT":
            # lme4 semantics: a bare slope still carries the implicit intercept
            intercept = True
            slopes.append(self.advance().value)
        else:
            raise FormulaError("expected random-effect terms", first.offset, ("'1'", "identifier"))
        while self.peek().kind == "+":
            self.advance()
            slopes.append(self.expect("IDENT").value)
        self.expect("|")
        group, family = self.parse_group()
        self.expect(")")
        return RandomTerm(
            group=group,
            intercept=intercept,
            slope_covariates=tuple(slopes),
            re_family=family,
        )

    # group := IDENT | gr "(" IDENT "," dist "=" STRING ")"
    def parse_group(self) -> tuple[str, str]:
        name = self.expect("IDENT")
        if name.value != "gr":
            return name.value, "gaussian"
        self.expect("(")
        group = self.expect("IDENT")
        self.expect(",")
        key = self.expect("IDENT")
        if key.value != "dist":
            raise FormulaError(f"unknown gr() argument '{key.value}'", key.offset, ("dist",))
        self.expect("=")
        dist = self.expect("STRING")
        if dist.value not in RE_FAMILIES:
            raise FormulaError(f"unknown distribution '{dist.value}' inside gr()", dist.offset)
        self.expect(")")
        return group.value, dist.value


def parse_formula(text: str) -> FormulaAst:
    """Parse a location (``y ~ ...``) or scale (``log(omega) ~ ...``) formula."""
    if not text or not text.strip():
        raise FormulaError("empty formula", 0, ("identifier",))
    return _Parser(text).parse()


def pretty(ast: FormulaAst) -> str:
    """Canonical single-line rendering; reparses to an equal AST."""
    parts: list[str] = [t.column_name for t in ast.fixed_terms]
    if not parts and not ast.random_terms:
        parts = ["1"]
    for rt in ast.random_terms:
        inner = " + ".join(["1"] + list(rt.slope_covariates))
        if rt.re_family == "gaussian":
            grp = rt.group
        else:
            grp = f"gr({rt.group}, dist='{rt.re_family}')"
        parts.append(f"({inner} | {grp})")
    return f"{ast.response} ~ " + " + ".join(parts)


# --- design matrices -------------------------------------------------------


def _column_values(term: Term, data: LongitudinalDataset) -> np.ndarray:
    if term.covariate not in data.covariates:
        raise DesignError(f"unknown covariate '{term.covariate}'")
    raw = data.covariates[term.covariate]
    if term.transform == "identity":
        return raw.astype(float, copy=True)
    if not data.is_time_varying(term.covariate):
        raise DesignError(
            f"transform '{term.transform}' requires a time-varying covariate; "
            f"'{term.covariate}' is constant within every subject"
        )
    return np.sin(raw)


def build_design(ast: FormulaAst, data: LongitudinalDataset) -> DesignMatrices:
    """Translate an AST plus a dataset into dense fixed/random design matrices."""
    n = data.n_rows
    cols: list[np.ndarray] = []
    names: list[str] = []
    if ast.intercept:
        cols.append(np.ones(n))
        names.append("intercept")
    for term in ast.fixed_terms:
        cols.append(_column_values(term, data))
        names.append(term.column_name)
    x = np.column_stack(cols) if cols else np.empty((n, 0))

    if len(ast.random_terms) > 1:
        raise DesignError("multiple random-effect terms per formula are not supported")
    z_cols: list[np.ndarray] = []
    z_names: list[str] = []
    if ast.random_terms:
        rt = ast.random_terms[0]
        if rt.group not in GROUP_ALIASES:
            raise DesignError(
                f"random-effect group '{rt.group}' must name the subject-id column "
                f"(one of {', '.join(GROUP_ALIASES)})"
            )
        if rt.intercept:
            z_cols.append(np.ones(n))
            z_names.append("intercept")
        for cov in rt.slope_covariates:
            z_cols.append(_column_values(Term(covariate=cov), data))
            z_names.append(cov)
    z = np.column_stack(z_cols) if z_cols else np.empty((n, 0))

    return DesignMatrices(
        x=x,
        x_names=names,
        z=z,
        z_names=z_names,
        subject_index=data.subject_index,
        n_subjects=data.n_subjects,
    )
