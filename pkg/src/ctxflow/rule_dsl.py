"""WHEN/THEN rule language: parser, AST, evaluator, printer.

Grammar (newlines inside the condition are plain whitespace; the rule
name runs from RULE to the end of its line or to the WHEN keyword):

    rule    := "RULE" name "WHEN" cond "THEN" action "END"
    cond    := conj ("OR" conj)*
    conj    := atom ("AND" atom)*
    atom    := "NOT" atom | "(" cond ")" | operand cmp operand
               | "fresh" "(" ident "," integer ")"
    cmp     := "<" | "<=" | ">" | ">=" | "==" | "!="
    operand := ident | number | string
    action  := "continue" | "selectVariant" "(" ident "," ident ")"
               | "break" | "rollback" "(" ("start" | ident) ")"
               | "start" dotted-name

``pretty_print`` emits canonical text that reparses to an equal rule.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import MissingContext, RuleSyntaxError, RuleTypeError

# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Comparison:
    left: object
    op: str
    right: object


@dataclass(frozen=True)
class And:
    terms: tuple


@dataclass(frozen=True)
class Or:
    terms: tuple


@dataclass(frozen=True)
class Not:
    term: object


@dataclass(frozen=True)
class Fresh:
    category: str
    max_age: int


@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class SelectVariant:
    gate_id: str
    variant_id: str


@dataclass(frozen=True)
class BreakRollback:
    # None means a bare break: reset to the gate under evaluation
    target: str | None


@dataclass(frozen=True)
class StartCompensation:
    process_ref: str


@dataclass(frozen=True)
class Rule:
    rule_id: str
    name: str
    condition: object
    action: object
    referenced_categories: tuple[str, ...]
    required_freshness: dict = field(default_factory=dict, compare=False)


# --- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<op><=|>=|==|!=|<|>)
  | (?P<punct>[(),.])
""", re.VERBOSE)

_KEYWORDS = {
    "RULE", "WHEN", "THEN", "END", "AND", "OR", "NOT", "fresh",
    "continue", "selectVariant", "break", "rollback", "start",
}


@dataclass(frozen=True)
class _Token:
    kind: str  # number | ident | string | op | punct | eof
    text: str
    pos: int


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    last_nl = text.rfind("\n", 0, pos)
    return line, pos - last_nl


def _tokenize(text: str, start: int) -> list[_Token]:
    tokens = []
    pos = start
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            line, col = _line_col(text, pos)
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        pos = match.end()
        kind = match.lastgroup
        if kind == "ws":
            continue
        tokens.append(_Token(kind, match.group(), match.start()))
    tokens.append(_Token("eof", "", len(text)))
    return tokens


# --- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, tokens: list[_Token]):
        self.text = text
        self.tokens = tokens
        self.index = 0

    def peek(self) -> _Token:
        return self.tokens[self.index]

    def next(self) -> _Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def fail(self, message: str, token: _Token | None = None):
        token = token or self.peek()
        line, col = _line_col(self.text, token.pos)
        raise RuleSyntaxError(message, line, col)

    def expect_word(self, word: str) -> _Token:
        token = self.peek()
        if token.kind == "ident" and token.text == word:
            return self.next()
        self.fail(f"expected {word!r}, found {token.text or 'end of input'!r}")

    def expect_punct(self, char: str) -> _Token:
        token = self.peek()
        if token.kind == "punct" and token.text == char:
            return self.next()
        self.fail(f"expected {char!r}, found {token.text or 'end of input'!r}")

    def at_word(self, word: str) -> bool:
        token = self.peek()
        return token.kind == "ident" and token.text == word

    # cond := conj ("OR" conj)*
    def parse_cond(self):
        terms = [self.parse_conj()]
        while self.at_word("OR"):
            self.next()
            terms.append(self.parse_conj())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def parse_conj(self):
        terms = [self.parse_atom()]
        while self.at_word("AND"):
            self.next()
            terms.append(self.parse_atom())
        return terms[0] if len(terms) == 1 else And(tuple(terms))

    def parse_atom(self):
        token = self.peek()
        if self.at_word("NOT"):
            self.next()
            return Not(self.parse_atom())
        if token.kind == "punct" and token.text == "(":
            self.next()
            inner = self.parse_cond()
            self.expect_punct(")")
            return inner
        if self.at_word("fresh"):
            self.next()
            self.expect_punct("(")
            name = self.parse_plain_ident("category name")
            self.expect_punct(",")
            age_token = self.peek()
            if age_token.kind != "number" or "." in age_token.text or age_token.text.startswith("-"):
                self.fail("fresh() takes a non-negative integer age")
            self.next()
            self.expect_punct(")")
            return Fresh(name, int(age_token.text))
        left = self.parse_operand()
        op_token = self.peek()
        if op_token.kind != "op":
            self.fail(f"expected a comparison operator, found {op_token.text or 'end of input'!r}")
        self.next()
        right = self.parse_operand()
        return self.typed_comparison(left, op_token.text, right, op_token)

    def typed_comparison(self, left, op, right, token) -> Comparison:
        def literal_kind(operand):
            if isinstance(operand, Num):
                return "numeric"
            if isinstance(operand, Str):
                return "text"
            return None

        lk, rk = literal_kind(left), literal_kind(right)
        if lk and rk and lk != rk:
            line, col = _line_col(self.text, token.pos)
            raise RuleTypeError(
                f"cannot compare {lk} with {rk} (line {line}, column {col})"
            )
        if op not in ("==", "!=") and "text" in (lk, rk):
            line, col = _line_col(self.text, token.pos)
            raise RuleTypeError(
                f"text operands only support equality, not {op!r} (line {line}, column {col})"
            )
        return Comparison(left, op, right)

    def parse_operand(self):
        token = self.peek()
        if token.kind == "number":
            self.next()
            if "." in token.text:
                return Num(float(token.text))
            return Num(int(token.text))
        if token.kind == "string":
            self.next()
            return Str(_unquote(token.text))
        if token.kind == "ident":
            if token.text in _KEYWORDS:
                self.fail(f"keyword {token.text!r} cannot be used as an operand")
            self.next()
            return Ref(token.text)
        self.fail(f"expected an operand, found {token.text or 'end of input'!r}")

    def parse_plain_ident(self, what: str) -> str:
        token = self.peek()
        if token.kind != "ident" or token.text in _KEYWORDS - {"start"}:
            self.fail(f"expected {what}, found {token.text or 'end of input'!r}")
        self.next()
        return token.text

    def parse_action(self):
        if self.at_word("continue"):
            self.next()
            return Continue()
        if self.at_word("break"):
            self.next()
            return BreakRollback(None)
        if self.at_word("selectVariant"):
            self.next()
            self.expect_punct("(")
            gate = self.parse_plain_ident("gate id")
            self.expect_punct(",")
            variant = self.parse_plain_ident("variant id")
            self.expect_punct(")")
            return SelectVariant(gate, variant)
        if self.at_word("rollback"):
            self.next()
            self.expect_punct("(")
            target = self.parse_plain_ident("rollback target")
            self.expect_punct(")")
            return BreakRollback(target)
        if self.at_word("start"):
            self.next()
            parts = [self.parse_plain_ident("process reference")]
            while self.peek().kind == "punct" and self.peek().text == ".":
                self.next()
                parts.append(self.parse_plain_ident("process reference"))
            return StartCompensation(".".join(parts))
        self.fail(f"expected an action, found {self.peek().text or 'end of input'!r}")


def _unquote(raw: str) -> str:
    body = raw[1:-1]
    return body.replace('\\"', '"').replace("\\\\", "\\")


def _quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


_NAME_STOP = re.compile(r"\bWHEN\b|\n")


def parse_rule(text: str, rule_id: str | None = None) -> Rule:
    """Parse one rule statement; raises RuleSyntaxError / RuleTypeError."""
    head = re.match(r"\s*RULE[ \t]+", text)
    if head is None:
        line, col = _line_col(text, len(text) - len(text.lstrip()))
        raise RuleSyntaxError("rule must begin with RULE", line, col)
    stop = _NAME_STOP.search(text, head.end())
    name_end = stop.start() if stop else len(text)
    name = text[head.end():name_end].strip()
    if not name:
        line, col = _line_col(text, head.end())
        raise RuleSyntaxError("rule name is empty", line, col)
    parser = _Parser(text, _tokenize(text, name_end))
    parser.expect_word("WHEN")
    condition = parser.parse_cond()
    parser.expect_word("THEN")
    action = parser.parse_action()
    parser.expect_word("END")
    if parser.peek().kind != "eof":
        parser.fail(f"unexpected trailing input {parser.peek().text!r}")
    return Rule(
        rule_id=rule_id if rule_id is not None else name,
        name=name,
        condition=condition,
        action=action,
        referenced_categories=referenced_categories(condition),
    )


def referenced_categories(condition) -> tuple[str, ...]:
    """Sorted, de-duplicated context references appearing in a condition."""
    found: set[str] = set()

    def walk(node):
        if isinstance(node, (And, Or)):
            for term in node.terms:
                walk(term)
        elif isinstance(node, Not):
            walk(node.term)
        elif isinstance(node, Comparison):
            for operand in (node.left, node.right):
                if isinstance(operand, Ref):
                    found.add(operand.name)
        elif isinstance(node, Fresh):
            found.add(node.category)

    walk(condition)
    return tuple(sorted(found))


# --- printer -----------------------------------------------------------------


def pretty_print(rule: Rule) -> str:
    return (
        f"RULE {rule.name}\n"
        f"WHEN {_print_cond(rule.condition)}\n"
        f"THEN {_print_action(rule.action)}\n"
        f"END"
    )


def _print_cond(node) -> str:
    if isinstance(node, Or):
        return " OR ".join(_print_conj(term) for term in node.terms)
    return _print_conj(node)


def _print_conj(node) -> str:
    if isinstance(node, And):
        return " AND ".join(_print_atom(term) for term in node.terms)
    return _print_atom(node)


def _print_atom(node) -> str:
    if isinstance(node, Comparison):
        return f"{_print_operand(node.left)} {node.op} {_print_operand(node.right)}"
    if isinstance(node, Fresh):
        return f"fresh({node.category}, {node.max_age})"
    if isinstance(node, Not):
        return f"NOT {_print_atom(node.term)}"
    return f"({_print_cond(node)})"


def _print_operand(operand) -> str:
    if isinstance(operand, Ref):
        return operand.name
    if isinstance(operand, Num):
        return repr(operand.value)
    return _quote(operand.value)


def _print_action(action) -> str:
    if isinstance(action, Continue):
        return "continue"
    if isinstance(action, SelectVariant):
        return f"selectVariant({action.gate_id}, {action.variant_id})"
    if isinstance(action, BreakRollback):
        if action.target is None:
            return "break"
        return f"rollback({action.target})"
    return f"start {action.process_ref}"


# --- evaluation --------------------------------------------------------------


def evaluate_condition(condition, env: dict, now: int) -> bool:
    """Evaluate against ``env`` mapping category -> (payload, ts).

    ``fresh(c, n)`` holds when the value for ``c`` is at most ``n`` ticks
    old at ``now``.  Unknown references raise MissingContext; comparisons
    between incompatible runtime kinds raise RuleTypeError.
    """
    if isinstance(condition, Or):
        return any(evaluate_condition(t, env, now) for t in condition.terms)
    if isinstance(condition, And):
        return all(evaluate_condition(t, env, now) for t in condition.terms)
    if isinstance(condition, Not):
        return not evaluate_condition(condition.term, env, now)
    if isinstance(condition, Fresh):
        if condition.category not in env:
            raise MissingContext(f"no value for {condition.category!r}")
        _, ts = env[condition.category]
        return now - ts <= condition.max_age
    return _compare(condition, env)


def _compare(node: Comparison, env: dict) -> bool:
    left = _resolve(node.left, env)
    right = _resolve(node.right, env)
    numeric = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)
    if numeric(left) and numeric(right):
        pass
    elif isinstance(left, str) and isinstance(right, str):
        if node.op not in ("==", "!="):
            raise RuleTypeError(f"text operands only support equality, not {node.op!r}")
    else:
        raise RuleTypeError(
            f"cannot compare {type(left).__name__} with {type(right).__name__}"
        )
    if node.op == "<":
        return left < right
    if node.op == "<=":
        return left <= right
    if node.op == ">":
        return left > right
    if node.op == ">=":
        return left >= right
    if node.op == "==":
        return left == right
    return left != right


def _resolve(operand, env: dict):
    if isinstance(operand, Ref):
        if operand.name not in env:
            raise MissingContext(f"no value for {operand.name!r}")
        payload, _ = env[operand.name]
        return payload
    return operand.value
