#!/usr/bin/env python3
"""
Case specification language (.fcase)

Lexer, recursive-descent parser, semantic checker and canonical formatter for
forensic case files. A case declares the incident state machine, named state
properties, observations, witness sequences, investigator theories and
evidential statements:

    case "brake" {
      machine {
        states { ok init; leak; fail; }
        events { wear burst tick }
        transitions { ok -- wear --> leak; leak -- burst --> fail; }
      }
      property P_fail = {fail};
      observation o1 = (P_fail, t=1500, min=1, max=0, w=0.9);
      sequence s1 = [o1];
      evidence es1 = {s1};
    }
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional

import structlog

from case_model import (
    ANY,
    ANY_PROPERTY,
    Diagnostic,
    EvidentialStatement,
    ForensicError,
    Observation,
    ObservationSequence,
    PropertyDef,
    Severity,
    StateMachine,
    ValidationError,
    format_weight,
    parse_weight,
    validate_machine,
)

logger = structlog.get_logger(__name__)

SYMBOLS = ("-->", "--", "{", "}", "(", ")", "[", "]", ",", ";", "=", "*")
INDENT = "  "


class CaseParseError(ForensicError):
    """Lexical or syntax error; carries the diagnostics, never a partial case"""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0]
        super().__init__(f"{first.line}:{first.column}: {first.message}")


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT, INT, DECIMAL, STRING, SYMBOL, EOF
    text: str
    line: int
    column: int

    def describe(self) -> str:
        if self.kind == "EOF":
            return "end of input"
        return f"'{self.text}'"


def _syntax_error(message: str, line: int, column: int) -> CaseParseError:
    return CaseParseError([Diagnostic(Severity.ERROR, message, line, column)])


class Scanner:
    """Turns case source text into tokens; `//` starts a comment"""

    def __init__(self, source: str):
        self._src = source
        self._pos = 0
        self._line = 1
        self._column = 1

    def tokens(self) -> list:
        """Whole token list, EOF last"""
        result = []
        while True:
            token = self.next_token()
            result.append(token)
            if token.kind == "EOF":
                return result

    def next_token(self) -> Token:
        self._skip_blank()
        line, column = self._line, self._column
        c = self._current_char()
        if c == "":
            return Token("EOF", "", line, column)
        if c.isascii() and c.isalpha():
            return Token("IDENT", self._word(), line, column)
        if c.isascii() and c.isdigit():
            return self._number(line, column)
        if c == '"':
            return Token("STRING", self._string(line, column), line, column)
        for symbol in SYMBOLS:
            if self._src.startswith(symbol, self._pos):
                for _ in symbol:
                    self._advance()
                return Token("SYMBOL", symbol, line, column)
        raise _syntax_error(f"unknown token {c!r}", line, column)

    def _current_char(self) -> str:
        return self._src[self._pos] if self._pos < len(self._src) else ""

    def _advance(self):
        if self._src[self._pos] == "\n":
            self._line += 1
            self._column = 1
        else:
            self._column += 1
        self._pos += 1

    def _skip_blank(self):
        while True:
            c = self._current_char()
            if c in (" ", "\t", "\r", "\n"):
                self._advance()
            elif self._src.startswith("//", self._pos):
                while self._current_char() not in ("", "\n"):
                    self._advance()
            else:
                return

    def _word(self) -> str:
        start = self._pos
        while True:
            c = self._current_char()
            if c and c.isascii() and (c.isalnum() or c == "_"):
                self._advance()
            else:
                return self._src[start:self._pos]

    def _digits(self) -> str:
        start = self._pos
        while self._current_char().isdigit() and self._current_char().isascii():
            self._advance()
        return self._src[start:self._pos]

    def _number(self, line, column) -> Token:
        whole = self._digits()
        if self._current_char() != ".":
            return Token("INT", whole, line, column)
        self._advance()
        frac = self._digits()
        if not frac:
            raise _syntax_error(f"malformed number {whole}.", line, column)
        return Token("DECIMAL", f"{whole}.{frac}", line, column)

    def _string(self, line, column) -> str:
        self._advance()
        chars = []
        while True:
            c = self._current_char()
            if c in ("", "\n"):
                raise _syntax_error("unterminated string", line, column)
            self._advance()
            if c == '"':
                return "".join(chars)
            if c == "\\":
                escaped = self._current_char()
                if escaped not in ('"', "\\"):
                    raise _syntax_error("unknown escape in string", self._line, self._column)
                self._advance()
                c = escaped
            chars.append(c)


@dataclass(frozen=True)
class ObservationDecl:
    label: str
    property_name: str
    min: int
    max: Optional[int]
    w: Fraction
    t: Optional[int] = None
    line: int = field(default=1, compare=False)
    column: int = field(default=1, compare=False)
    property_pos: tuple = field(default=(1, 1), compare=False)


@dataclass(frozen=True)
class SequenceDecl:
    """A witness story (or, with is_theory, an investigator's theory) listed by observation label"""
    label: str
    members: tuple = ()
    is_theory: bool = False
    line: int = field(default=1, compare=False)
    column: int = field(default=1, compare=False)
    member_positions: tuple = field(default=(), compare=False)

    @property
    def keyword(self) -> str:
        return "theory" if self.is_theory else "sequence"


@dataclass(frozen=True)
class StatementDecl:
    label: str
    members: tuple = ()
    line: int = field(default=1, compare=False)
    column: int = field(default=1, compare=False)
    member_positions: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class CaseSpec:
    name: str
    machine: StateMachine
    properties: tuple = ()
    observations: tuple = ()
    sequences: tuple = ()
    theories: tuple = ()
    statements: tuple = ()
    positions: dict = field(default_factory=dict, compare=False)

    def __hash__(self):
        return hash((self.name, self.machine, self.properties, self.observations,
                     self.sequences, self.theories, self.statements))

    def position_of(self, kind: str, name: str, nth: int = 0) -> tuple:
        found = self.positions.get((kind, name), [])
        if nth < len(found):
            return found[nth]
        return self.positions.get(("case", ""), [(1, 1)])[0]

    def property_table(self) -> dict:
        """Declared properties by name, plus the builtin any"""
        table = {ANY: ANY_PROPERTY}
        for prop in self.properties:
            table.setdefault(prop.name, prop)
        return table

    def _observation_table(self) -> dict:
        table = {}
        for decl in self.observations:
            table.setdefault(decl.label, decl)
        return table

    def resolve_observation(self, label: str) -> Observation:
        decl = self._observation_table().get(label)
        if decl is None:
            raise ValidationError(f"undeclared observation {label}")
        prop = self.property_table().get(decl.property_name)
        if prop is None:
            raise ValidationError(f"observation {label} uses undeclared property {decl.property_name}")
        return Observation(prop, decl.min, decl.max, decl.w, decl.t, decl.label)

    def _resolve(self, decl: SequenceDecl) -> ObservationSequence:
        return ObservationSequence(decl.label, tuple(self.resolve_observation(m) for m in decl.members))

    def resolve_sequence(self, label: str) -> ObservationSequence:
        for decl in self.sequences:
            if decl.label == label:
                return self._resolve(decl)
        raise ValidationError(f"undeclared sequence {label}")

    def resolve_theory(self, label: str) -> ObservationSequence:
        """Theory as an observation sequence"""
        for decl in self.theories:
            if decl.label == label:
                return self._resolve(decl)
        raise ValidationError(f"undeclared theory {label}")

    def resolve_statement(self, label: str) -> EvidentialStatement:
        """Evidential statement with its sequences resolved"""
        for decl in self.statements:
            if decl.label == label:
                members = dict.fromkeys(decl.members)
                return EvidentialStatement(label, tuple(self.resolve_sequence(m) for m in members))
        raise ValidationError(f"undeclared evidence {label}")


class _Positions:
    """Collects source positions while parsing"""

    def __init__(self):
        self.table = {}

    def add(self, kind, name, token):
        self.table.setdefault((kind, name), []).append((token.line, token.column))


class Parser:
    def __init__(self, source: str):
        self._tokens = Scanner(source).tokens()
        self._pos = 0
        self._positions = _Positions()

    # token plumbing

    def _peek(self, offset: int = 0) -> Token:
        return self._tokens[min(self._pos + offset, len(self._tokens) - 1)]

    def _advance(self) -> Token:
        token = self._peek()
        if token.kind != "EOF":
            self._pos += 1
        return token

    def _error(self, expected: str) -> CaseParseError:
        token = self._peek()
        return _syntax_error(f"expected {expected}, found {token.describe()}", token.line, token.column)

    def _at_symbol(self, symbol: str) -> bool:
        token = self._peek()
        return token.kind == "SYMBOL" and token.text == symbol

    def _at_keyword(self, word: str) -> bool:
        token = self._peek()
        return token.kind == "IDENT" and token.text == word

    def _consume(self, symbol: str) -> Token:
        if not self._at_symbol(symbol):
            raise self._error(f"'{symbol}'")
        return self._advance()

    def _keyword(self, word: str) -> Token:
        if not self._at_keyword(word):
            raise self._error(f"'{word}'")
        return self._advance()

    def _ident(self, what: str = "identifier") -> Token:
        if self._peek().kind != "IDENT":
            raise self._error(what)
        return self._advance()

    def _int(self, what: str) -> int:
        if self._peek().kind != "INT":
            raise self._error(what)
        return int(self._advance().text)

    def _field(self, name: str):
        self._keyword(name)
        self._consume("=")

    def _ident_list(self, closing: str) -> tuple:
        """IDENT ("," IDENT)* up to the closing symbol, possibly empty"""
        items = []
        if self._at_symbol(closing):
            self._advance()
            return ()
        while True:
            items.append(self._ident())
            if self._at_symbol(closing):
                self._advance()
                return tuple(items)
            if not self._at_symbol(","):
                raise self._error(f"',' or '{closing}'")
            self._advance()

    # grammar

    def parse_case(self) -> CaseSpec:
        start = self._keyword("case")
        self._positions.add("case", "", start)
        if self._peek().kind != "STRING":
            raise self._error("case name string")
        name = self._advance().text
        self._consume("{")
        machine = self._machine()
        parts = self._declarations(closing="}")
        self._consume("}")
        if self._peek().kind != "EOF":
            raise self._error("end of input after the case block")
        return CaseSpec(name, machine, *parts, positions=self._positions.table)

    def parse_fragment(self) -> tuple:
        parts = self._declarations(closing=None)
        if self._peek().kind != "EOF":
            raise self._error("a declaration")
        return parts, self._positions.table

    def _machine(self) -> StateMachine:
        self._positions.add("machine", "", self._keyword("machine"))
        self._consume("{")
        self._keyword("states")
        self._consume("{")
        states, initial, final = [], set(), set()
        while not self._at_symbol("}"):
            token = self._ident("state name")
            self._positions.add("state", token.text, token)
            states.append(token.text)
            if self._at_keyword("init"):
                self._advance()
                initial.add(token.text)
            if self._at_keyword("final"):
                self._advance()
                final.add(token.text)
            self._consume(";")
        if not states:
            raise self._error("at least one state")
        self._advance()
        self._keyword("events")
        self._consume("{")
        events = []
        while not self._at_symbol("}"):
            token = self._ident("event name")
            self._positions.add("event", token.text, token)
            events.append(token.text)
        self._advance()
        self._keyword("transitions")
        self._consume("{")
        transitions = []
        while not self._at_symbol("}"):
            src = self._ident("source state")
            self._consume("--")
            event = self._ident("event name")
            self._consume("-->")
            dst = self._ident("target state")
            self._consume(";")
            for token in (src, event, dst):
                self._positions.add("ref", token.text, token)
            self._positions.add("transition", f"{src.text} {event.text} {dst.text}", src)
            transitions.append((src.text, event.text, dst.text))
        self._advance()
        self._consume("}")
        return StateMachine(tuple(states), tuple(events), tuple(transitions),
                            frozenset(initial), frozenset(final))

    def _declarations(self, closing: Optional[str]) -> tuple:
        properties, observations, sequences, theories, statements = [], [], [], [], []
        while self._at_keyword("property"):
            properties.append(self._property())
        while not (self._peek().kind == "EOF" or (closing and self._at_symbol(closing))):
            if self._at_keyword("observation"):
                observations.append(self._observation())
            elif self._at_keyword("sequence") or self._at_keyword("theory"):
                decl = self._sequence()
                (theories if decl.is_theory else sequences).append(decl)
            elif self._at_keyword("evidence"):
                statements.append(self._statement())
            elif self._at_keyword("property") and closing is None:
                properties.append(self._property())
            else:
                raise self._error("'observation', 'sequence', 'theory' or 'evidence'")
        return (tuple(properties), tuple(observations), tuple(sequences),
                tuple(theories), tuple(statements))

    def _property(self) -> PropertyDef:
        self._keyword("property")
        name = self._ident("property name")
        self._positions.add("property", name.text, name)
        self._consume("=")
        if self._at_keyword(ANY):
            self._advance()
            self._consume(";")
            return PropertyDef(name.text)
        self._consume("{")
        members = []
        while True:
            member = self._ident("state name")
            self._positions.add("member", f"{name.text}.{member.text}", member)
            members.append(member.text)
            if self._at_symbol("}"):
                self._advance()
                break
            if not self._at_symbol(","):
                raise self._error("',' or '}'")
            self._advance()
        self._consume(";")
        return PropertyDef(name.text, frozenset(members))

    def _observation(self) -> ObservationDecl:
        self._keyword("observation")
        label = self._ident("observation name")
        self._positions.add("observation", label.text, label)
        self._consume("=")
        self._consume("(")
        prop = self._ident("property name")
        self._consume(",")
        t = None
        if self._at_keyword("t"):
            self._field("t")
            t = self._int("timestamp in milliseconds")
            self._consume(",")
        self._field("min")
        low = self._int("minimum duration")
        self._consume(",")
        self._field("max")
        if self._at_symbol("*"):
            self._advance()
            high = None
        else:
            high = self._int("maximum duration or '*'")
        self._consume(",")
        self._field("w")
        token = self._peek()
        if token.kind not in ("DECIMAL", "INT"):
            raise self._error("weight")
        self._advance()
        try:
            weight = parse_weight(token.text)
        except ValidationError as e:
            raise _syntax_error(str(e), token.line, token.column) from None
        self._consume(")")
        self._consume(";")
        return ObservationDecl(label.text, prop.text, low, high, weight, t,
                               label.line, label.column, (prop.line, prop.column))

    def _sequence(self) -> SequenceDecl:
        keyword = self._advance()
        label = self._ident(f"{keyword.text} name")
        self._positions.add("sequence", label.text, label)
        self._consume("=")
        self._consume("[")
        members = self._ident_list("]")
        self._consume(";")
        return SequenceDecl(label.text, tuple(m.text for m in members), keyword.text == "theory",
                            label.line, label.column, tuple((m.line, m.column) for m in members))

    def _statement(self) -> StatementDecl:
        self._keyword("evidence")
        label = self._ident("evidence name")
        self._positions.add("statement", label.text, label)
        self._consume("=")
        self._consume("{")
        members = self._ident_list("}")
        self._consume(";")
        return StatementDecl(label.text, tuple(m.text for m in members),
                             label.line, label.column, tuple((m.line, m.column) for m in members))


def parse_case(source: str) -> CaseSpec:
    """Parse one case; raises CaseParseError with positioned diagnostics"""
    spec = Parser(source).parse_case()
    logger.debug("Case parsed", case=spec.name, sequences=len(spec.sequences),
                 theories=len(spec.theories), statements=len(spec.statements))
    return spec


def parse_fragment(source: str, base: CaseSpec) -> CaseSpec:
    """Parse bare declarations (such as ingest output) and merge them into a case"""
    parts, positions = Parser(source).parse_fragment()
    merged = {key: list(value) for key, value in base.positions.items()}
    for key, value in positions.items():
        merged.setdefault(key, []).extend(value)
    properties, observations, sequences, theories, statements = parts
    return CaseSpec(
        base.name,
        base.machine,
        base.properties + properties,
        base.observations + observations,
        base.sequences + sequences,
        base.theories + theories,
        base.statements + statements,
        positions=merged,
    )


def _duplicates(names: Iterable[str]) -> list:
    counts = Counter(names)
    return sorted(name for name, count in counts.items() if count > 1)


def _machine_findings(spec: CaseSpec) -> list:
    found = []
    for diag in validate_machine(spec.machine):
        subject = diag.subject
        if subject is None:
            line, column = spec.position_of("machine", "")
        elif diag.message.startswith("duplicate state"):
            line, column = spec.position_of("state", subject, 1)
        elif diag.message.startswith("duplicate event"):
            line, column = spec.position_of("event", subject, 1)
        elif spec.positions.get(("ref", subject)) and "undeclared" in diag.message:
            line, column = spec.position_of("ref", subject)
        elif ("state", subject) in spec.positions:
            line, column = spec.position_of("state", subject)
        else:
            line, column = spec.position_of("ref", subject)
        found.append(Diagnostic(diag.severity, diag.message, line, column, subject))
    return found


def check_case(spec: CaseSpec) -> list:
    """Semantic findings for a parsed case, ordered by position"""
    found = _machine_findings(spec)

    def error(message, pos, subject=None):
        found.append(Diagnostic(Severity.ERROR, message, pos[0], pos[1], subject))

    def warning(message, pos, subject=None):
        found.append(Diagnostic(Severity.WARNING, message, pos[0], pos[1], subject))

    states = set(spec.machine.states)
    for name in _duplicates(p.name for p in spec.properties):
        error(f"duplicate property {name}", spec.position_of("property", name, 1), name)
    member_seen = {}
    for prop in spec.properties:
        if prop.name == ANY:
            error("property name 'any' is reserved", spec.position_of("property", prop.name), prop.name)
        if prop.is_universal or prop.name in member_seen:
            continue
        member_seen[prop.name] = True
        for member in sorted(prop.members - states):
            pos = spec.position_of("member", f"{prop.name}.{member}")
            error(f"property {prop.name} names undeclared state {member}", pos, member)

    table = spec.property_table()
    for label in _duplicates(o.label for o in spec.observations):
        error(f"duplicate observation {label}", spec.position_of("observation", label, 1), label)
    observations = {}
    for decl in spec.observations:
        observations.setdefault(decl.label, decl)
        if decl.property_name not in table:
            error(f"observation {decl.label} uses undeclared property {decl.property_name}",
                  decl.property_pos, decl.property_name)
        if not 0 < decl.w <= 1:
            error(f"observation {decl.label}: weight {format_weight(decl.w)} outside (0, 1]",
                  (decl.line, decl.column), decl.label)

    all_sequences = spec.sequences + spec.theories
    for label in _duplicates(s.label for s in all_sequences):
        error(f"duplicate sequence or theory {label}", spec.position_of("sequence", label, 1), label)
    for decl in all_sequences:
        if not decl.members:
            warning(f"empty {decl.keyword} {decl.label}", (decl.line, decl.column), decl.label)
        last_t = None
        for member, pos in zip(decl.members, decl.member_positions or [(decl.line, decl.column)] * len(decl.members)):
            obs = observations.get(member)
            if obs is None:
                error(f"{decl.keyword} {decl.label} references undeclared observation {member}", pos, member)
                continue
            if obs.t is None:
                continue
            if last_t is not None and obs.t < last_t:
                error(f"{decl.keyword} {decl.label}: non-chronological timestamps ({member} at t={obs.t} after t={last_t})",
                      pos, member)
            last_t = obs.t if last_t is None else max(last_t, obs.t)

    sequence_labels = {s.label for s in spec.sequences}
    theory_labels = {s.label for s in spec.theories}
    for label in _duplicates(s.label for s in spec.statements):
        error(f"duplicate evidence {label}", spec.position_of("statement", label, 1), label)
    for decl in spec.statements:
        if not decl.members:
            warning(f"empty evidence {decl.label}", (decl.line, decl.column), decl.label)
        positions = decl.member_positions or [(decl.line, decl.column)] * len(decl.members)
        for member, pos in zip(decl.members, positions):
            if member in theory_labels and member not in sequence_labels:
                error(f"evidence {decl.label} cannot include theory {member}", pos, member)
            elif member not in sequence_labels:
                error(f"evidence {decl.label} references undeclared sequence {member}", pos, member)
        for member in _duplicates(decl.members):
            warning(f"evidence {decl.label} lists sequence {member} more than once",
                    (decl.line, decl.column), member)

    found.sort(key=lambda d: (d.line, d.column, d.message))
    return found


def has_errors(diagnostics: Iterable[Diagnostic]) -> bool:
    """True if any diagnostic is an error"""
    return any(d.is_error for d in diagnostics)


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _ordered_members(prop: PropertyDef, machine: StateMachine) -> list:
    known = [q for q in dict.fromkeys(machine.states) if q in prop.members]
    return known + sorted(prop.members - set(known))


def _format_observation(decl: ObservationDecl) -> str:
    fields = [decl.property_name]
    if decl.t is not None:
        fields.append(f"t={decl.t}")
    fields.append(f"min={decl.min}")
    fields.append("max=*" if decl.max is None else f"max={decl.max}")
    fields.append(f"w={format_weight(decl.w)}")
    return f"observation {decl.label} = ({', '.join(fields)});"


def _declaration_lines(spec_parts: tuple, machine: Optional[StateMachine]) -> list:
    properties, observations, sequences, theories, statements = spec_parts
    lines = []
    for prop in properties:
        if prop.is_universal:
            lines.append(f"property {prop.name} = any;")
        else:
            members = _ordered_members(prop, machine) if machine else sorted(prop.members)
            lines.append(f"property {prop.name} = {{{', '.join(members)}}};")
    for decl in observations:
        lines.append(_format_observation(decl))
    for decl in tuple(sequences) + tuple(theories):
        lines.append(f"{decl.keyword} {decl.label} = [{', '.join(decl.members)}];")
    for decl in statements:
        lines.append(f"evidence {decl.label} = {{{', '.join(decl.members)}}};")
    return lines


def format_case(spec: CaseSpec) -> str:
    """Canonical text: one declaration per line, two-space indentation"""
    machine = spec.machine
    lines = [f"case {_quote(spec.name)} {{", f"{INDENT}machine {{", f"{INDENT * 2}states {{"]
    for state in machine.states:
        marks = [m for m, on in (("init", state in machine.initial), ("final", state in machine.final)) if on]
        lines.append(f"{INDENT * 3}{' '.join([state] + marks)};")
    lines.append(f"{INDENT * 2}}}")
    lines.append(f"{INDENT * 2}events {{")
    lines.extend(f"{INDENT * 3}{event}" for event in machine.events)
    lines.append(f"{INDENT * 2}}}")
    lines.append(f"{INDENT * 2}transitions {{")
    lines.extend(f"{INDENT * 3}{src} -- {event} --> {dst};" for src, event, dst in machine.transitions)
    lines.append(f"{INDENT * 2}}}")
    lines.append(f"{INDENT}}}")
    parts = (spec.properties, spec.observations, spec.sequences, spec.theories, spec.statements)
    lines.extend(INDENT + line for line in _declaration_lines(parts, machine))
    lines.append("}")
    return "\n".join(lines) + "\n"


def format_fragment(properties=(), observations=(), sequences=(), theories=(), statements=()) -> str:
    """Bare declarations, one per line, for pasting into a case"""
    lines = _declaration_lines((properties, observations, sequences, theories, statements), None)
    return "\n".join(lines) + ("\n" if lines else "")


def observation_decl(obs: Observation) -> ObservationDecl:
    return ObservationDecl(obs.label, obs.property.name, obs.min, obs.max, obs.w, obs.t)


def statement_fragment(statement: EvidentialStatement) -> str:
    """Declarations for a derived evidential statement, ready to paste into a case"""
    observations, sequences = [], []
    seen = set()
    for os in statement.sequences:
        for obs in os.observations:
            if obs.label not in seen:
                seen.add(obs.label)
                observations.append(observation_decl(obs))
        sequences.append(SequenceDecl(os.label, tuple(obs.label for obs in os.observations)))
    evidence = StatementDecl(statement.label, tuple(os.label for os in statement.sequences))
    return format_fragment(observations=observations, sequences=sequences, statements=[evidence])
