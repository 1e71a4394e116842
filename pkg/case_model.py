#!/usr/bin/env python3
"""
Evidential context model for self-forensic case analysis.

Observations, observation sequences and evidential statements, the incident
state machine, runs and backtraces, plus the value-level helpers the rest of
the toolkit builds on (property evaluation, duration intervals, credibility
aggregation and machine validation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Optional

import networkx as nx
import structlog

logger = structlog.get_logger(__name__)

ANY = "any"


class ForensicError(Exception):
    """Base class for every error raised by the toolkit"""


class ValidationError(ForensicError, ValueError):
    """Raised when a value or an input violates a model invariant"""


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


class Aggregator(str, Enum):
    """How observation weights combine into a credibility score"""
    PRODUCT = "product"
    MINIMUM = "minimum"
    MEAN = "mean"

    @classmethod
    def from_name(cls, name: str) -> "Aggregator":
        """Accept the long names and the `min` shorthand used on the command line"""
        aliases = {"min": cls.MINIMUM}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"unknown aggregator: {name}") from None


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    line: int = 1
    column: int = 1
    subject: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.line < 1 or self.column < 1:
            raise ValidationError("diagnostic positions are 1-based")

    @property
    def is_error(self) -> bool:
        return self.severity is Severity.ERROR

    def render(self, source_name: str = "<case>") -> str:
        return f"{source_name}:{self.line}:{self.column}: {self.severity.value}: {self.message}"


@dataclass(frozen=True)
class PropertyDef:
    """A named predicate over machine states; members None is the universal property"""
    name: str
    members: Optional[frozenset] = None

    @property
    def is_universal(self) -> bool:
        return self.members is None


ANY_PROPERTY = PropertyDef(ANY)


def parse_weight(text: str) -> Fraction:
    """Convert a decimal literal with at most 9 fractional digits to an exact weight"""
    whole, _, frac = text.partition(".")
    if not whole.isdigit() or (frac and not frac.isdigit()) or len(frac) > 9:
        raise ValidationError(f"malformed weight literal: {text}")
    return Fraction(text)


def format_weight(weight: Fraction) -> str:
    """Shortest decimal rendering that parses back to the same weight"""
    scaled = weight * 10 ** 9
    if scaled.denominator != 1:
        raise ValidationError(f"weight {weight} needs more than 9 fractional digits")
    whole, frac = divmod(scaled.numerator, 10 ** 9)
    digits = f"{frac:09d}".rstrip("0") or "0"
    return f"{whole}.{digits}"


def format_score(score: Fraction) -> str:
    """Scores always print with 9 fractional digits"""
    scaled = score * 10 ** 9
    rounded = (scaled.numerator * 2 + scaled.denominator) // (scaled.denominator * 2)
    whole, frac = divmod(rounded, 10 ** 9)
    return f"{whole}.{frac:09d}"


def check_weight(weight: Fraction) -> Fraction:
    """Weight unchanged if it lies in (0, 1], otherwise ValidationError"""
    if not 0 < weight <= 1:
        raise ValidationError(f"weight {weight} outside (0, 1]")
    return weight


@dataclass(frozen=True)
class Observation:
    """o = (P, t, min, max, w); max None means unbounded"""
    property: PropertyDef
    min: int
    max: Optional[int]
    w: Fraction
    t: Optional[int] = None
    label: str = ""

    def __post_init__(self):
        if self.min < 0 or (self.max is not None and self.max < 0):
            raise ValidationError(f"observation {self.label or '?'}: durations must be non-negative")
        if self.t is not None and self.t < 0:
            raise ValidationError(f"observation {self.label or '?'}: timestamp must be non-negative")
        check_weight(self.w)

    @property
    def upper(self) -> Optional[int]:
        """Longest admissible segment, None when unbounded"""
        return None if self.max is None else self.min + self.max

    def admits(self, length: int) -> bool:
        """Can a segment of this many states satisfy the duration bounds?"""
        upper = self.upper
        return length >= self.min and (upper is None or length <= upper)


@dataclass(frozen=True)
class ObservationSequence:
    label: str
    observations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        last = None
        for obs in self.observations:
            if obs.t is None:
                continue
            if last is not None and obs.t < last:
                raise ValidationError(f"sequence {self.label}: non-chronological timestamps")
            last = obs.t

    @property
    def weights(self) -> list:
        return [obs.w for obs in self.observations]

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True, eq=False)
class EvidentialStatement:
    """Unordered set of witness stories; declaration order is kept only for printing"""
    label: str
    sequences: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        labels = [os.label for os in self.sequences]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"evidence {self.label}: duplicate sequence labels")

    def __eq__(self, other):
        if not isinstance(other, EvidentialStatement):
            return NotImplemented
        return self.label == other.label and frozenset(self.sequences) == frozenset(other.sequences)

    def __hash__(self):
        return hash((self.label, frozenset(self.sequences)))

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def labels(self) -> frozenset:
        return frozenset(os.label for os in self.sequences)

    def ordered(self) -> list:
        """Sequences sorted by label"""
        return sorted(self.sequences, key=lambda os: os.label)

    def with_sequence(self, os: ObservationSequence) -> "EvidentialStatement":
        """Same statement with one more sequence appended"""
        return EvidentialStatement(self.label, self.sequences + (os,))

    def subset(self, labels: Iterable[str]) -> "EvidentialStatement":
        """Statement restricted to the given sequence labels, order kept"""
        wanted = set(labels)
        return EvidentialStatement(self.label, tuple(os for os in self.sequences if os.label in wanted))


@dataclass(frozen=True)
class StateMachine:
    """The incident model: states, events, a possibly nondeterministic transition relation"""
    states: tuple
    events: tuple
    transitions: tuple
    initial: frozenset
    final: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "transitions", tuple(tuple(tr) for tr in self.transitions))
        object.__setattr__(self, "initial", frozenset(self.initial))
        object.__setattr__(self, "final", frozenset(self.final))

    @cached_property
    def successors(self) -> dict:
        """state -> sorted list of (event, next state)"""
        table = {q: set() for q in self.states}
        for src, event, dst in self.transitions:
            table.setdefault(src, set()).add((event, dst))
        return {q: sorted(edges) for q, edges in table.items()}

    @cached_property
    def predecessors(self) -> dict:
        """state -> sorted list of (previous state, event)"""
        table = {q: set() for q in self.states}
        for src, event, dst in self.transitions:
            table.setdefault(dst, set()).add((src, event))
        return {q: sorted(edges) for q, edges in table.items()}

    def has_transition(self, src: str, event: str, dst: str) -> bool:
        return (event, dst) in self.successors.get(src, ())

    def graph(self) -> nx.MultiDiGraph:
        """Transition relation as a networkx multigraph, one edge per event"""
        g = nx.MultiDiGraph()
        g.add_nodes_from(self.states)
        for src, event, dst in self.transitions:
            g.add_edge(src, dst, key=event)
        return g


@dataclass(frozen=True)
class Run:
    states: tuple
    events: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "events", tuple(self.events))
        if not self.states:
            raise ValidationError("a run visits at least one state")
        if len(self.events) != len(self.states) - 1:
            raise ValidationError("a run of n states carries n-1 events")

    def __len__(self) -> int:
        return len(self.states)

    def render(self) -> str:
        parts = [self.states[0]]
        for event, state in zip(self.events, self.states[1:]):
            parts.append(f"-{event}-> {state}")
        return " ".join(parts)

    def is_valid_for(self, machine: StateMachine, anchor_final: bool = True) -> bool:
        """Starts initial, follows transitions, ends final when anchored"""
        if self.states[0] not in machine.initial:
            return False
        if anchor_final and machine.final and self.states[-1] not in machine.final:
            return False
        return all(
            machine.has_transition(src, event, dst)
            for src, event, dst in zip(self.states, self.events, self.states[1:])
        )


@dataclass(frozen=True)
class Partition:
    """Segment boundaries 0 = b_0 <= ... <= b_k = n; empty for a vacuous sequence"""
    boundaries: tuple

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(self.boundaries))

    @property
    def lengths(self) -> list:
        return [b - a for a, b in zip(self.boundaries, self.boundaries[1:])]

    def segments(self) -> list:
        return list(zip(self.boundaries, self.boundaries[1:]))


@dataclass(frozen=True)
class Backtrace:
    run: Run
    partitions: tuple
    score: Fraction
    included_sequences: frozenset

    def __post_init__(self):
        object.__setattr__(self, "partitions", tuple(sorted(self.partitions)))
        object.__setattr__(self, "included_sequences", frozenset(self.included_sequences))

    def partition_for(self, label: str) -> Partition:
        for name, partition in self.partitions:
            if name == label:
                return partition
        raise KeyError(label)

    def rank_key(self):
        """Score descending, then shorter runs, then events and states lexicographically"""
        return (-self.score, len(self.run), self.run.events, self.run.states)


@dataclass(frozen=True)
class ReconConfig:
    max_run_length: int = 64
    max_backtraces: int = 1000
    aggregator: Aggregator = Aggregator.PRODUCT
    anchor_final: bool = True

    def __post_init__(self):
        if self.max_run_length < 1:
            raise ValidationError("max_run_length must be at least 1")
        if self.max_backtraces < 1:
            raise ValidationError("max_backtraces must be at least 1")
        if not isinstance(self.aggregator, Aggregator):
            object.__setattr__(self, "aggregator", Aggregator.from_name(self.aggregator))

    def anchors_final(self, machine: StateMachine) -> bool:
        """Runs must end in a final state only when the machine declares one"""
        return self.anchor_final and bool(machine.final)


@dataclass(frozen=True)
class DurationInterval:
    lo: int
    hi: Optional[int]

    @property
    def bounded(self) -> bool:
        return self.hi is not None

    def contains(self, length: int) -> bool:
        return length >= self.lo and (self.hi is None or length <= self.hi)


def eval_property(prop: PropertyDef, state: str, machine: Optional[StateMachine] = None) -> bool:
    """True iff the state satisfies the property"""
    if machine is not None and state not in machine.states:
        raise ValidationError(f"unknown state: {state}")
    return prop.is_universal or state in prop.members


def length_interval(os: ObservationSequence) -> DurationInterval:
    """Range of run lengths (in states) the sequence can explain"""
    lo = sum(obs.min for obs in os.observations)
    if any(obs.max is None for obs in os.observations):
        return DurationInterval(lo, None)
    return DurationInterval(lo, sum(obs.min + obs.max for obs in os.observations))


def aggregate_credibility(weights: Iterable, method: Aggregator = Aggregator.PRODUCT) -> Fraction:
    """Combine observation weights; an empty weight set is the neutral verdict 1"""
    values = [check_weight(Fraction(w)) for w in weights]
    if not values:
        return Fraction(1)
    method = Aggregator.from_name(method) if not isinstance(method, Aggregator) else method
    if method is Aggregator.PRODUCT:
        result = Fraction(1)
        for value in values:
            result *= value
        return result
    if method is Aggregator.MINIMUM:
        return min(values)
    return sum(values, Fraction(0)) / len(values)


def statement_weights(sequences: Iterable[ObservationSequence]) -> list:
    """Every observation weight of every sequence, in order"""
    return [w for os in sequences for w in os.weights]


def validate_machine(machine: StateMachine) -> list:
    """Structural findings for a machine; an empty list means it is usable"""
    diagnostics = []
    declared_states = set(machine.states)
    declared_events = set(machine.events)

    def error(message, subject=None):
        diagnostics.append(Diagnostic(Severity.ERROR, message, subject=subject))

    def warning(message, subject=None):
        diagnostics.append(Diagnostic(Severity.WARNING, message, subject=subject))

    for name in sorted(s for s in declared_states if machine.states.count(s) > 1):
        error(f"duplicate state declaration: {name}", name)
    for name in sorted(e for e in declared_events if machine.events.count(e) > 1):
        error(f"duplicate event declaration: {name}", name)

    seen = set()
    for src, event, dst in machine.transitions:
        for state in (src, dst):
            if state not in declared_states:
                error(f"transition {src} --{event}--> {dst} uses undeclared state {state}", state)
        if event not in declared_events:
            error(f"transition {src} --{event}--> {dst} uses undeclared event {event}", event)
        if (src, event, dst) in seen:
            warning(f"duplicate transition {src} --{event}--> {dst}", src)
        seen.add((src, event, dst))

    if not machine.initial:
        error("empty initial set")
    for state in sorted(machine.initial - declared_states):
        error(f"initial state {state} is not declared", state)
    for state in sorted(machine.final - declared_states):
        error(f"final state {state} is not declared", state)

    if machine.initial and not any(d.is_error for d in diagnostics):
        graph = machine.graph()
        reachable = set(machine.initial)
        for start in machine.initial:
            reachable |= nx.descendants(graph, start)
        for state in machine.states:
            if state not in reachable:
                warning(f"state {state} is unreachable from the initial states", state)

    if diagnostics:
        logger.debug("Machine validation findings", count=len(diagnostics))
    return diagnostics


def machine_errors(machine: StateMachine) -> list:
    """Error diagnostics of validate_machine"""
    return [d for d in validate_machine(machine) if d.is_error]
