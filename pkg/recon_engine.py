#!/usr/bin/env python3
"""
Event reconstruction engine

Computes every run of the incident machine that explains an evidential
statement (the inverse transition function), ranks the resulting backtraces by
credibility, checks investigator theories against the evidence and, when they
disagree, finds the maximal subsets of witness stories that remain jointly
explainable.

The search runs over the product of the machine with one segment tracker per
observation sequence. A tracker state (i, c) says the run is inside the segment
of observation i and has spent c states there (saturated at min when the
observation has no upper bound). The product is explored forward layer by layer
up to the length cap, then runs are read off backward from the accepting nodes
of each layer. A brute-force forward enumerator is kept as an independent
oracle.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Iterator, Optional

import structlog

from case_model import (
    Aggregator,
    Backtrace,
    EvidentialStatement,
    ForensicError,
    ObservationSequence,
    Partition,
    ReconConfig,
    Run,
    StateMachine,
    ValidationError,
    aggregate_credibility,
    eval_property,
    format_score,
    length_interval,
    machine_errors,
    statement_weights,
)

logger = structlog.get_logger(__name__)

ORACLE_MAX_RUN_LENGTH = 12
LATTICE_MAX_SEQUENCES = 16


class OracleRefusal(ForensicError):
    """The brute-force oracle refuses inputs beyond its scale guard"""


class LatticeRefusal(ForensicError):
    """Too many sequences for the subset lattice"""


@dataclass(frozen=True)
class ReconResult:
    """Ranked backtraces; complete is False when the list was cut at max_backtraces"""
    backtraces: tuple = ()
    complete: bool = True
    aggregator: Aggregator = Aggregator.PRODUCT

    def __iter__(self) -> Iterator[Backtrace]:
        return iter(self.backtraces)

    def __len__(self) -> int:
        return len(self.backtraces)

    def __getitem__(self, index):
        return self.backtraces[index]

    def __bool__(self) -> bool:
        return bool(self.backtraces)

    @property
    def cap_exceeded(self) -> bool:
        return not self.complete

    @property
    def runs(self) -> list:
        return [bt.run for bt in self.backtraces]


@dataclass(frozen=True)
class ConsistentSubset:
    included: frozenset
    excluded: frozenset
    score: Fraction
    witness: Backtrace

    def rank_key(self):
        return (-len(self.included), -self.score, tuple(sorted(self.included)))


@dataclass(frozen=True)
class TheoryVerdict:
    agrees: bool
    backtraces: tuple = ()
    diagnosis: tuple = ()
    complete: bool = True


def _iter_partitions(states: tuple, os: ObservationSequence) -> Iterator[Partition]:
    """Partitions of the state list in lexicographic order of boundaries"""
    observations = os.observations
    k = len(observations)
    n = len(states)
    if k == 0:
        yield Partition(())
        return
    rest_min = [sum(o.min for o in observations[i + 1:]) for i in range(k)]

    def extend(i, start, bounds):
        obs = observations[i]
        remaining = n - start
        if i == k - 1:
            if obs.admits(remaining) and all(eval_property(obs.property, q) for q in states[start:]):
                yield Partition(bounds + (n,))
            return
        upper = remaining - rest_min[i]
        if obs.upper is not None:
            upper = min(upper, obs.upper)
        for length in range(obs.min, upper + 1):
            if length and not eval_property(obs.property, states[start + length - 1]):
                break
            if length == obs.min and not all(eval_property(obs.property, q) for q in states[start:start + length]):
                break
            yield from extend(i + 1, start + length, bounds + (start + length,))

    yield from extend(0, 0, (0,))


def explains(machine: StateMachine, run: Run, os: ObservationSequence) -> list:
    """All witness partitions of the run for one observation sequence"""
    return list(_iter_partitions(run.states, os))


def _first_partition(run: Run, os: ObservationSequence) -> Optional[Partition]:
    return next(_iter_partitions(run.states, os), None)


class SegmentTracker:
    """Nondeterministic automaton accepting the state strings one sequence explains"""

    def __init__(self, os: ObservationSequence):
        self.label = os.label
        self.observations = os.observations
        k = len(self.observations)
        self._rest_min = [sum(o.min for o in self.observations[i + 1:]) for i in range(k)]
        self._tail_empty = [self._rest_min[i] == 0 for i in range(k)]

    def _saturate(self, i: int, count: int) -> int:
        obs = self.observations[i]
        return min(count, obs.min) if obs.upper is None else count

    def _openings(self, first: int, state: str) -> Iterator[tuple]:
        # segments from `first` on that may start at this state; earlier ones stay empty
        for j in range(first, len(self.observations)):
            obs = self.observations[j]
            if (obs.upper is None or obs.upper >= 1) and eval_property(obs.property, state):
                yield (j, self._saturate(j, 1))
            if obs.min > 0:
                return

    def start(self, state: str) -> set:
        return set(self._openings(0, state))

    def step(self, current: tuple, state: str) -> set:
        i, count = current
        obs = self.observations[i]
        out = set()
        if (obs.upper is None or count < obs.upper) and eval_property(obs.property, state):
            out.add((i, self._saturate(i, count + 1)))
        if count >= obs.min:
            out.update(self._openings(i + 1, state))
        return out

    def accepting(self, current: tuple) -> bool:
        i, count = current
        return count >= self.observations[i].min and self._tail_empty[i]

    def still_needed(self, current: tuple) -> int:
        """Fewest further states before this tracker can accept"""
        i, count = current
        return max(0, self.observations[i].min - count) + self._rest_min[i]


def _combine(options: list) -> Iterator[tuple]:
    return itertools.product(*[sorted(o) for o in options])


def _product_layers(machine: StateMachine, trackers: list, limit: int) -> list:
    """Forward-reachable product nodes per run length, each with its predecessor edges"""

    def viable(combo, depth):
        return all(depth + t.still_needed(s) <= limit for t, s in zip(trackers, combo))

    first = {}
    for state in sorted(machine.initial):
        for combo in _combine([t.start(state) for t in trackers]):
            if viable(combo, 1):
                first[(state, combo)] = set()
    layers = [first] if first else []

    for depth in range(2, limit + 1):
        if not layers:
            break
        following = {}
        for node in layers[-1]:
            state, combo = node
            for event, target in machine.successors.get(state, ()):
                for successor in _combine([t.step(s, target) for t, s in zip(trackers, combo)]):
                    if viable(successor, depth):
                        following.setdefault((target, successor), set()).add((node, event))
        if not following:
            break
        layers.append(following)
    return layers


def _walk_back(layers: list, depth: int, nodes: set, states: tuple, out: list):
    """Runs ending in the given nodes, in lexicographic order of (state, event) going backward"""
    stack = [(depth, nodes, states, ())]
    while stack:
        level, current, suffix_states, suffix_events = stack.pop()
        if level == 1:
            out.append(Run(suffix_states, suffix_events))
            continue
        groups = {}
        for node in current:
            for previous, event in layers[level - 1][node]:
                groups.setdefault((previous[0], event), set()).add(previous)
        for state, event in sorted(groups, reverse=True):
            stack.append((level - 1, groups[(state, event)], (state,) + suffix_states, (event,) + suffix_events))


def _runs_of_length(machine: StateMachine, trackers: list, layers: list, depth: int, anchor: bool) -> list:
    ends = {}
    for node in layers[depth - 1]:
        state, combo = node
        if anchor and state not in machine.final:
            continue
        if all(t.accepting(s) for t, s in zip(trackers, combo)):
            ends.setdefault(state, set()).add(node)
    runs = []
    for state in sorted(ends):
        _walk_back(layers, depth, ends[state], (state,), runs)
    return runs


def _check_inputs(machine: StateMachine, es: EvidentialStatement):
    errors = machine_errors(machine)
    if errors:
        raise ValidationError(f"invalid machine: {errors[0].message}")
    for os in es.sequences:
        for obs in os.observations:
            if obs.property.members is not None:
                unknown = obs.property.members - set(machine.states)
                if unknown:
                    raise ValidationError(
                        f"property {obs.property.name} names undeclared state {sorted(unknown)[0]}")


def _backtrace(run: Run, es: EvidentialStatement, score: Fraction) -> Backtrace:
    partitions = [(os.label, _first_partition(run, os)) for os in es.sequences]
    return Backtrace(run, tuple(partitions), score, es.labels)


def _ranked(backtraces: list, cfg: ReconConfig) -> ReconResult:
    backtraces.sort(key=Backtrace.rank_key)
    complete = len(backtraces) <= cfg.max_backtraces
    return ReconResult(tuple(backtraces[:cfg.max_backtraces]), complete, cfg.aggregator)


def _out_of_reach(es: EvidentialStatement, cfg: ReconConfig) -> bool:
    return any(
        os.observations and length_interval(os).lo > cfg.max_run_length
        for os in es.sequences
    )


def reconstruct(machine: StateMachine, es: EvidentialStatement, cfg: ReconConfig = ReconConfig()) -> ReconResult:
    """All credibility-ranked backtraces explaining every sequence of the statement"""
    _check_inputs(machine, es)
    if _out_of_reach(es, cfg):
        logger.info("Evidence needs longer runs than the cap allows", evidence=es.label,
                    max_run_length=cfg.max_run_length)
        return ReconResult((), True, cfg.aggregator)

    trackers = [SegmentTracker(os) for os in es.ordered() if os.observations]
    layers = _product_layers(machine, trackers, cfg.max_run_length)
    anchor = cfg.anchors_final(machine)
    score = aggregate_credibility(statement_weights(es.sequences), cfg.aggregator)

    runs = []
    for depth in range(1, len(layers) + 1):
        runs.extend(_runs_of_length(machine, trackers, layers, depth, anchor))
        if len(runs) > cfg.max_backtraces:
            break

    result = _ranked([_backtrace(run, es, score) for run in runs], cfg)
    logger.info("Reconstruction finished", evidence=es.label, backtraces=len(result),
                complete=result.complete, product_layers=len(layers))
    return result


def enumerate_runs_oracle(machine: StateMachine, es: EvidentialStatement,
                          cfg: ReconConfig = ReconConfig(max_run_length=ORACLE_MAX_RUN_LENGTH)) -> ReconResult:
    """Brute force: every run up to the cap, filtered by explains()"""
    if cfg.max_run_length > ORACLE_MAX_RUN_LENGTH:
        raise OracleRefusal(
            f"oracle is limited to runs of {ORACLE_MAX_RUN_LENGTH} states, asked for {cfg.max_run_length}")
    _check_inputs(machine, es)
    anchor = cfg.anchors_final(machine)
    score = aggregate_credibility(statement_weights(es.sequences), cfg.aggregator)
    found = []

    def visit(states, events):
        run = Run(states, events)
        if (not anchor or states[-1] in machine.final) and all(
                _first_partition(run, os) is not None for os in es.sequences):
            found.append(_backtrace(run, es, score))
        if len(states) == cfg.max_run_length:
            return
        for event, target in machine.successors.get(states[-1], ()):
            visit(states + (target,), events + (event,))

    for state in sorted(machine.initial):
        visit((state,), ())
    return _ranked(found, cfg)


def _probe(machine: StateMachine, es: EvidentialStatement, cfg: ReconConfig) -> Optional[Backtrace]:
    result = reconstruct(machine, es, cfg)
    return result.backtraces[0] if result else None


def maximal_consistent_subsets(machine: StateMachine, es: EvidentialStatement,
                               cfg: ReconConfig = ReconConfig(), workers: int = 1) -> list:
    """Largest sets of witness stories that one run can still explain, best first"""
    if len(es) > LATTICE_MAX_SEQUENCES:
        raise LatticeRefusal(
            f"subset diagnosis handles at most {LATTICE_MAX_SEQUENCES} sequences, got {len(es)}")
    labels = sorted(es.labels)
    everything = frozenset(labels)
    probe_cfg = replace(cfg, max_backtraces=1)
    found = []

    for size in range(len(labels), -1, -1):
        candidates = [
            frozenset(combo) for combo in itertools.combinations(labels, size)
            if not any(set(combo) <= subset.included for subset in found)
        ]
        if not candidates:
            continue

        def probe(subset):
            return _probe(machine, es.subset(subset), probe_cfg)

        if workers > 1 and len(candidates) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                witnesses = list(pool.map(probe, candidates))
        else:
            witnesses = [probe(subset) for subset in candidates]

        for subset, witness in zip(candidates, witnesses):
            if witness is not None:
                found.append(ConsistentSubset(subset, everything - subset, witness.score, witness))

    found.sort(key=ConsistentSubset.rank_key)
    logger.info("Consistency diagnosis finished", evidence=es.label, sequences=len(labels),
                maximal_subsets=len(found))
    return found


def check_theory(machine: StateMachine, es: EvidentialStatement, theory: ObservationSequence,
                 cfg: ReconConfig = ReconConfig()) -> TheoryVerdict:
    """Does some run explain the evidence and the theory together?"""
    if theory.label in es.labels:
        raise ValidationError(f"theory {theory.label} has the same label as a sequence of {es.label}")
    combined = es.with_sequence(theory)
    result = reconstruct(machine, combined, cfg)
    if result:
        logger.info("Theory agrees with the evidence", theory=theory.label, backtraces=len(result))
        return TheoryVerdict(True, result.backtraces, (), result.complete)
    logger.info("Theory disagrees with the evidence", theory=theory.label)
    diagnosis = maximal_consistent_subsets(machine, combined, cfg)
    return TheoryVerdict(False, (), tuple(diagnosis), result.complete)


def rank_theories(machine: StateMachine, es: EvidentialStatement, theories: Iterable[ObservationSequence],
                  cfg: ReconConfig = ReconConfig()) -> list:
    """Agreeing theories first: more observations, then higher cumulative weight, then label"""
    verdicts = []
    for theory in theories:
        verdict = check_theory(machine, es, theory, cfg)
        if verdict.agrees:
            weight = aggregate_credibility(theory.weights, cfg.aggregator)
            key = (0, -len(theory), -weight, theory.label)
        else:
            key = (1, 0, 0, theory.label)
        verdicts.append((key, theory.label, verdict))
    verdicts.sort(key=lambda item: item[0])
    return [(label, verdict) for _, label, verdict in verdicts]


def _render_backtrace(rank: int, bt: Backtrace, indent: str = "") -> list:
    lines = [f"{indent}#{rank} score={format_score(bt.score)} length={len(bt.run)}",
             f"{indent}  run: {bt.run.render()}"]
    for label, partition in bt.partitions:
        lines.append(f"{indent}  {label}: [{', '.join(str(b) for b in partition.boundaries)}]")
    return lines


def _completeness(result_complete: bool, cap: Optional[int] = None) -> str:
    if result_complete:
        return "complete"
    return "truncated (cap exceeded)" if cap is None else f"truncated at {cap} (cap exceeded)"


def render_backtraces(label: str, result: ReconResult) -> str:
    """Ranked backtrace report for one evidential statement"""
    if not result:
        return f"evidence {label}: no backtrace explains the evidence\n"
    lines = [f"evidence {label}: {len(result)} backtrace(s), aggregator={result.aggregator.value}, "
             f"{_completeness(result.complete, len(result))}"]
    for rank, bt in enumerate(result, 1):
        lines.extend(_render_backtrace(rank, bt))
    return "\n".join(lines) + "\n"


def _label_set(labels: Iterable[str]) -> str:
    return "{" + ", ".join(sorted(labels)) + "}"


def render_verdict(label: str, verdict: TheoryVerdict) -> str:
    """Verdict report; disagreement lists the maximal consistent subsets"""
    if verdict.agrees:
        lines = [f"theory {label}: agrees ({len(verdict.backtraces)} backtrace(s), "
                 f"{_completeness(verdict.complete)})"]
        for rank, bt in enumerate(verdict.backtraces, 1):
            lines.extend(_render_backtrace(rank, bt, "  "))
        return "\n".join(lines) + "\n"
    lines = [f"theory {label}: disagrees", "  maximal consistent subsets:"]
    if not verdict.diagnosis:
        lines.append("    none (no subset of the evidence is explainable within the cap)")
    for rank, subset in enumerate(verdict.diagnosis, 1):
        lines.append(f"  #{rank} included={_label_set(subset.included)} excluded={_label_set(subset.excluded)} "
                     f"score={format_score(subset.score)}")
        lines.append(f"     witness: {subset.witness.run.render()}")
    return "\n".join(lines) + "\n"


def render_ranking(ranking: list) -> str:
    """Ranking summary followed by each theory's verdict"""
    lines = ["theory ranking:"]
    for position, (label, verdict) in enumerate(ranking, 1):
        status = "agrees" if verdict.agrees else "disagrees"
        lines.append(f"  {position}. {label} {status}")
    text = "\n".join(lines) + "\n"
    return text + "".join(render_verdict(label, verdict) for label, verdict in ranking)
