#!/usr/bin/env python3
"""
Scenario simulator

Replays an event schedule through the incident machine and samples the sensor
values of the current state, producing the ground-truth run together with a
synthetic blackbox log.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

import structlog

from blackbox_log import DEFAULT_PRECISION, BlackboxLog, BlackboxRecord, quantize
from case_model import ForensicError, Run, StateMachine, ValidationError, machine_errors

logger = structlog.get_logger(__name__)


class ReplayError(ForensicError):
    """A scheduled event cannot be replayed deterministically"""

    def __init__(self, t_ms: int, event: str, reason: str):
        super().__init__(f"t_ms {t_ms}: event {event} {reason}")
        self.t_ms = t_ms
        self.event = event


class SimulationRefusal(ForensicError):
    pass


@dataclass(frozen=True)
class Schedule:
    entries: tuple = ()
    sensor_map: dict = field(default_factory=dict)
    sample_period_ms: int = 1000
    end_ms: Optional[int] = None
    elevated_states: frozenset = frozenset()
    elevated_period_ms: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(tuple(e) for e in self.entries))
        object.__setattr__(self, "elevated_states", frozenset(self.elevated_states))
        if self.sample_period_ms <= 0:
            raise ValidationError("sample period must be positive")
        if self.elevated_period_ms is not None and self.elevated_period_ms <= 0:
            raise ValidationError("elevated sample period must be positive")
        times = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("schedule entries must be strictly increasing in t_ms")

    def period_in(self, state: str) -> int:
        if state in self.elevated_states and self.elevated_period_ms is not None:
            return self.elevated_period_ms
        return self.sample_period_ms

    def check_against(self, machine: StateMachine):
        """Every scheduled event and sensor state must exist in the machine"""
        for t_ms, event in self.entries:
            if event not in machine.events:
                raise ValidationError(f"scheduled event {event} at t_ms {t_ms} is not a machine event")
        for state in sorted(set(self.sensor_map) | self.elevated_states):
            if state not in machine.states:
                raise ValidationError(f"schedule names unknown state {state}")


STATEMENTS = [
    ("at", re.compile(r"at\s+(\d+)\s+fire\s+([A-Za-z_][A-Za-z0-9_]*)\Z")),
    ("sensor", re.compile(r"sensor\s+([A-Za-z_][A-Za-z0-9_]*)((?:\s+[A-Za-z_][A-Za-z0-9_]*=-?\d+(?:\.\d+)?)+)\Z")),
    ("period", re.compile(r"period\s+(\d+)\Z")),
    ("end", re.compile(r"end\s+(\d+)\Z")),
    ("elevate", re.compile(r"elevate\s+([A-Za-z_][A-Za-z0-9_]*)\Z")),
    ("elevated_period", re.compile(r"elevated_period\s+(\d+)\Z")),
]


def parse_schedule(text: str) -> Schedule:
    """Read a .sched file: `at T fire E;`, `sensor S ch=v;`, `period ms;`, `end ms;`"""
    entries, sensors, elevated = [], {}, set()
    settings = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("//", 1)[0].strip()
        if not line:
            continue
        if not line.endswith(";"):
            raise ValidationError(f"schedule line {number}: missing ';'")
        for statement in filter(None, (part.strip() for part in line[:-1].split(";"))):
            for kind, pattern in STATEMENTS:
                match = pattern.match(statement)
                if match:
                    break
            else:
                raise ValidationError(f"schedule line {number}: cannot read '{statement}'")
            if kind == "at":
                entries.append((int(match[1]), match[2]))
            elif kind == "sensor":
                readings = sensors.setdefault(match[1], [])
                for pair in match[2].split():
                    channel, _, value = pair.partition("=")
                    readings.append((channel, Decimal(value)))
            elif kind == "elevate":
                elevated.add(match[1])
            else:
                if kind in settings:
                    raise ValidationError(f"schedule line {number}: '{kind}' given twice")
                settings[kind] = int(match[1])
    return Schedule(
        tuple(entries),
        {state: tuple(readings) for state, readings in sensors.items()},
        settings.get("period", 1000),
        settings.get("end"),
        frozenset(elevated),
        settings.get("elevated_period"),
    )


@dataclass(frozen=True)
class SimulationResult:
    truth: Run
    records: tuple


def _fire(machine: StateMachine, state: str, t_ms: int, event: str) -> str:
    targets = [dst for label, dst in machine.successors.get(state, ()) if label == event]
    if not targets:
        raise ReplayError(t_ms, event, f"is not enabled in state {state}")
    if len(targets) > 1:
        raise ReplayError(t_ms, event, f"is ambiguous in state {state} ({', '.join(targets)})")
    return targets[0]


def simulate(machine: StateMachine, schedule: Schedule, t_end: Optional[int] = None) -> SimulationResult:
    """Ground-truth run plus the samples a recorder would have logged until t_end

    Sensor values are logged exactly as scheduled, without noise.
    """
    if len(machine.initial) != 1:
        raise SimulationRefusal(f"simulation needs exactly one initial state, machine has {len(machine.initial)}")
    errors = machine_errors(machine)
    if errors:
        raise ValidationError(f"invalid machine: {errors[0].message}")
    schedule.check_against(machine)
    t_end = schedule.end_ms if t_end is None else t_end
    if t_end is None or t_end < 0:
        raise ValidationError("simulation needs a non-negative end time")

    pending = [entry for entry in schedule.entries if entry[0] <= t_end]
    late = len(schedule.entries) - len(pending)
    if late:
        logger.warning("Scheduled events after the end time are not applied", count=late, t_end=t_end)

    state = next(iter(machine.initial))
    states, events, records = [state], [], []
    t_ms = 0
    while t_ms <= t_end:
        while pending and pending[0][0] <= t_ms:
            at, event = pending.pop(0)
            state = _fire(machine, state, at, event)
            states.append(state)
            events.append(event)
        level = "elevated" if state in schedule.elevated_states else "normal"
        for channel, value in schedule.sensor_map.get(state, ()):
            records.append(BlackboxRecord(len(records), t_ms, channel,
                                          quantize(value, DEFAULT_PRECISION), level))
        t_ms += schedule.period_in(state)
    for at, event in pending:
        state = _fire(machine, state, at, event)
        states.append(state)
        events.append(event)

    truth = Run(tuple(states), tuple(events))
    logger.info("Simulation finished", truth=truth.render(), records=len(records), t_end=t_end)
    return SimulationResult(truth, tuple(records))


def write_log(records, path) -> BlackboxLog:
    """Persist simulated records through the append-only writer"""
    log = BlackboxLog(path)
    log.extend(records)
    return log
