#!/usr/bin/env python3
"""
Blackbox log for self-forensic telemetry

Append-only JSON Lines log with a CRC-32 per record, integrity verification,
off-vehicle export with a sha256 sidecar, and the threshold-rule ingester that
turns raw samples into observation sequences.
"""

from __future__ import annotations

import hashlib
import json
import operator
import os
import re
import shutil
import zlib
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional

import structlog

from case_model import (
    ANY_PROPERTY,
    EvidentialStatement,
    ForensicError,
    Observation,
    ObservationSequence,
    PropertyDef,
    ValidationError,
    format_weight,
    parse_weight,
)

logger = structlog.get_logger(__name__)

LEVELS = ("normal", "elevated")
DEFAULT_PRECISION = 3
IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
STORED_LINE = re.compile(rb'(\{.*),"crc":"([0-9a-f]{8})"\}\Z', re.DOTALL)
SEQ_HINT = re.compile(rb'"seq":(\d+)')
FIELD_ORDER = ["seq", "t_ms", "channel", "value", "level"]


class AppendRejected(ForensicError):
    """An append that would break the log invariants; nothing was written"""


class SequenceGapError(AppendRejected):
    pass


class TimestampRegressionError(AppendRejected):
    pass


class DurableWriteError(ForensicError):
    """Storage failed while persisting a record"""


class LogReadError(ForensicError):
    """The log file cannot be read"""


def _crc(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


def quantize(value, precision: int) -> Decimal:
    """Fixed-precision decimal for a channel value"""
    try:
        number = Decimal(str(value)) if not isinstance(value, Decimal) else value
        return number.quantize(Decimal(1).scaleb(-precision), rounding=ROUND_HALF_EVEN)
    except InvalidOperation:
        raise ValidationError(f"not a decimal value: {value!r}") from None


def canonical_body(seq: int, t_ms: int, channel: str, value: Decimal, level: str) -> str:
    """Serialization the checksum covers, fields in fixed order"""
    return ('{"seq":%d,"t_ms":%d,"channel":%s,"value":%s,"level":%s}'
            % (seq, t_ms, json.dumps(channel), format(value, "f"), json.dumps(level)))


@dataclass(frozen=True)
class BlackboxRecord:
    seq: int
    t_ms: int
    channel: str
    value: Decimal
    level: str = "normal"
    crc: str = ""

    def __post_init__(self):
        if self.seq < 0 or self.t_ms < 0:
            raise ValidationError("seq and t_ms must be non-negative")
        if not IDENTIFIER.match(self.channel):
            raise ValidationError(f"channel is not an identifier: {self.channel!r}")
        if self.level not in LEVELS:
            raise ValidationError(f"unknown logging level: {self.level}")
        if not self.crc:
            object.__setattr__(self, "crc", _crc(self.canonical().encode()))

    def canonical(self) -> str:
        return canonical_body(self.seq, self.t_ms, self.channel, self.value, self.level)

    def encode(self) -> bytes:
        """Stored line: canonical body with the crc field, LF terminated"""
        body = self.canonical()
        return f'{body[:-1]},"crc":"{self.crc}"}}\n'.encode()


def decode_line(raw: bytes) -> Optional[BlackboxRecord]:
    """Record for one stored line (without LF), None when the line does not verify"""
    match = STORED_LINE.match(raw)
    if match is None:
        return None
    canonical = match.group(1) + b"}"
    crc = match.group(2).decode()
    if _crc(canonical) != crc:
        return None
    try:
        fields = json.loads(canonical.decode(), parse_float=Decimal)
        if list(fields) != FIELD_ORDER:
            return None
        record = BlackboxRecord(fields["seq"], fields["t_ms"], fields["channel"],
                                Decimal(str(fields["value"])), fields["level"], crc)
    except (ValueError, TypeError, ValidationError):
        return None
    return record


@dataclass
class IntegrityReport:
    path: str
    lines: int = 0
    records: list = field(default_factory=list, repr=False)
    crc_failures: list = field(default_factory=list)
    sequence_gaps: list = field(default_factory=list)
    timestamp_regressions: list = field(default_factory=list)
    torn_tail: bool = False
    levels: Counter = field(default_factory=Counter)

    @property
    def records_read(self) -> int:
        return len(self.records)

    @property
    def finding_count(self) -> int:
        return (len(self.crc_failures) + len(self.sequence_gaps)
                + len(self.timestamp_regressions) + int(self.torn_tail))

    @property
    def clean(self) -> bool:
        return self.finding_count == 0

    def render(self) -> str:
        lines = [f"log {self.path}: {self.records_read} record(s) verified, "
                 f"{'clean' if self.clean else f'{self.finding_count} finding(s)'}"]
        for level in LEVELS:
            lines.append(f"  level {level}: {self.levels.get(level, 0)}")
        for line_no, seq in self.crc_failures:
            where = f"line {line_no}" + ("" if seq is None else f" (seq {seq})")
            lines.append(f"  crc failure: {where}")
        for expected, found in self.sequence_gaps:
            lines.append(f"  sequence gap: expected seq {expected}, found {found}")
        for seq, previous, current in self.timestamp_regressions:
            lines.append(f"  timestamp regression: seq {seq} at t_ms {current} after t_ms {previous}")
        if self.torn_tail:
            lines.append("  torn trailing record")
        return "\n".join(lines) + "\n"


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise LogReadError(f"cannot read log {path}: {exc}") from exc


def verify_log(path) -> IntegrityReport:
    """Check every record's checksum plus seq and t_ms continuity"""
    data = _read_bytes(path)
    report = IntegrityReport(str(path))
    chunks = data.split(b"\n")
    tail = chunks.pop()
    if tail:
        report.torn_tail = True
    report.lines = len(chunks)

    last = None
    for index, raw in enumerate(chunks):
        record = decode_line(raw)
        if record is None:
            hint = SEQ_HINT.search(raw)
            report.crc_failures.append((index + 1, int(hint.group(1)) if hint else None))
            continue
        # a corrupt line keeps its slot
        expected = index if last is None else last[1].seq + (index - last[0])
        if record.seq != expected:
            report.sequence_gaps.append((expected, record.seq))
        if last is not None and record.t_ms < last[1].t_ms:
            report.timestamp_regressions.append((record.seq, last[1].t_ms, record.t_ms))
        report.levels[record.level] += 1
        report.records.append(record)
        last = (index, record)

    if report.clean:
        logger.debug("Log verified clean", path=str(path), records=report.records_read)
    else:
        logger.warning("Log has integrity findings", path=str(path), findings=report.finding_count)
    return report


def read_log(path) -> list:
    """Records whose checksum verifies, in file order; a torn tail is ignored"""
    return verify_log(path).records


class BlackboxLog:
    """Single-writer handle on a .bblog file"""

    def __init__(self, path, precision: Optional[Mapping[str, int]] = None,
                 default_precision: int = DEFAULT_PRECISION):
        self.path = Path(path)
        self.precision = dict(precision or {})
        self.default_precision = default_precision
        self._last: Optional[BlackboxRecord] = None
        self._recovered = False

    def precision_for(self, channel: str) -> int:
        return self.precision.get(channel, self.default_precision)

    def _recover(self):
        if self._recovered:
            return
        if self.path.exists():
            data = _read_bytes(self.path)
            cut = data.rfind(b"\n") + 1
            if cut < len(data):
                logger.warning("Discarding torn trailing record", path=str(self.path),
                               bytes=len(data) - cut)
                try:
                    with open(self.path, "r+b") as handle:
                        handle.truncate(cut)
                        handle.flush()
                        os.fsync(handle.fileno())
                except OSError as exc:
                    raise DurableWriteError(f"cannot repair torn tail of {self.path}: {exc}") from exc
            report = verify_log(self.path)
            if not report.clean:
                raise LogReadError(
                    f"log {self.path} has {report.finding_count} integrity finding(s); refusing to append")
            self._last = report.records[-1] if report.records else None
        self._recovered = True

    @property
    def next_seq(self) -> int:
        self._recover()
        return 0 if self._last is None else self._last.seq + 1

    @property
    def last_t_ms(self) -> Optional[int]:
        self._recover()
        return None if self._last is None else self._last.t_ms

    def append(self, seq: int, t_ms: int, channel: str, value, level: str = "normal") -> BlackboxRecord:
        """Persist one record; it is on stable storage when this returns"""
        expected = self.next_seq
        if seq != expected:
            raise SequenceGapError(f"sequence gap: expected seq {expected}, got {seq}")
        if self._last is not None and t_ms < self._last.t_ms:
            raise TimestampRegressionError(
                f"timestamp regression: t_ms {t_ms} is before {self._last.t_ms}")
        record = BlackboxRecord(seq, t_ms, channel, quantize(value, self.precision_for(channel)), level)
        try:
            with open(self.path, "ab") as handle:
                handle.write(record.encode())
                handle.flush()
                os.fsync(handle.fileno())
        except OSError as exc:
            raise DurableWriteError(f"cannot persist seq {seq} to {self.path}: {exc}") from exc
        self._last = record
        logger.debug("Record appended", seq=seq, channel=channel, t_ms=t_ms)
        return record

    def extend(self, records: Iterable[BlackboxRecord]) -> list:
        return [self.append(r.seq, r.t_ms, r.channel, r.value, r.level) for r in records]

    def records(self) -> list:
        return read_log(self.path)

    def verify(self) -> IntegrityReport:
        return verify_log(self.path)


def append_record(log: BlackboxLog, seq: int, t_ms: int, channel: str, value,
                  level: str = "normal") -> BlackboxRecord:
    """Append one record to the log; see BlackboxLog.append"""
    return log.append(seq, t_ms, channel, value, level)


def file_digest(path) -> str:
    """sha256 hex digest of a file's bytes"""
    return hashlib.sha256(_read_bytes(path)).hexdigest()


def export_log(src, dest) -> str:
    """Copy a log off-vehicle, write a .sha256 sidecar and confirm the copy"""
    src, dest = Path(src), Path(dest)
    source_digest = file_digest(src)
    try:
        shutil.copyfile(src, dest)
    except OSError as exc:
        raise DurableWriteError(f"cannot export {src} to {dest}: {exc}") from exc
    digest = file_digest(dest)
    if digest != source_digest:
        raise DurableWriteError(f"exported copy {dest} does not match {src}")
    sidecar = dest.with_name(dest.name + ".sha256")
    try:
        sidecar.write_text(f"{digest}  {dest.name}\n")
    except OSError as exc:
        raise DurableWriteError(f"cannot write digest file {sidecar}: {exc}") from exc
    report = verify_log(dest)
    logger.info("Log exported", source=str(src), destination=str(dest), sha256=digest,
                clean=report.clean)
    return digest


COMPARATORS = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}
COMPARATOR_ALIASES = {"≥": ">=", "≤": "<="}
RULE_LINE = re.compile(
    r"(?P<channel>[A-Za-z_][A-Za-z0-9_]*)\s*(?P<cmp>>=|<=|>|<|≥|≤)\s*(?P<threshold>-?\d+(?:\.\d+)?)"
    r"\s*->\s*(?P<prop>[A-Za-z_][A-Za-z0-9_]*)\s+w=(?P<w>\d+(?:\.\d+)?)\Z")


@dataclass(frozen=True)
class ThresholdRule:
    """channel comparator threshold -> property_name w=weight"""
    channel: str
    comparator: str
    threshold: Decimal
    property_name: str
    weight: Fraction

    def __post_init__(self):
        if self.comparator in COMPARATOR_ALIASES:
            object.__setattr__(self, "comparator", COMPARATOR_ALIASES[self.comparator])
        if self.comparator not in COMPARATORS:
            raise ValidationError(f"unknown comparator: {self.comparator}")
        if not (0 < self.weight <= 1):
            raise ValidationError(f"rule weight {self.weight} outside (0, 1]")

    def matches(self, value: Decimal) -> bool:
        return COMPARATORS[self.comparator](value, self.threshold)

    def render(self) -> str:
        return (f"{self.channel} {self.comparator} {format(self.threshold, 'f')} -> "
                f"{self.property_name} w={format_weight(self.weight)}")


def parse_rules(text: str) -> list:
    """Threshold rules from text, one per line"""
    rules = []
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("//", 1)[0].strip()
        if not line:
            continue
        match = RULE_LINE.match(line)
        if match is None:
            raise ValidationError(f"rules line {number}: expected 'channel cmp threshold -> property w=W'")
        if match["prop"] == ANY_PROPERTY.name:
            raise ValidationError(f"rules line {number}: 'any' is reserved")
        if any(rule.property_name == match["prop"] for rule in rules):
            raise ValidationError(f"rules line {number}: property {match['prop']} already has a rule")
        rules.append(ThresholdRule(match["channel"], match["cmp"], Decimal(match["threshold"]),
                                   match["prop"], parse_weight(match["w"])))
    return rules


class IngestMode(str, Enum):
    SAMPLES = "samples"
    TIMELINE = "timeline"


def _excursions(samples: list, rule: ThresholdRule) -> list:
    """(first index, last index) of each maximal run of samples satisfying the rule"""
    spans, start = [], None
    for index, record in enumerate(samples):
        if rule.matches(record.value):
            if start is None:
                start = index
        elif start is not None:
            spans.append((start, index - 1))
            start = None
    if start is not None:
        spans.append((start, len(samples) - 1))
    return spans


def _samples_sequence(samples, spans, rule, prop) -> tuple:
    return tuple(
        Observation(prop, last - first + 1, 0, rule.weight, samples[first].t_ms,
                    f"{rule.property_name}_{n}")
        for n, (first, last) in enumerate(spans, 1)
    )


def _timeline_sequence(samples, spans, rule, prop) -> tuple:
    observations = []
    gaps = 0

    def gap(first):
        nonlocal gaps
        gaps += 1
        observations.append(Observation(ANY_PROPERTY, 1, None, Fraction(1), samples[first].t_ms,
                                        f"{rule.property_name}_gap_{gaps}"))

    cursor = 0
    for n, (first, last) in enumerate(spans, 1):
        if first > cursor:
            gap(cursor)
        observations.append(Observation(prop, 1, None, rule.weight, samples[first].t_ms,
                                        f"{rule.property_name}_{n}"))
        cursor = last + 1
    if spans and cursor < len(samples):
        gap(cursor)
    return tuple(observations)


def derive_observations(records: Iterable[BlackboxRecord], rules: Iterable[ThresholdRule],
                        mode: IngestMode = IngestMode.SAMPLES, label: str = "blackbox",
                        properties: Optional[Mapping[str, PropertyDef]] = None) -> EvidentialStatement:
    """
    One observation sequence per rule, labelled by its property name.
    Without a properties table the observations carry the property name only;
    members are bound when the output is merged into a case.
    """
    by_channel = {}
    for record in sorted(records, key=lambda r: r.seq):
        by_channel.setdefault(record.channel, []).append(record)
    build = _timeline_sequence if IngestMode(mode) is IngestMode.TIMELINE else _samples_sequence

    sequences = []
    for rule in rules:
        samples = by_channel.get(rule.channel)
        if not samples:
            raise ValidationError(f"rule for {rule.property_name} names unknown channel {rule.channel}")
        if properties is None:
            prop = PropertyDef(rule.property_name, frozenset())
        elif rule.property_name in properties:
            prop = properties[rule.property_name]
        else:
            raise ValidationError(f"property {rule.property_name} is not declared")
        spans = _excursions(samples, rule)
        if not spans:
            logger.warning("Rule never triggered; keeping an empty sequence", property=rule.property_name,
                           channel=rule.channel)
        sequences.append(ObservationSequence(rule.property_name, build(samples, spans, rule, prop)))

    logger.info("Observations derived", evidence=label, mode=IngestMode(mode).value, sequences=len(sequences),
                observations=sum(len(os) for os in sequences))
    return EvidentialStatement(label, tuple(sequences))
