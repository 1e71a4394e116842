import random
from fractions import Fraction

import pytest

from case_dsl import (
    CaseParseError,
    check_case,
    format_case,
    has_errors,
    parse_case,
    parse_fragment,
)
from case_model import ANY, ANY_PROPERTY, EvidentialStatement, ValidationError
from tests.conftest import BRAKE, CASES, FIXTURES

MACHINE = """
  machine {
    states { ok init; leak; fail; }
    events { wear burst tick }
    transitions { ok -- wear --> leak; leak -- burst --> fail; ok -- tick --> ok; leak -- tick --> leak; }
  }
"""


def case(body: str, name: str = "t") -> str:
    return f'case "{name}" {{{MACHINE}{body}\n}}\n'


def messages(source: str) -> list:
    return [d.message for d in check_case(parse_case(source))]


def test_observation_fields_follow_declaration():
    spec = parse_case(case("""
  property P_fail = {fail};
  observation o1 = (P_fail, t=1500, min=1, max=0, w=0.9);
  sequence s1 = [o1];
"""))
    o1 = spec.resolve_observation("o1")
    assert o1.property.name == "P_fail"
    assert (o1.t, o1.min, o1.max, o1.w) == (1500, 1, 0, Fraction(9, 10))


def test_unbounded_observation_without_timestamp():
    spec = parse_case(case("observation o2 = (any, min=0, max=*, w=1.0);"))
    o2 = spec.resolve_observation("o2")
    assert o2.property == ANY_PROPERTY
    assert o2.t is None
    assert o2.max is None


def test_missing_comma_is_reported_at_the_offending_token():
    source = case("""
  observation o1 = (any, min=1, max=0, w=1.0);
  observation o2 = (any, min=1, max=0, w=1.0);
  sequence s1 = [o1 o2];""")
    with pytest.raises(CaseParseError) as info:
        parse_case(source)
    diag = info.value.diagnostics[0]
    line = source.splitlines()[diag.line - 1]
    assert line[diag.column - 1:].startswith("o2]")
    assert "expected ','" in diag.message


def test_unknown_token_has_position():
    with pytest.raises(CaseParseError) as info:
        parse_case('case "x" {\n  machine { states { a init; } events { } transitions { } }\n  @\n}')
    diag = info.value.diagnostics[0]
    assert (diag.line, diag.column) == (3, 3)
    assert diag.is_error


@pytest.mark.parametrize("digit", ["²", "٣", "৭"])
def test_non_ascii_digit_is_an_unknown_token(digit):
    with pytest.raises(CaseParseError) as info:
        parse_case(f'case "x" {{ {digit} }}')
    diag = info.value.diagnostics[0]
    assert (diag.line, diag.column) == (1, 12)
    assert "unknown token" in diag.message


def test_brake_fixture_is_clean(brake_spec):
    assert check_case(brake_spec) == []
    assert brake_spec.machine == BRAKE


def test_undeclared_observation_is_named():
    found = messages(case("""
  observation o1 = (any, min=1, max=0, w=1.0);
  sequence s1 = [o1, o9];"""))
    assert len(found) == 1
    assert "o9" in found[0]


def test_non_chronological_timestamps():
    found = messages(case("""
  observation a = (any, t=2000, min=1, max=0, w=1.0);
  observation b = (any, t=1000, min=1, max=0, w=1.0);
  sequence s1 = [a, b];"""))
    assert len(found) == 1
    assert "non-chronological timestamps" in found[0]


@pytest.mark.parametrize("body, fragment", [
    ("property P = {ok};\n  property P = {leak};", "duplicate property P"),
    ("property P = {ghost};", "undeclared state ghost"),
    ("property any = {ok};", "reserved"),
    ("observation o = (P_x, min=1, max=0, w=1.0);", "undeclared property P_x"),
    ("observation o = (any, min=1, max=0, w=1.0);\n  observation o = (any, min=1, max=0, w=1.0);",
     "duplicate observation o"),
    ("observation o = (any, min=1, max=0, w=0.0);", "outside (0, 1]"),
    ("observation o = (any, min=1, max=0, w=1);\n  sequence s = [o];\n  theory s = [o];",
     "duplicate sequence or theory s"),
    ("evidence e = {s};", "undeclared sequence s"),
    ("observation o = (any, min=1, max=0, w=1);\n  theory t = [o];\n  evidence e = {t};",
     "cannot include theory t"),
])
def test_check_case_errors(body, fragment):
    found = check_case(parse_case(case(body)))
    assert has_errors(found)
    assert any(fragment in d.message for d in found if d.is_error)


def test_empty_lists_are_warnings():
    found = check_case(parse_case(case("sequence s = [];\n  evidence e = {};\n  evidence f = {s, s};")))
    assert not has_errors(found)
    text = " ".join(d.message for d in found)
    assert "empty sequence s" in text
    assert "empty evidence e" in text
    assert "more than once" in text


def test_machine_findings_point_at_source():
    source = 'case "m" {\n  machine {\n    states { ok init; }\n    events { go }\n' \
             '    transitions { ok -- go --> ghost; }\n  }\n}\n'
    found = check_case(parse_case(source))
    assert len(found) == 1
    assert found[0].line == 5
    assert "ghost" in found[0].message


def test_diagnostics_are_sorted_by_position():
    found = check_case(parse_case((FIXTURES / "invalid" / "undeclared.fcase").read_text()))
    assert len(found) >= 3
    assert found == sorted(found, key=lambda d: (d.line, d.column, d.message))


@pytest.mark.parametrize("path", sorted((FIXTURES / "invalid").glob("*.fcase")), ids=lambda p: p.stem)
def test_invalid_fixtures_report_errors(path):
    try:
        found = check_case(parse_case(path.read_text()))
    except CaseParseError as exc:
        found = exc.diagnostics
    assert has_errors(found)


def test_malformed_fixture_points_at_the_missing_semicolon():
    with pytest.raises(CaseParseError) as info:
        parse_case((FIXTURES / "invalid" / "malformed.fcase").read_text())
    diag = info.value.diagnostics[0]
    assert (diag.line, diag.column) == (6, 5)


def test_format_omits_absent_timestamp_and_prints_star():
    text = format_case(parse_case(case("observation o = (any, min=0, max=*, w=0.50);")))
    assert "observation o = (any, min=0, max=*, w=0.5);" in text
    assert "t=" not in text


def test_format_is_canonical_for_brake(brake_path):
    source = brake_path.read_text()
    assert format_case(parse_case(source)) == source


def test_corpus_is_large_enough():
    assert len(CASES) >= 20


@pytest.mark.parametrize("path", CASES, ids=lambda p: p.stem)
def test_corpus_round_trip(path):
    spec = parse_case(path.read_text())
    assert not has_errors(check_case(spec))
    text = format_case(spec)
    assert parse_case(text) == spec
    assert format_case(parse_case(text)) == text


def _random_case(rng: random.Random) -> str:
    states = [f"s{i}" for i in range(rng.randint(1, 5))]
    events = [f"e{i}" for i in range(rng.randint(0, 3))]
    initial = set(rng.sample(states, rng.randint(1, len(states))))
    final = set(rng.sample(states, rng.randint(0, len(states))))
    transitions = []
    if events:
        for _ in range(rng.randint(0, 6)):
            transitions.append((rng.choice(states), rng.choice(events), rng.choice(states)))
    properties = []
    for i in range(rng.randint(0, 3)):
        if rng.random() < 0.2:
            properties.append(f"property P{i} = any;")
        else:
            members = rng.sample(states, rng.randint(1, len(states)))
            properties.append(f"property P{i} = {{{', '.join(members)}}};")
    prop_names = [ANY] + [f"P{i}" for i in range(len(properties))]
    observations = []
    t = 0
    for i in range(rng.randint(0, 5)):
        fields = [rng.choice(prop_names)]
        if rng.random() < 0.5:
            t += rng.randint(0, 500)
            fields.append(f"t={t}")
        fields.append(f"min={rng.randint(0, 3)}")
        fields.append("max=*" if rng.random() < 0.3 else f"max={rng.randint(0, 3)}")
        fields.append(f"w={rng.choice(['1', '1.0', '0.5', '0.25', '0.125000', '0.999999999'])}")
        observations.append(f"observation o{i} = ({', '.join(fields)});")
    labels = [f"o{i}" for i in range(len(observations))]
    sequences, theories = [], []
    for i in range(rng.randint(0, 3)):
        members = sorted(rng.sample(labels, rng.randint(0, len(labels))), key=lambda m: int(m[1:]))
        keyword = "theory" if rng.random() < 0.3 else "sequence"
        (theories if keyword == "theory" else sequences).append(f"{keyword} q{i} = [{', '.join(members)}];")
    seq_labels = [line.split()[1] for line in sequences]
    statements = [
        f"evidence es{i} = {{{', '.join(rng.sample(seq_labels, rng.randint(0, len(seq_labels))))}}};"
        for i in range(rng.randint(0, 2))
    ]
    lines = [f'case "random {rng.randint(0, 999)}" {{', "machine {", "states {"]
    for state in states:
        marks = [m for m, on in (("init", state in initial), ("final", state in final)) if on]
        lines.append(" ".join([state] + marks) + ";")
    lines.append("}  events {" + " ".join(events) + "}")
    lines.append("transitions {")
    lines.extend(f"{a} -- {e} --> {b}; // edge" for a, e, b in transitions)
    lines.append("} }")
    lines.extend(properties + observations)
    body = sequences + theories + statements
    rng.shuffle(body)
    lines.extend(body)
    lines.append("}")
    return "\n".join(lines)


@pytest.mark.parametrize("seed", range(200))
def test_random_cases_round_trip(seed):
    source = _random_case(random.Random(seed))
    spec = parse_case(source)
    assert parse_case(format_case(spec)) == spec


def test_parse_fragment_merges_declarations(brake_spec):
    merged = parse_fragment(
        "observation b1 = (P_fail, t=5000, min=2, max=0, w=0.95);\n"
        "sequence blackbox_fail = [b1];\n"
        "evidence blackbox = {blackbox_fail};\n",
        brake_spec,
    )
    assert check_case(merged) == []
    statement = merged.resolve_statement("blackbox")
    assert isinstance(statement, EvidentialStatement)
    assert statement.sequences[0].observations[0].property.members == frozenset({"fail"})


def test_parse_fragment_collisions_surface_in_check(brake_spec):
    merged = parse_fragment("sequence os_w = [];", brake_spec)
    assert any("duplicate sequence or theory os_w" in d.message for d in check_case(merged))


def test_resolve_rejects_unknown_labels(brake_spec):
    with pytest.raises(ValidationError):
        brake_spec.resolve_statement("nope")
    with pytest.raises(ValidationError):
        brake_spec.resolve_theory("os_sensor")
