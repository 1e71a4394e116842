from fractions import Fraction
from pathlib import Path

import pytest

from case_dsl import parse_case
from case_model import ANY_PROPERTY, Observation, ObservationSequence, PropertyDef, StateMachine
from forensic_logging import configure_logging

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
CASES = sorted((FIXTURES / "cases").glob("*.fcase"))

P_OK = PropertyDef("P_ok", frozenset({"ok"}))
P_LEAK = PropertyDef("P_leak", frozenset({"leak"}))
P_FAIL = PropertyDef("P_fail", frozenset({"fail"}))
P_LOW = PropertyDef("P_low", frozenset({"leak", "fail"}))

BRAKE = StateMachine(
    states=("ok", "leak", "fail"),
    events=("wear", "burst", "tick"),
    transitions=(
        ("ok", "wear", "leak"),
        ("leak", "burst", "fail"),
        ("ok", "tick", "ok"),
        ("leak", "tick", "leak"),
    ),
    initial=frozenset({"ok"}),
)


def obs(prop, min_, max_, w="1.0", t=None, label=""):
    return Observation(prop, min_, max_, Fraction(w), t, label)


def seq(label, *observations):
    return ObservationSequence(label, tuple(observations))


@pytest.fixture(autouse=True)
def quiet_logging():
    configure_logging(0)


@pytest.fixture
def brake():
    return BRAKE


@pytest.fixture
def os_sensor():
    return seq("os_sensor", obs(ANY_PROPERTY, 0, None, "0.9"), obs(P_FAIL, 1, 0, "0.9"))


@pytest.fixture
def os_w():
    return seq("os_w", obs(P_OK, 3, 0, "0.5"))


@pytest.fixture
def theory_t1():
    return seq("T1", obs(P_OK, 1, None), obs(P_LEAK, 1, None), obs(P_FAIL, 1, 0))


@pytest.fixture
def theory_t2():
    return seq("T2", obs(P_OK, 1, None), obs(P_FAIL, 1, 0))


@pytest.fixture
def theory_short():
    return seq("T_short", obs(ANY_PROPERTY, 0, None), obs(P_FAIL, 1, 0))


@pytest.fixture
def brake_path():
    return FIXTURES / "cases" / "brake.fcase"


@pytest.fixture
def brake_spec(brake_path):
    return parse_case(brake_path.read_text(encoding="utf-8"))
