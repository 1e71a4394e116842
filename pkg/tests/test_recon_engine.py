import random
from fractions import Fraction

import pytest

from case_model import (
    ANY_PROPERTY,
    Aggregator,
    EvidentialStatement,
    Partition,
    PropertyDef,
    ReconConfig,
    Run,
    StateMachine,
    ValidationError,
    length_interval,
)
from recon_engine import (
    LatticeRefusal,
    OracleRefusal,
    check_theory,
    enumerate_runs_oracle,
    explains,
    maximal_consistent_subsets,
    rank_theories,
    reconstruct,
    render_backtraces,
    render_ranking,
    render_verdict,
)
from tests.conftest import BRAKE, P_FAIL, P_LEAK, P_OK, obs, seq

CAP4 = ReconConfig(max_run_length=4)


def statement(*sequences, label="es1"):
    return EvidentialStatement(label, tuple(sequences))


def runs_of(result):
    return [list(bt.run.states) for bt in result]


def test_explains_single_exact_segment():
    assert explains(BRAKE, Run(("ok",)), seq("s", obs(P_OK, 1, 0))) == [Partition((0, 1))]


def test_explains_rejects_order_mismatch():
    run = Run(("ok", "leak"), ("wear",))
    assert explains(BRAKE, run, seq("s", obs(P_LEAK, 1, 0), obs(P_OK, 1, 0))) == []


def test_explains_finds_the_only_split(os_sensor):
    run = Run(("ok", "ok", "leak", "fail"), ("tick", "wear", "burst"))
    assert explains(BRAKE, run, os_sensor) == [Partition((0, 3, 4))]


def test_explains_lists_partitions_in_lexicographic_order():
    run = Run(("ok", "ok", "ok"), ("tick", "tick"))
    story = seq("s", obs(ANY_PROPERTY, 0, None), obs(P_OK, 0, None))
    partitions = explains(BRAKE, run, story)
    assert [p.boundaries for p in partitions] == [(0, 0, 3), (0, 1, 3), (0, 2, 3), (0, 3, 3)]
    assert all(sum(p.lengths) == 3 for p in partitions)


def test_reconstruct_brake_sensor(os_sensor):
    result = reconstruct(BRAKE, statement(os_sensor), CAP4)
    assert result.complete
    assert runs_of(result) == [
        ["ok", "leak", "fail"],
        ["ok", "ok", "leak", "fail"],
        ["ok", "leak", "leak", "fail"],
    ]
    assert result[1].run.events == ("tick", "wear", "burst")
    assert all(bt.score == Fraction("0.81") for bt in result)
    assert result[0].partition_for("os_sensor") == Partition((0, 2, 3))


def test_reconstruct_prunes_unreachable_lengths():
    story = seq("long", obs(P_OK, 5, 0))
    assert len(reconstruct(BRAKE, statement(story), CAP4)) == 0


def test_reconstruct_without_evidence():
    result = reconstruct(BRAKE, statement(), ReconConfig(max_run_length=1))
    assert runs_of(result) == [["ok"]]
    assert result[0].score == 1


def test_reconstruct_reports_truncation(os_sensor):
    result = reconstruct(BRAKE, statement(os_sensor), ReconConfig(max_run_length=4, max_backtraces=2))
    assert not result.complete
    assert result.cap_exceeded
    assert runs_of(result) == [["ok", "leak", "fail"], ["ok", "ok", "leak", "fail"]]


def test_reconstruct_anchors_final_states():
    machine = StateMachine(("a", "b"), ("go", "stay"), (("a", "go", "b"), ("b", "stay", "b")),
                           frozenset({"a"}), frozenset({"b"}))
    anchored = reconstruct(machine, statement(), ReconConfig(max_run_length=2))
    assert runs_of(anchored) == [["a", "b"]]
    loose = reconstruct(machine, statement(), ReconConfig(max_run_length=2, anchor_final=False))
    assert runs_of(loose) == [["a"], ["a", "b"]]


def test_reconstruct_rejects_invalid_machine():
    machine = StateMachine(("a",), (), (), frozenset())
    with pytest.raises(ValidationError):
        reconstruct(machine, statement())


def test_oracle_matches_engine_on_brake(os_sensor):
    es = statement(os_sensor)
    assert enumerate_runs_oracle(BRAKE, es, CAP4) == reconstruct(BRAKE, es, CAP4)


def test_oracle_without_transitions():
    machine = StateMachine(("s0",), (), (), frozenset({"s0"}))
    story = seq("s", obs(PropertyDef("P_s0", frozenset({"s0"})), 2, 0))
    assert len(enumerate_runs_oracle(machine, statement(story))) == 0


def test_oracle_forced_self_loop():
    machine = StateMachine(("s0",), ("tick",), (("s0", "tick", "s0"),), frozenset({"s0"}))
    story = seq("s", obs(PropertyDef("P_s0", frozenset({"s0"})), 3, 0))
    result = enumerate_runs_oracle(machine, statement(story), ReconConfig(max_run_length=8))
    assert runs_of(result) == [["s0", "s0", "s0"]]


def test_oracle_scale_guard():
    with pytest.raises(OracleRefusal):
        enumerate_runs_oracle(BRAKE, statement(), ReconConfig(max_run_length=13))


def test_check_theory_agrees(os_sensor, theory_t1):
    verdict = check_theory(BRAKE, statement(os_sensor), theory_t1, CAP4)
    assert verdict.agrees
    assert verdict.backtraces[0].run.states == ("ok", "leak", "fail")
    assert verdict.diagnosis == ()


def test_check_theory_disagrees(os_sensor, theory_t2):
    verdict = check_theory(BRAKE, statement(os_sensor), theory_t2, CAP4)
    assert not verdict.agrees
    assert verdict.backtraces == ()
    assert [sorted(s.included) for s in verdict.diagnosis] == [["os_sensor"]]
    assert verdict.diagnosis[0].excluded == frozenset({"T2"})


def test_check_theory_vacuous():
    verdict = check_theory(BRAKE, statement(), seq("T0"), ReconConfig(max_run_length=2))
    assert verdict.agrees
    assert verdict.backtraces[0].run.states == ("ok",)


def test_check_theory_is_sound(os_sensor, theory_t1):
    verdict = check_theory(BRAKE, statement(os_sensor), theory_t1, ReconConfig(max_run_length=6))
    for bt in verdict.backtraces:
        assert explains(BRAKE, bt.run, os_sensor)
        assert explains(BRAKE, bt.run, theory_t1)


def test_check_theory_rejects_label_clash(os_sensor):
    with pytest.raises(ValidationError):
        check_theory(BRAKE, statement(os_sensor), seq("os_sensor"), CAP4)


def test_rank_theories_prefers_longer(os_sensor, theory_t1, theory_short):
    ranking = rank_theories(BRAKE, statement(os_sensor), [theory_short, theory_t1], CAP4)
    assert [label for label, _ in ranking] == ["T1", "T_short"]


def test_rank_theories_prefers_heavier(os_sensor):
    a = seq("A", obs(ANY_PROPERTY, 0, None, "0.9"), obs(P_FAIL, 1, 0, "0.9"))
    b = seq("B", obs(ANY_PROPERTY, 0, None, "0.5"), obs(P_FAIL, 1, 0, "0.5"))
    ranking = rank_theories(BRAKE, statement(os_sensor), [b, a], CAP4)
    assert [label for label, _ in ranking] == ["A", "B"]


def test_rank_theories_puts_disagreement_last(os_sensor, theory_t1, theory_t2):
    ranking = rank_theories(BRAKE, statement(os_sensor), [theory_t2, theory_t1], CAP4)
    assert [(label, v.agrees) for label, v in ranking] == [("T1", True), ("T2", False)]


def test_maximal_consistent_subsets_brake(os_sensor, os_w):
    subsets = maximal_consistent_subsets(BRAKE, statement(os_sensor, os_w), CAP4)
    assert [(sorted(s.included), s.score) for s in subsets] == [
        (["os_sensor"], Fraction("0.81")),
        (["os_w"], Fraction("0.5")),
    ]
    assert subsets[0].excluded == frozenset({"os_w"})
    assert subsets[1].witness.run.states == ("ok", "ok", "ok")


def test_maximal_consistent_subsets_when_consistent(os_sensor, theory_t1):
    subsets = maximal_consistent_subsets(BRAKE, statement(os_sensor, theory_t1), CAP4)
    assert len(subsets) == 1
    assert subsets[0].included == frozenset({"os_sensor", "T1"})
    assert subsets[0].excluded == frozenset()


def test_maximal_consistent_subsets_of_nothing():
    subsets = maximal_consistent_subsets(BRAKE, statement(), CAP4)
    assert len(subsets) == 1
    assert subsets[0].included == frozenset()
    assert subsets[0].score == 1


def test_maximal_consistent_subsets_with_workers(os_sensor, os_w, theory_t2):
    es = statement(os_sensor, os_w, theory_t2)
    assert maximal_consistent_subsets(BRAKE, es, CAP4, workers=4) == maximal_consistent_subsets(BRAKE, es, CAP4)


def test_lattice_guard():
    es = statement(*[seq(f"s{i}") for i in range(17)])
    with pytest.raises(LatticeRefusal):
        maximal_consistent_subsets(BRAKE, es, CAP4)


def test_evidence_monotonicity(os_sensor, theory_t1):
    cfg = ReconConfig(max_run_length=6)
    base = {bt.run for bt in reconstruct(BRAKE, statement(os_sensor), cfg)}
    narrowed = {bt.run for bt in reconstruct(BRAKE, statement(os_sensor, theory_t1), cfg)}
    assert narrowed <= base


def test_scores_ignore_sequence_order():
    a = seq("a", obs(ANY_PROPERTY, 0, None, "0.9"), obs(P_FAIL, 1, 0, "0.7"))
    b = seq("b", obs(P_OK, 1, None, "0.6"), obs(ANY_PROPERTY, 0, None, "0.8"))
    one = reconstruct(BRAKE, statement(a, b), CAP4)
    two = reconstruct(BRAKE, statement(b, a), CAP4)
    assert one == two


def test_scaling_weights_scales_subset_scores(os_sensor, os_w):
    c = Fraction(1, 2)
    stories = (os_sensor, os_w)

    def scaled(story):
        return seq(story.label, *[obs(o.property, o.min, o.max, o.w * c, o.t) for o in story.observations])

    def observation_count(subset):
        return sum(len(story) for story in stories if story.label in subset.included)

    before = maximal_consistent_subsets(BRAKE, statement(*stories), CAP4)
    after = maximal_consistent_subsets(BRAKE, statement(*[scaled(s) for s in stories]), CAP4)
    assert {s.included for s in before} == {s.included for s in after}
    by_included = {s.included: s for s in after}
    for old in before:
        assert by_included[old.included].score == old.score * c ** observation_count(old)
    # os_sensor holds two observations, os_w one, so scaling reorders them
    assert [s.score for s in after] == [Fraction(1, 4), Fraction(81, 400)]
    assert [s.included for s in after] == [frozenset({"os_w"}), frozenset({"os_sensor"})]

    same_size = [s for s in before if observation_count(s) == observation_count(before[0])]
    rescaled = [by_included[s.included] for s in same_size]
    assert rescaled == sorted(rescaled, key=lambda s: s.rank_key())


def test_long_forced_run_is_reconstructed():
    machine = StateMachine(("s0",), ("tick",), (("s0", "tick", "s0"),), frozenset({"s0"}))
    p_s0 = PropertyDef("P_s0", frozenset({"s0"}))
    result = reconstruct(machine, statement(seq("stuck", obs(p_s0, 1200, 0))), ReconConfig(max_run_length=1200))
    (bt,) = result
    assert bt.run.states == ("s0",) * 1200
    assert bt.run.events == ("tick",) * 1199
    assert bt.partitions == (("stuck", Partition((0, 1200))),)


def test_backward_walk_keeps_lexicographic_order():
    machine = StateMachine(("a", "b", "c"), ("x", "y"),
                           (("a", "x", "b"), ("a", "y", "b"), ("b", "x", "c"), ("b", "y", "c")),
                           frozenset({"a"}))
    result = reconstruct(machine, statement(seq("s", obs(ANY_PROPERTY, 3, 0))), ReconConfig(max_run_length=3))
    assert [bt.run.events for bt in result] == [("x", "x"), ("x", "y"), ("y", "x"), ("y", "y")]
    assert result == enumerate_runs_oracle(machine, statement(seq("s", obs(ANY_PROPERTY, 3, 0))),
                                           ReconConfig(max_run_length=3))


def test_render_backtraces(os_sensor):
    text = render_backtraces("es1", reconstruct(BRAKE, statement(os_sensor), CAP4))
    assert text.splitlines()[:4] == [
        "evidence es1: 3 backtrace(s), aggregator=product, complete",
        "#1 score=0.810000000 length=3",
        "  run: ok -wear-> leak -burst-> fail",
        "  os_sensor: [0, 2, 3]",
    ]
    assert "  run: ok -tick-> ok -wear-> leak -burst-> fail" in text


def test_render_is_deterministic(os_sensor, os_w, theory_t1, theory_t2):
    es = statement(os_sensor, os_w)

    def report():
        verdict = check_theory(BRAKE, es, theory_t2, CAP4)
        ranking = rank_theories(BRAKE, statement(os_sensor), [theory_t2, theory_t1], CAP4)
        return render_verdict("T2", verdict) + render_ranking(ranking)

    first = report()
    assert first == report()
    assert "included={os_sensor} excluded={T2, os_w}" in first


def _random_property(rng, states):
    if rng.random() < 0.25:
        return ANY_PROPERTY
    members = frozenset(rng.sample(states, rng.randint(1, len(states))))
    return PropertyDef("P_" + "_".join(sorted(members)), members)


def _random_instance(rng):
    states = [f"q{i}" for i in range(rng.randint(1, 5))]
    events = [f"e{i}" for i in range(rng.randint(1, 3))]
    transitions = {(rng.choice(states), rng.choice(events), rng.choice(states))
                   for _ in range(rng.randint(0, 10))}
    machine = StateMachine(
        tuple(states), tuple(events), tuple(sorted(transitions)),
        frozenset(rng.sample(states, rng.randint(1, len(states)))),
        frozenset(rng.sample(states, rng.randint(0, min(2, len(states)))) if rng.random() < 0.5 else ()),
    )
    sequences = []
    for s in range(rng.randint(0, 2)):
        observations = [
            obs(_random_property(rng, states), rng.randint(0, 2),
                None if rng.random() < 0.3 else rng.randint(0, 2),
                rng.choice(["1.0", "0.9", "0.5", "0.25"]))
            for _ in range(rng.randint(0, 3))
        ]
        sequences.append(seq(f"s{s}", *observations))
    cfg = ReconConfig(
        max_run_length=rng.randint(1, 8),
        max_backtraces=rng.choice([1, 3, 1000]),
        aggregator=rng.choice(list(Aggregator)),
        anchor_final=rng.random() < 0.7,
    )
    return machine, statement(*sequences), cfg


@pytest.mark.parametrize("seed", range(500))
def test_engine_matches_oracle(seed):
    machine, es, cfg = _random_instance(random.Random(seed))
    expected = enumerate_runs_oracle(machine, es, cfg)
    result = reconstruct(machine, es, cfg)
    assert result == expected
    for bt in result:
        assert bt.run.is_valid_for(machine, cfg.anchor_final)
        assert len(bt.run) <= cfg.max_run_length
        for story in es.sequences:
            assert length_interval(story).contains(len(bt.run)) or not story.observations
