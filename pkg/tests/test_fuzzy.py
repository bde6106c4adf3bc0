import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabridge.fuzzy import (
    EVIDENCE,
    EvidenceSet,
    MembershipCurve,
    StratificationError,
    apply_curves,
    eval_expr,
    forward_chain,
    load_evidence,
    round_bound,
)
from metabridge.rules import Rule, parse_expr, parse_rule

from oracles import eval_oracle, fixpoint_oracle, random_expr, random_fuzzy_kb


def _rules(*texts):
    return [parse_rule(t, id=f"r{i}") for i, t in enumerate(texts)]


def test_curve_midpoint():
    curve = MembershipCurve("temp", [(36.5, 0.0), (39.0, 1.0)])
    ev = apply_curves([curve], EvidenceSet(raw_observations={"temp": 37.75}))
    assert ev.base_degrees["temp"] == pytest.approx(0.5, abs=1e-15)


def test_curve_clamps():
    curve = MembershipCurve("temp", [(36.5, 0.2), (39.0, 0.9)])
    assert curve(30.0) == 0.2
    assert curve(45.0) == 0.9


def _naive_interp(points, x):
    if x <= points[0][0]:
        return points[0][1]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 <= x <= x1:
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    return points[-1][1]


def test_three_segment_curve_matches_naive_interpolation():
    pts = [(0.0, 0.0), (1.0, 0.7), (2.5, 0.4), (4.0, 1.0)]
    curve = MembershipCurve("x", pts)
    rng = random.Random(3)
    for _ in range(20):
        x = rng.uniform(-1.0, 5.0)
        assert abs(curve(x) - _naive_interp(pts, x)) <= 1e-12


def test_curve_validation():
    with pytest.raises(ValueError):
        MembershipCurve("x", [(1.0, 0.0), (1.0, 1.0)])
    with pytest.raises(ValueError):
        MembershipCurve("x", [(0.0, 1.5)])


def test_duplicate_curve_rejected():
    c = MembershipCurve("temp", [(0, 0), (1, 1)])
    with pytest.raises(ValueError, match="duplicate"):
        apply_curves([c, c], EvidenceSet())


def test_curve_maps_onto_named_proposition_without_lowering():
    c = MembershipCurve("temp", [(36.5, 0.0), (39.0, 1.0)], proposition="fever")
    ev = apply_curves([c], EvidenceSet({"fever": 0.9}, {"temp": 37.75}))
    assert ev.base_degrees["fever"] == 0.9


def test_evidence_degree_range():
    with pytest.raises(ValueError):
        EvidenceSet({"a": 1.2})


def test_connectives():
    d = {"a": 0.8, "b": 0.3}
    assert eval_expr(parse_expr("a AND b"), d) == 0.3
    assert eval_expr(parse_expr("a OR b"), d) == 0.8
    assert eval_expr(parse_expr("NOT a"), d) == pytest.approx(0.2)
    assert eval_expr(parse_expr("missing OR b"), d) == 0.3


def test_random_expressions_match_tree_walk():
    rng = random.Random(5)
    names = ["a", "b", "c", "d"]
    for _ in range(200):
        expr = random_expr(rng, names, names, 4)
        degrees = {n: rng.random() for n in names}
        assert eval_expr(expr, degrees) == eval_oracle(expr, degrees)


unit = st.floats(0.0, 1.0)


@given(unit, unit, unit)
def test_min_max_laws(a, b, c):
    d = {"a": a, "b": b, "c": c}
    e = lambda s: eval_expr(parse_expr(s), d)  # noqa: E731
    assert e("a AND b") == e("b AND a")
    assert e("a OR b") == e("b OR a")
    assert e("(a AND b) AND c") == e("a AND (b AND c)")
    assert e("(a OR b) OR c") == e("a OR (b OR c)")
    assert e("a AND a") == a and e("a OR a") == a
    assert e("NOT (a AND b)") == e("NOT a OR NOT b")
    assert e("NOT (a OR b)") == e("NOT a AND NOT b")


def test_single_weighted_rule():
    result = forward_chain(_rules("a => b [w=0.9]"), EvidenceSet({"a": 0.8}))
    assert result["b"] == 0.8
    assert result.derivation == {"a": EVIDENCE, "b": "r0"}


def test_chain_takes_two_rounds():
    result = forward_chain(_rules("a => b", "b => c"), EvidenceSet({"a": 0.6}))
    assert result["c"] == 0.6
    assert result.rounds == 2


def test_evidence_is_a_floor():
    result = forward_chain(_rules("a => b [w=0.3]"), EvidenceSet({"a": 1.0, "b": 0.7}))
    assert result["b"] == 0.7
    assert result.derivation["b"] == EVIDENCE


def test_max_aggregation_and_derivation_tie_break():
    rules = [parse_rule("a => c [w=0.5]", id="zeta"), parse_rule("b => c [w=0.5]", id="alpha")]
    result = forward_chain(rules, EvidenceSet({"a": 1.0, "b": 1.0}))
    assert result["c"] == 0.5
    assert result.derivation["c"] == "alpha"


def test_negation_of_derived_atom_is_rejected():
    with pytest.raises(StratificationError, match="b"):
        forward_chain(_rules("a => b", "NOT b => c"), EvidenceSet({"a": 0.5}))


def test_negation_on_evidence_atom():
    result = forward_chain(_rules("NOT a => b"), EvidenceSet({"a": 0.3}))
    assert result["b"] == pytest.approx(0.7)


def test_cyclic_rules_terminate():
    result = forward_chain(_rules("a => b", "b => a [w=0.4]", "b AND c => d"), EvidenceSet({"a": 0.2, "b": 0.9, "c": 1.0}))
    assert (result["a"], result["b"], result["d"]) == (0.4, 0.9, 0.9)


def _assert_equal_assignments(result, expected):
    keys = set(result.degrees) | set(expected)
    for k in keys:
        assert result.get(k, 0.0) == expected.get(k, 0.0), k


def test_forward_chain_matches_fixpoint_oracle():
    rng = random.Random(2024)
    for _ in range(500):
        rules, base = random_fuzzy_kb(rng)
        ev = EvidenceSet(base)
        result = forward_chain(rules, ev)
        _assert_equal_assignments(result, fixpoint_oracle(rules, base))
        assert result.rounds <= round_bound(rules, ev)
        for k, v in result.degrees.items():
            assert 0.0 <= v <= 1.0
            if result.derivation[k] != EVIDENCE:
                assert result.derivation[k] in {r.id for r in rules}


def test_rule_order_does_not_matter():
    rng = random.Random(99)
    for _ in range(100):
        rules, base = random_fuzzy_kb(rng)
        shuffled = rules[:]
        rng.shuffle(shuffled)
        a = forward_chain(rules, EvidenceSet(base))
        b = forward_chain(shuffled, EvidenceSet(base))
        assert a.degrees == b.degrees
        assert a.derivation == b.derivation


def test_monotone_in_evidence_without_negation():
    rng = random.Random(7)
    for _ in range(300):
        rules, base = random_fuzzy_kb(rng, allow_negation=False)
        names = sorted({r.consequent for r in rules} | set(base) | {"p0"})
        raised = dict(base)
        target = rng.choice(names)
        raised[target] = min(1.0, raised.get(target, 0.0) + rng.choice([0.25, 0.5, 1.0]))
        low = forward_chain(rules, EvidenceSet(base))
        high = forward_chain(rules, EvidenceSet(raised))
        for k, v in low.degrees.items():
            assert high.get(k) >= v


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_oracle_agreement_hypothesis_seeds(seed):
    rules, base = random_fuzzy_kb(random.Random(seed))
    _assert_equal_assignments(forward_chain(rules, EvidenceSet(base)), fixpoint_oracle(rules, base))


def test_accepts_kb_like_object():
    class KB:
        rules = (parse_rule("a => b"),)

    assert forward_chain(KB(), EvidenceSet({"a": 0.4}))["b"] == 0.4


def test_load_evidence(tmp_path):
    path = tmp_path / "ev.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in [
        {"kind": "evidence", "proposition": "a", "degree": 0.5},
        {"kind": "evidence", "observation": "temp", "value": 38.2},
        {"kind": "evidence", "node": "alt", "state": "elevated"},
    ]) + "\n", encoding="utf-8")
    ev = load_evidence(path)
    assert ev.base_degrees == {"a": 0.5}
    assert ev.raw_observations == {"temp": 38.2}
    assert ev.node_states == {"alt": "elevated"}


def test_load_evidence_rejects_bad_degree(tmp_path):
    path = tmp_path / "ev.jsonl"
    path.write_text(json.dumps({"kind": "evidence", "proposition": "a", "degree": 2}) + "\n")
    with pytest.raises(ValueError, match=":1:"):
        load_evidence(path)


def test_rule_weight_default():
    assert Rule(parse_expr("a"), "b").weight == 1.0
