import json

import numpy as np
import pytest

from metabridge.bayes import CPT, BayesNode, posterior
from metabridge.kb import (
    Additions,
    Concept,
    ConsistencyError,
    Proposition,
    SchemaError,
    check_consistency,
    extend_kb,
    load_additions,
    load_kb,
    manifest_records,
    parse_manifest,
    save_kb,
)
from metabridge.rules import parse_rule

from oracles import enumerate_posterior


def _kb(*records):
    return parse_manifest([json.dumps(r, ensure_ascii=False) for r in records])


def _kinds(kb):
    return [v.kind for v in check_consistency(kb)]


CFG = {"kind": "config", "embedding_dim": 3}
LABELS = [{"kind": "label", "name": n} for n in ("hot", "excess", "cold", "deficiency")]


def _concept(cid, labels=("hot",), **extra):
    return {"kind": "concept", "id": cid, "name_en": cid, "system": "TCM", "labels": list(labels), **extra}


def _prop(pid, **extra):
    return {"kind": "proposition", "id": pid, **extra}


def test_minimal_manifest(fixtures):
    kb = load_kb(fixtures / "minimal_kb.jsonl")
    assert len(kb.concepts) == 1 and kb.version == 1
    assert kb.concept_map["spleen"].name_zh == "脾"


def test_concept_carries_labels():
    kb = _kb(CFG, *LABELS, _concept("liver_fire", ("Hot", "excess")))
    assert kb.concept_map["liver_fire"].labels == {"hot", "excess"}
    assert check_consistency(kb) == []


def test_rule_with_undeclared_proposition(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in [_prop("a"), {"kind": "rule", "text": "a => ghost"}]))
    with pytest.raises(ConsistencyError) as info:
        load_kb(path)
    assert any(v.kind == "dangling_reference" and v.id == "ghost" for v in info.value.violations)


def test_schema_error_has_line_number(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text(json.dumps(CFG) + "\n" + json.dumps({"kind": "concept", "name_en": "x"}) + "\n")
    with pytest.raises(SchemaError) as info:
        load_kb(path)
    assert info.value.line == 2 and "id" in str(info.value)


@pytest.mark.parametrize("line", ['{"kind": "nonsense"}', "not json", '{"kind": "rule", "text": "a AND => b"}',
                                  '{"kind": "concept", "id": 5}', '{"kind": "config", "tau_high": "high"}'])
def test_schema_errors(line):
    with pytest.raises(SchemaError):
        parse_manifest([line])


def test_duplicate_concept_conflicting_labels():
    kb = _kb(CFG, *LABELS, _concept("gold", ("hot",)), _concept("gold", ("cold",)))
    violations = check_consistency(kb)
    assert [(v.kind, v.id) for v in violations] == [("duplicate_concept", "gold")]


def test_identical_redeclaration_is_not_a_conflict():
    kb = _kb(CFG, *LABELS, _concept("gold"), _concept("gold"))
    assert check_consistency(kb) == []


def test_exclusive_consequents():
    kb = _kb(_prop("a"), _prop("excess"), _prop("deficiency"),
             {"kind": "exclusion", "first": "excess", "second": "deficiency"},
             {"kind": "rule", "id": "r1", "text": "a => excess"},
             {"kind": "rule", "id": "r2", "text": "a => deficiency"})
    assert _kinds(kb) == ["exclusive_consequents"]


def test_bayes_cycle(fixtures):
    with open(fixtures / "cycle_kb.jsonl", encoding="utf-8") as fh:
        kb = parse_manifest(fh)
    assert "cycle" in _kinds(kb)


def test_missing_bridge_endpoint():
    kb = _kb(_prop("liver_fire"), {"kind": "bridge", "tcm_prop": "liver_fire", "wm_node": "nowhere"})
    violations = check_consistency(kb)
    assert [(v.kind, v.id) for v in violations] == [("missing_bridge_endpoint", "nowhere")]


def test_other_violation_kinds():
    kb = _kb(CFG, *LABELS,
             _concept("c1", ("unknown_tag",)),
             _concept("c2", embedding=[1.0, 0.0]),
             _prop("p", subject_concept="ghost"),
             _prop("q"),
             {"kind": "rule", "id": "r1", "text": "p => q"},
             {"kind": "rule", "id": "r2", "text": "NOT q => p"},
             {"kind": "bayes_node", "id": "n", "states": ["a", "b"], "cpt": [[0.5, 0.6]]})
    kinds = set(_kinds(kb))
    assert {"unknown_label", "embedding_dim", "dangling_reference", "stratification", "invalid_cpt"} <= kinds


def test_valid_three_concept_two_rule_kb():
    kb = _kb(CFG, *LABELS,
             _concept("liver", embedding=[1, 0, 0]), _concept("fire", ("hot", "excess")), _concept("spleen", ("cold",)),
             _prop("liver_fire", subject_concept="liver"), _prop("irritability"), _prop("spleen_def", subject_concept="spleen"),
             _prop("fatigue"),
             {"kind": "exclusion", "first": "liver_fire", "second": "spleen_def"},
             {"kind": "rule", "id": "r1", "text": "irritability => liver_fire"},
             {"kind": "rule", "id": "r2", "text": "fatigue AND NOT irritability => spleen_def"},
             {"kind": "bayes_node", "id": "hep", "states": ["absent", "present"], "cpt": [[0.9, 0.1]]},
             {"kind": "bridge", "tcm_prop": "liver_fire", "wm_node": "hep", "strength": 0.5})
    assert check_consistency(kb) == []
    # pure and idempotent
    assert check_consistency(kb) == check_consistency(kb)


def test_check_consistency_never_raises_on_garbage():
    kb = _kb({"kind": "bayes_node", "id": "n", "states": ["a", "b"], "parents": ["ghost"]},
             {"kind": "cpt", "node": "n", "rows": [[1.0]]},
             {"kind": "cpt", "node": "other", "rows": [[0.5, 0.5]]})
    assert "dangling_reference" in _kinds(kb)


def test_round_trip(fixtures, tmp_path):
    for name in ("liver_fire_kb.jsonl", "alignment_kb.jsonl", "minimal_kb.jsonl"):
        kb = load_kb(fixtures / name)
        out = tmp_path / name
        save_kb(kb, out)
        again = load_kb(out)
        assert again == kb
        assert manifest_records(again) == manifest_records(kb)
        assert "\\u" not in out.read_text(encoding="utf-8")


def test_extend_adds_concept_and_bumps_version(fixtures):
    kb = load_kb(fixtures / "minimal_kb.jsonl")
    snapshot = manifest_records(kb)
    covid = Concept("covid_tcm", "新冠", "covid (TCM reading)", "TCM", frozenset({"organ"}), (0.6, 0.8))
    new = extend_kb(kb, Additions(concepts=(covid,)))
    assert new.version == kb.version + 1
    assert "covid_tcm" in new.concept_map
    assert manifest_records(kb) == snapshot


def test_extend_rejects_atomically(fixtures):
    kb = load_kb(fixtures / "minimal_kb.jsonl")
    snapshot = manifest_records(kb)
    with pytest.raises(ConsistencyError) as info:
        extend_kb(kb, Additions(rules=(parse_rule("ghost => fatigue", id="bad"),)))
    assert info.value.violations[0].id == "ghost"
    assert manifest_records(kb) == snapshot and kb.version == 1


def test_extend_with_bayes_node_keeps_old_marginals(fixtures):
    kb = load_kb(fixtures / "liver_fire_kb.jsonl")
    node = BayesNode("crp", ("normal", "high"), ("hepatic_inflammation", "alt_level"), "WM")
    rows = ((0.9, 0.1), (0.6, 0.4), (0.5, 0.5), (0.2, 0.8))
    new = extend_kb(kb, Additions(bayes_nodes=(node,), cpts=(CPT("crp", rows),)))
    for old in ("hepatic_inflammation", "alt_level"):
        before = posterior(kb.bayes_net, old)
        after = posterior(new.bayes_net, old)
        assert np.max(np.abs(before - after)) <= 1e-12
    assert np.max(np.abs(posterior(new.bayes_net, "crp", {"alt_level": "elevated"})
                         - enumerate_posterior(new.bayes_net, "crp", {"alt_level": "elevated"}))) <= 1e-12


def test_extend_may_not_redefine_node(fixtures):
    kb = load_kb(fixtures / "liver_fire_kb.jsonl")
    node = BayesNode("alt_level", ("normal", "elevated"), (), "WM")
    with pytest.raises(ConsistencyError):
        extend_kb(kb, Additions(bayes_nodes=(node,), cpts=(CPT("alt_level", ((0.5, 0.5),)),)))


def test_extend_identical_redeclaration_stored_once(fixtures):
    kb = load_kb(fixtures / "minimal_kb.jsonl")
    new = extend_kb(kb, Additions(propositions=(Proposition("fatigue", "patient is fatigued"),)))
    assert [p.id for p in new.propositions].count("fatigue") == 1


def test_load_additions(fixtures):
    kb = load_kb(fixtures / "minimal_kb.jsonl")
    add = load_additions(fixtures / "additions.jsonl", kb)
    new = extend_kb(kb, add)
    assert {r.id for r in new.rules} == {"r1", "r2"}


def test_additions_reject_config(tmp_path):
    path = tmp_path / "add.jsonl"
    path.write_text(json.dumps({"kind": "config", "theta": 0.5}) + "\n")
    with pytest.raises(SchemaError):
        load_additions(path)


def test_resolve_terms(fixtures):
    kb = load_kb(fixtures / "alignment_kb.jsonl")
    assert kb.resolve_concept("脾脏").id == "spleen"
    assert kb.resolve_concept("Cerebrospinal  Fluid").id == "csf"
    assert kb.resolve_concept("月亮") is None
    assert kb.resolve_verb("boost").verb_class == "strengthen"


def test_cpt_given_rows_in_any_order():
    a = _kb({"kind": "bayes_node", "id": "p", "states": ["0", "1"], "cpt": [[0.5, 0.5]]},
            {"kind": "bayes_node", "id": "c", "states": ["x", "y"], "parents": ["p"]},
            {"kind": "cpt", "node": "c", "rows": [{"given": ["1"], "probs": [0.2, 0.8]},
                                                 {"given": ["0"], "probs": [0.7, 0.3]}]})
    assert a.bayes_net.cpts["c"].rows == ((0.7, 0.3), (0.2, 0.8))


def test_cpt_with_too_few_rows():
    kb = _kb({"kind": "bayes_node", "id": "p", "states": ["0", "1"], "cpt": [[0.5, 0.5]]},
             {"kind": "bayes_node", "id": "c", "states": ["x", "y"], "parents": ["p"], "cpt": [[0.5, 0.5]]})
    assert "invalid_cpt" in _kinds(kb)
