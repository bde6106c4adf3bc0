import json
import math
import random
import unicodedata

import pytest

from metabridge.dataset import (
    CLASSES,
    DatasetError,
    DatasetManifest,
    SVOSentence,
    allocate_test_counts,
    load_dataset,
    normalize_for_dedup,
    save_dataset,
    screen_terms,
    stratified_split,
)

from oracles import REPORTED_SIZES, write_sized_dataset


def _sentences(per_class):
    out = []
    for cls, n in per_class.items():
        system, label = cls.split("-")
        out += [SVOSentence(f"{cls}-{i}", "s", "v", "o", system, label, text_en="t") for i in range(n)]
    return DatasetManifest(tuple(out))


def test_reported_class_sizes(tmp_path):
    path = tmp_path / "ds.jsonl"
    write_sized_dataset(path)
    manifest = load_dataset(path)
    assert manifest.counts() == REPORTED_SIZES
    assert manifest.total == 613 + 703 + 697 + 788 == 2801


def test_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset(path)


def test_declared_count_mismatch(tmp_path):
    path = tmp_path / "ds.jsonl"
    sizes = {"TCM-aligned": 9, "TCM-misaligned": 0, "WM-aligned": 0, "WM-misaligned": 0}
    write_sized_dataset(path, sizes, declare=False)
    body = path.read_text()
    path.write_text(json.dumps({"declared_counts": {"TCM-aligned": 10}}) + "\n" + body)
    with pytest.raises(DatasetError, match="count mismatch: TCM-aligned: expected 10, found 9"):
        load_dataset(path)


def test_malformed_line_reports_line(fixtures):
    with pytest.raises(DatasetError) as info:
        load_dataset(fixtures / "malformed_dataset.jsonl")
    assert info.value.line == 2


@pytest.mark.parametrize("patch", [{"subject": ""}, {"system": "Ayurveda"}, {"label": "maybe"},
                                   {"text_zh": "", "text_en": ""}, {"extra": "x"}, {"verb": 3}])
def test_schema_violations(tmp_path, patch):
    rec = {"id": "s1", "text_zh": "脾脏运化水谷", "subject": "脾脏", "verb": "运化", "object": "水谷",
           "system": "TCM", "label": "aligned"}
    rec.update(patch)
    path = tmp_path / "ds.jsonl"
    path.write_text(json.dumps(rec, ensure_ascii=False) + "\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_duplicate_id(tmp_path):
    rec = {"id": "s1", "text_en": "x", "subject": "a", "verb": "b", "object": "c", "system": "WM", "label": "aligned"}
    path = tmp_path / "ds.jsonl"
    path.write_text((json.dumps(rec) + "\n") * 2)
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(path)


def test_round_trip_preserves_order(fixtures, tmp_path):
    manifest = load_dataset(fixtures / "alignment_dataset.jsonl")
    out = tmp_path / "copy.jsonl"
    save_dataset(manifest, out)
    assert load_dataset(out) == manifest


def test_screening_fixture(fixtures):
    screening = json.loads((fixtures / "screening.json").read_text(encoding="utf-8"))
    result = screen_terms(screening["raw_terms"], expert_removals=[(r["term"], r["reason"]) for r in screening["expert_removals"]])
    assert len(screening["raw_terms"]) == 3000
    assert len(result.removed) == 199
    assert len(result.kept) == 2801


def test_fullwidth_spacing_duplicate():
    result = screen_terms(["肝火 上炎", "肝火　上炎", "脾虚"])
    assert result.kept == ("肝火 上炎", "脾虚")
    assert result.removed == (("肝火　上炎", "duplicate"),)


def test_normalizer():
    assert normalize_for_dedup("ＡＬＴ－１") == normalize_for_dedup("alt1")
    assert normalize_for_dedup("肝火、上炎") == "肝火上炎"


def test_unknown_expert_term():
    with pytest.raises(DatasetError, match="unknown"):
        screen_terms(["a"], expert_removals={"b": "irrelevant"})


def test_screening_requires_input():
    with pytest.raises(DatasetError):
        screen_terms([])


def _variant(rng, term):
    pick = rng.randrange(3)
    if pick == 0:
        return term
    if pick == 1:
        return unicodedata.normalize("NFKC", term).upper() if term.isascii() else term + " "
    return " ".join(term)


def test_random_lists_with_injected_duplicates():
    rng = random.Random(17)
    alphabet = "abcdefg肝脾肾"
    for _ in range(50):
        base = ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 4))) for _ in range(30)]
        terms = base + [_variant(rng, rng.choice(base)) for _ in range(15)]
        rng.shuffle(terms)
        result = screen_terms(terms)
        assert len(result.kept) + len(result.removed) == len(terms)
        keys = [normalize_for_dedup(t) for t in result.kept]
        for i in range(len(keys)):
            for j in range(i + 1, len(keys)):
                assert keys[i] != keys[j]


def test_split_integer_exact():
    manifest = _sentences({c: 10 for c in CLASSES})
    for seed in range(5):
        train, test = stratified_split(manifest, 0.2, seed)
        assert test.counts() == {c: 2 for c in CLASSES}
        assert train.total == 32


def test_split_deterministic_and_partitioning():
    manifest = _sentences({"TCM-aligned": 7, "TCM-misaligned": 5, "WM-aligned": 9, "WM-misaligned": 3})
    a = stratified_split(manifest, 0.4, 42)
    b = stratified_split(manifest, 0.4, 42)
    assert a == b
    train, test = a
    train_ids = {s.id for s in train.sentences}
    test_ids = {s.id for s in test.sentences}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {s.id for s in manifest.sentences}
    order = [s.id for s in manifest.sentences]
    assert [s.id for s in test.sentences] == [i for i in order if i in test_ids]


def test_split_reported_sizes_within_one():
    manifest = _sentences(REPORTED_SIZES)
    _, test = stratified_split(manifest, 0.3, 0)
    for cls, n in REPORTED_SIZES.items():
        assert abs(test.counts()[cls] - 0.3 * n) <= 1
    assert test.total == round(2801 * 0.3)


def test_allocation_floor_or_ceiling():
    rng = random.Random(3)
    for _ in range(200):
        sizes = {c: rng.randint(2, 50) for c in CLASSES}
        frac = rng.uniform(0.05, 0.95)
        alloc = allocate_test_counts(sizes, frac)
        for c in sizes:
            assert alloc[c] in (math.floor(sizes[c] * frac), math.ceil(sizes[c] * frac))


def test_split_errors():
    manifest = _sentences({"TCM-aligned": 1, "WM-aligned": 4})
    with pytest.raises(DatasetError, match="too small"):
        stratified_split(manifest, 0.5, 0)
    with pytest.raises(DatasetError):
        stratified_split(_sentences({"TCM-aligned": 4}), 1.0, 0)
