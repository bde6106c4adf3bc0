"""SVO benchmark sentences: loading, term screening and stratified splitting."""

from __future__ import annotations

import json
import random
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

__all__ = [
    "CLASSES",
    "SVOSentence",
    "DatasetManifest",
    "DatasetError",
    "class_of",
    "load_dataset",
    "save_dataset",
    "normalize_for_dedup",
    "screen_terms",
    "ScreeningResult",
    "stratified_split",
    "allocate_test_counts",
]

SYSTEMS = ("TCM", "WM")
LABELS = ("aligned", "misaligned")
CLASSES = tuple(f"{s}-{lab}" for s in SYSTEMS for lab in LABELS)


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class SVOSentence:
    id: str
    subject: str
    verb: str
    object: str
    system: str
    label: str
    text_zh: str = ""
    text_en: str = ""

    def __post_init__(self):
        for name in ("id", "subject", "verb", "object"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise DatasetError(f"sentence field {name!r} must be a non-empty string")
        if not (self.text_zh or self.text_en):
            raise DatasetError(f"sentence {self.id!r} needs text_zh or text_en")
        if self.system not in SYSTEMS:
            raise DatasetError(f"sentence {self.id!r}: system must be one of {SYSTEMS}")
        if self.label not in LABELS:
            raise DatasetError(f"sentence {self.id!r}: label must be one of {LABELS}")

    @property
    def cls(self) -> str:
        return class_of(self.system, self.label)


def class_of(system: str, label: str) -> str:
    return f"{system}-{label}"


@dataclass(frozen=True)
class DatasetManifest:
    sentences: tuple[SVOSentence, ...]
    declared_counts: Mapping[str, int] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        tally = Counter(s.cls for s in self.sentences)
        return {c: tally.get(c, 0) for c in CLASSES}

    @property
    def total(self) -> int:
        return len(self.sentences)


_FIELDS = {"id", "text_zh", "text_en", "subject", "verb", "object", "system", "label"}


def _sentence(rec, line: int) -> SVOSentence:
    if not isinstance(rec, dict):
        raise DatasetError("record must be a JSON object", line)
    missing = {"id", "subject", "verb", "object", "system", "label"} - set(rec)
    if missing:
        raise DatasetError(f"missing field(s) {sorted(missing)}", line)
    extra = set(rec) - _FIELDS
    if extra:
        raise DatasetError(f"unknown field(s) {sorted(extra)}", line)
    for k, v in rec.items():
        if not isinstance(v, str):
            raise DatasetError(f"field {k!r} must be a string", line)
    try:
        return SVOSentence(**rec)
    except DatasetError as exc:
        raise DatasetError(str(exc), line) from None


def load_dataset(path) -> DatasetManifest:
    """Read a JSON-lines dataset.

    An optional first record ``{"declared_counts": {...}}`` states the
    expected per-class counts, keyed by ``"TCM-aligned"`` and so on.
    """
    path = Path(path)
    declared: dict[str, int] = {}
    sentences: list[SVOSentence] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
            if isinstance(rec, dict) and "declared_counts" in rec:
                if sentences or declared:
                    raise DatasetError("declared_counts must be the first record", lineno)
                counts = rec["declared_counts"]
                if set(rec) != {"declared_counts"} or not isinstance(counts, dict):
                    raise DatasetError("header record must be {\"declared_counts\": {...}}", lineno)
                for k, v in counts.items():
                    if k not in CLASSES or isinstance(v, bool) or not isinstance(v, int) or v < 0:
                        raise DatasetError(f"bad declared count {k!r}: {v!r}", lineno)
                declared = dict(counts)
                continue
            s = _sentence(rec, lineno)
            if s.id in seen:
                raise DatasetError(f"duplicate sentence id {s.id!r} (first on line {seen[s.id]})", lineno)
            seen[s.id] = lineno
            sentences.append(s)
    if not sentences:
        raise DatasetError("empty dataset")
    manifest = DatasetManifest(tuple(sentences), declared)
    if declared:
        actual = manifest.counts()
        wrong = {c: (declared[c], actual[c]) for c in declared if declared[c] != actual[c]}
        if wrong:
            listing = ", ".join(f"{c}: expected {e}, found {a}" for c, (e, a) in sorted(wrong.items()))
            raise DatasetError(f"count mismatch: {listing}")
    return manifest


def save_dataset(manifest: DatasetManifest, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if manifest.declared_counts:
            fh.write(json.dumps({"declared_counts": dict(manifest.declared_counts)}) + "\n")
        for s in manifest.sentences:
            fh.write(json.dumps(asdict(s), ensure_ascii=False) + "\n")


# -- screening ---------------------------------------------------------------


def normalize_for_dedup(term: str) -> str:
    """Full-width to half-width, then drop whitespace and punctuation, casefold."""
    text = unicodedata.normalize("NFKC", term).casefold()
    return "".join(ch for ch in text if not (ch.isspace() or unicodedata.category(ch).startswith("P")))


@dataclass(frozen=True)
class ScreeningResult:
    kept: tuple[str, ...]
    removed: tuple[tuple[str, str], ...]  # (term, reason)

    @property
    def counts(self) -> dict[str, int]:
        return dict(Counter(reason for _, reason in self.removed))


def screen_terms(raw_terms: Sequence[str], normalizer: Callable[[str], str] = normalize_for_dedup,
                 expert_removals: Mapping[str, str] | Iterable[tuple[str, str]] = ()) -> ScreeningResult:
    """Drop normalised duplicates, then apply expert removal lists.

    Every input term ends up in exactly one of ``kept`` or ``removed``;
    the first occurrence of a duplicate group is the one kept.
    """
    if not raw_terms:
        raise DatasetError("no terms to screen")
    removals = dict(expert_removals.items() if isinstance(expert_removals, Mapping) else expert_removals)
    known = set(raw_terms)
    unknown = sorted(t for t in removals if t not in known)
    if unknown:
        raise DatasetError(f"expert removal list names unknown term(s): {unknown[:5]}")
    seen: set[str] = set()
    kept: list[str] = []
    removed: list[tuple[str, str]] = []
    for term in raw_terms:
        key = normalizer(term)
        if key in seen:
            removed.append((term, "duplicate"))
            continue
        seen.add(key)
        if term in removals:
            removed.append((term, removals[term]))
        else:
            kept.append(term)
    return ScreeningResult(tuple(kept), tuple(removed))


# -- splitting ---------------------------------------------------------------


def allocate_test_counts(sizes: Mapping[str, int], fraction: float) -> dict[str, int]:
    """Largest-remainder allocation of ``round(total * fraction)`` test slots.

    Each class gets the floor or the ceiling of its exact share; leftover
    slots go to the largest remainders, ties broken by class name.
    """
    exact = {c: n * fraction for c, n in sizes.items()}
    alloc = {c: int(v) for c, v in exact.items()}
    target = round(sum(sizes.values()) * fraction)
    leftovers = sorted(exact, key=lambda c: (-(exact[c] - alloc[c]), c))
    for c in leftovers[:max(0, target - sum(alloc.values()))]:
        if alloc[c] < exact[c]:
            alloc[c] += 1
    return alloc


def stratified_split(manifest: DatasetManifest, test_fraction: float, seed: int = 0
                     ) -> tuple[DatasetManifest, DatasetManifest]:
    """Per-class seeded shuffle, then cut at the allocated test count.

    Both halves keep the input's relative order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must lie strictly between 0 and 1")
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(manifest.sentences):
        by_class.setdefault(s.cls, []).append(i)
    small = sorted(c for c, idx in by_class.items() if len(idx) < 2)
    if small:
        raise DatasetError(f"class(es) too small to stratify: {small}")
    alloc = allocate_test_counts({c: len(v) for c, v in by_class.items()}, test_fraction)
    rng = random.Random(seed)
    test_idx: set[int] = set()
    for c in sorted(by_class):
        idx = list(by_class[c])
        rng.shuffle(idx)
        test_idx.update(idx[:alloc[c]])
    train = tuple(s for i, s in enumerate(manifest.sentences) if i not in test_idx)
    test = tuple(s for i, s in enumerate(manifest.sentences) if i in test_idx)
    return DatasetManifest(train), DatasetManifest(test)
