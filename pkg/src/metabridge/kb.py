"""Knowledge base: concepts, labels, propositions, rules, bridges and the Bayes net.

The on-disk form is a JSON-lines manifest, one record per line, each carrying a
``kind`` discriminator. See ``docs/formats.md`` for the field list of every kind.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

from .bayes import CPT, BayesError, BayesNet, BayesNode, cpt_problems
from .fuzzy import MembershipCurve, check_stratified
from .rules import Rule, RuleSyntaxError, atoms, parse_rule, render_rule

__all__ = [
    "SYSTEMS",
    "Concept",
    "Proposition",
    "BridgeLink",
    "Exclusion",
    "Relation",
    "Verb",
    "KBConfig",
    "KnowledgeBase",
    "Additions",
    "Contradiction",
    "SchemaError",
    "ConsistencyError",
    "normalize_label",
    "normalize_term",
    "load_kb",
    "parse_manifest",
    "save_kb",
    "manifest_records",
    "check_consistency",
    "extend_kb",
    "load_additions",
]

SYSTEMS = ("TCM", "WM", "Bridge")
KINDS = (
    "config", "label", "concept", "proposition", "rule", "bridge", "bayes_node", "cpt",
    "exclusion", "curve", "relation", "verb",
)


def normalize_label(name: str) -> str:
    return unicodedata.normalize("NFKC", name).strip().casefold()


def normalize_term(text: str) -> str:
    """Surface-form key used to match sentence terms against concepts and verbs."""
    text = unicodedata.normalize("NFKC", text).casefold().replace("_", " ").replace("-", " ")
    return " ".join(text.split())


@dataclass(frozen=True)
class Concept:
    id: str
    name_zh: str = ""
    name_en: str = ""
    system: str = "TCM"
    labels: frozenset[str] = frozenset()
    embedding: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(normalize_label(x) for x in self.labels))
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))


@dataclass(frozen=True)
class Proposition:
    id: str
    statement: str = ""
    subject_concept: str | None = None
    system: str = "TCM"


@dataclass(frozen=True)
class BridgeLink:
    tcm_prop: str
    wm_node: str
    strength: float = 1.0


@dataclass(frozen=True)
class Exclusion:
    """Two propositions that may not both be concluded from the same antecedent."""

    first: str
    second: str


@dataclass(frozen=True)
class Relation:
    """A licensed subject-verb-object triple, verb given by its class."""

    subject: str
    verb_class: str
    object: str


@dataclass(frozen=True)
class Verb:
    name: str
    verb_class: str
    systems: frozenset[str] = frozenset()
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "systems", frozenset(self.systems))
        object.__setattr__(self, "aliases", tuple(self.aliases))


@dataclass(frozen=True)
class KBConfig:
    embedding_dim: int = 64
    tau_high: float = 0.7
    tau_low: float = 0.3
    theta: float = 0.6
    similarity_fallback: bool = True

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        for name in ("tau_high", "tau_low", "theta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.tau_low > self.tau_high:
            raise ValueError("tau_low must not exceed tau_high")


@dataclass(frozen=True)
class Contradiction:
    kind: str
    id: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}: {self.id}" + (f" ({self.detail})" if self.detail else "")


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.message = message
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConsistencyError(ValueError):
    def __init__(self, violations: list[Contradiction]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class KnowledgeBase:
    """Immutable knowledge store.

    Entity collections are kept as tuples in manifest order, so a manifest
    that repeats an id is representable and can be reported by
    :func:`check_consistency` rather than silently overwritten.
    """

    concepts: tuple[Concept, ...] = ()
    sigma: frozenset[str] = frozenset()
    propositions: tuple[Proposition, ...] = ()
    rules: tuple[Rule, ...] = ()
    bridges: tuple[BridgeLink, ...] = ()
    bayes_nodes: tuple[BayesNode, ...] = ()
    cpts: tuple[CPT, ...] = ()
    exclusions: tuple[Exclusion, ...] = ()
    curves: tuple[MembershipCurve, ...] = ()
    relations: tuple[Relation, ...] = ()
    verbs: tuple[Verb, ...] = ()
    config: KBConfig = field(default_factory=KBConfig)
    version: int = 1

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    @cached_property
    def concept_map(self) -> dict[str, Concept]:
        return {c.id: c for c in self.concepts}

    @cached_property
    def proposition_map(self) -> dict[str, Proposition]:
        return {p.id: p for p in self.propositions}

    @cached_property
    def bayes_net(self) -> BayesNet:
        return BayesNet.build(self.bayes_nodes, self.cpts)

    def bridges_from(self, prop: str) -> list[BridgeLink]:
        return [b for b in self.bridges if b.tcm_prop == prop]

    @cached_property
    def _term_index(self) -> dict[str, str]:
        index: dict[str, str] = {}
        for c in self.concepts:
            for surface in (c.name_zh, c.name_en, c.id):
                if surface:
                    index[normalize_term(surface)] = c.id
        return index

    def resolve_concept(self, term: str) -> Concept | None:
        cid = self._term_index.get(normalize_term(term))
        return self.concept_map.get(cid) if cid else None

    @cached_property
    def _verb_index(self) -> dict[str, Verb]:
        index: dict[str, Verb] = {}
        for v in self.verbs:
            for surface in (v.name, *v.aliases):
                index[normalize_term(surface)] = v
        return index

    def resolve_verb(self, term: str) -> Verb | None:
        return self._verb_index.get(normalize_term(term))

    def has_relation(self, subject: str, verb_class: str, obj: str) -> bool:
        return Relation(subject, verb_class, obj) in set(self.relations)


# -- manifest parsing --------------------------------------------------------


def _req(rec: Mapping, key: str, typ, line: int):
    if key not in rec:
        raise SchemaError(f"{rec.get('kind')} record missing field {key!r}", line)
    value = rec[key]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, typ) or (typ is not bool and isinstance(value, bool)):
        raise SchemaError(f"field {key!r} must be {getattr(typ, '__name__', typ)}, got {type(value).__name__}", line)
    return value


def _opt(rec: Mapping, key: str, typ, line: int, default=None):
    if rec.get(key) is None:
        return default
    return _req(rec, key, typ, line)


def _str_list(rec: Mapping, key: str, line: int, default=()) -> tuple[str, ...]:
    value = _opt(rec, key, list, line, list(default))
    if not all(isinstance(x, str) for x in value):
        raise SchemaError(f"field {key!r} must be a list of strings", line)
    return tuple(value)


def _system(rec: Mapping, line: int, allowed=SYSTEMS, default="TCM") -> str:
    value = _opt(rec, "system", str, line, default)
    if value not in allowed:
        raise SchemaError(f"system must be one of {allowed}, got {value!r}", line)
    return value


def _cpt_from_record(rec: Mapping, node_id: str, line: int) -> tuple[str, Any]:
    rows = rec.get("rows", rec.get("cpt"))
    if not isinstance(rows, list) or not rows:
        raise SchemaError(f"CPT for {node_id!r} needs a non-empty 'rows' list", line)
    if all(isinstance(r, dict) for r in rows):
        table = {}
        for r in rows:
            given = r.get("given", [])
            probs = r.get("probs")
            if not isinstance(given, list) or not isinstance(probs, list):
                raise SchemaError(f"CPT row for {node_id!r} needs 'given' and 'probs' lists", line)
            if tuple(given) in table:
                raise SchemaError(f"CPT for {node_id!r} repeats parent configuration {given}", line)
            table[tuple(given)] = tuple(_num(p, line) for p in probs)
        return "table", table
    if all(isinstance(r, list) for r in rows):
        return "rows", tuple(tuple(_num(p, line) for p in r) for r in rows)
    raise SchemaError(f"CPT rows for {node_id!r} must all be lists or all be objects", line)


def _num(x, line: int) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError(f"expected a number, got {x!r}", line)
    return float(x)


@dataclass
class _Draft:
    config: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)
    concepts: list = field(default_factory=list)
    propositions: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    bridges: list = field(default_factory=list)
    nodes: list = field(default_factory=list)
    cpt_specs: list = field(default_factory=list)  # (node id, form, data, line)
    exclusions: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    relations: list = field(default_factory=list)
    verbs: list = field(default_factory=list)


def _parse_record(draft: _Draft, rec: Any, line: int) -> None:
    if not isinstance(rec, dict):
        raise SchemaError("record must be a JSON object", line)
    kind = rec.get("kind")
    if kind not in KINDS:
        raise SchemaError(f"unknown or missing kind {kind!r}", line)
    if kind == "config":
        allowed = {"kind", "embedding_dim", "tau_high", "tau_low", "theta", "similarity_fallback", "version"}
        extra = set(rec) - allowed
        if extra:
            raise SchemaError(f"unknown config field(s) {sorted(extra)}", line)
        for key, typ in (("embedding_dim", int), ("tau_high", float), ("tau_low", float), ("theta", float),
                         ("similarity_fallback", bool), ("version", int)):
            if key in rec:
                draft.config[key] = _req(rec, key, typ, line)
    elif kind == "label":
        draft.labels.append(normalize_label(_req(rec, "name", str, line)))
    elif kind == "concept":
        emb = _opt(rec, "embedding", list, line)
        draft.concepts.append(Concept(
            id=_req(rec, "id", str, line),
            name_zh=_opt(rec, "name_zh", str, line, ""),
            name_en=_opt(rec, "name_en", str, line, ""),
            system=_system(rec, line),
            labels=frozenset(_str_list(rec, "labels", line)),
            embedding=None if emb is None else tuple(_num(x, line) for x in emb),
        ))
    elif kind == "proposition":
        draft.propositions.append(Proposition(
            id=_req(rec, "id", str, line),
            statement=_opt(rec, "statement", str, line, ""),
            subject_concept=_opt(rec, "subject_concept", str, line),
            system=_system(rec, line, ("TCM", "WM")),
        ))
    elif kind == "rule":
        text = _req(rec, "text", str, line)
        try:
            rule = parse_rule(text, source=_opt(rec, "source", str, line, ""), id=_opt(rec, "id", str, line, ""))
        except RuleSyntaxError as exc:
            raise SchemaError(f"rule syntax: {exc}", line) from None
        if "weight" in rec:
            w = _req(rec, "weight", float, line)
            if not 0.0 <= w <= 1.0:
                raise SchemaError(f"rule weight {w} outside [0, 1]", line)
            rule = replace(rule, weight=w)
        draft.rules.append(rule)
    elif kind == "bridge":
        strength = _opt(rec, "strength", float, line, 1.0)
        if not 0.0 <= strength <= 1.0:
            raise SchemaError(f"bridge strength {strength} outside [0, 1]", line)
        draft.bridges.append(BridgeLink(_req(rec, "tcm_prop", str, line), _req(rec, "wm_node", str, line), strength))
    elif kind == "bayes_node":
        node_id = _req(rec, "id", str, line)
        try:
            draft.nodes.append(BayesNode(
                id=node_id,
                states=_str_list(rec, "states", line),
                parents=_str_list(rec, "parents", line),
                role=_system(rec | {"system": rec.get("role", "WM")}, line),
                present_state=_opt(rec, "present_state", str, line),
            ))
        except BayesError as exc:
            raise SchemaError(str(exc), line) from None
        if rec.get("cpt") is not None:
            draft.cpt_specs.append((node_id, *_cpt_from_record(rec, node_id, line), line))
    elif kind == "cpt":
        node_id = _req(rec, "node", str, line)
        draft.cpt_specs.append((node_id, *_cpt_from_record(rec, node_id, line), line))
    elif kind == "exclusion":
        draft.exclusions.append(Exclusion(_req(rec, "first", str, line), _req(rec, "second", str, line)))
    elif kind == "curve":
        pts = _req(rec, "breakpoints", list, line)
        try:
            draft.curves.append(MembershipCurve(
                observation=_req(rec, "observation", str, line),
                breakpoints=tuple((_num(p[0], line), _num(p[1], line)) for p in pts),
                proposition=_opt(rec, "proposition", str, line, ""),
            ))
        except (ValueError, TypeError, IndexError) as exc:
            raise SchemaError(f"bad curve: {exc}", line) from None
    elif kind == "relation":
        draft.relations.append(Relation(
            _req(rec, "subject", str, line), _req(rec, "verb_class", str, line), _req(rec, "object", str, line)))
    elif kind == "verb":
        systems = _str_list(rec, "systems", line)
        for s in systems:
            if s not in ("TCM", "WM"):
                raise SchemaError(f"verb system must be TCM or WM, got {s!r}", line)
        draft.verbs.append(Verb(_req(rec, "name", str, line), _req(rec, "verb_class", str, line),
                                frozenset(systems), _str_list(rec, "aliases", line)))


def _build_cpts(draft: _Draft) -> list[CPT]:
    nodes = {}
    for n in draft.nodes:
        nodes.setdefault(n.id, n)
    cpts = []
    for node_id, form, data, line in draft.cpt_specs:
        if form == "rows":
            cpts.append(CPT(node_id, data))
            continue
        node = nodes.get(node_id)
        if node is None:
            raise SchemaError(f"CPT for unknown node {node_id!r}", line)
        missing = [p for p in node.parents if p not in nodes]
        if missing:
            raise SchemaError(f"CPT for {node_id!r} keyed on unknown parent(s) {missing}", line)
        try:
            cpts.append(CPT.from_table(node, [nodes[p] for p in node.parents], data))
        except BayesError as exc:
            raise SchemaError(str(exc), line) from None
    return cpts


def _read_records(lines: Iterable[str], draft: _Draft, path: str | None = None) -> int:
    n = 0
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("//"):
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", lineno, path) from None
        try:
            _parse_record(draft, rec, lineno)
        except SchemaError as exc:
            if exc.path is None and path is not None:
                raise SchemaError(exc.message, exc.line, path) from None
            raise
        n += 1
    return n


def parse_manifest(lines: Iterable[str], path: str | None = None) -> KnowledgeBase:
    """Structural parse only; no consistency checking."""
    draft = _Draft()
    _read_records(lines, draft, path)
    try:
        cpts = _build_cpts(draft)
    except SchemaError as exc:
        raise SchemaError(str(exc), None, path) from None
    version = draft.config.pop("version", 1)
    try:
        config = KBConfig(**draft.config)
    except ValueError as exc:
        raise SchemaError(f"config: {exc}", None, path) from None
    return KnowledgeBase(
        concepts=tuple(draft.concepts),
        sigma=frozenset(draft.labels),
        propositions=tuple(draft.propositions),
        rules=tuple(draft.rules),
        bridges=tuple(draft.bridges),
        bayes_nodes=tuple(draft.nodes),
        cpts=tuple(cpts),
        exclusions=tuple(draft.exclusions),
        curves=tuple(draft.curves),
        relations=tuple(draft.relations),
        verbs=tuple(draft.verbs),
        config=config,
        version=version,
    )


def load_kb(path) -> KnowledgeBase:
    """Load and validate a manifest.

    Raises OSError, :class:`SchemaError` (with line number) or
    :class:`ConsistencyError` listing every violation.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        kb = parse_manifest(fh, str(path))
    violations = check_consistency(kb)
    if violations:
        raise ConsistencyError(violations)
    return kb


# -- manifest writing --------------------------------------------------------


def manifest_records(kb: KnowledgeBase) -> list[dict]:
    cfg = kb.config
    recs: list[dict] = [{
        "kind": "config", "embedding_dim": cfg.embedding_dim, "tau_high": cfg.tau_high, "tau_low": cfg.tau_low,
        "theta": cfg.theta, "similarity_fallback": cfg.similarity_fallback, "version": kb.version,
    }]
    recs += [{"kind": "label", "name": name} for name in sorted(kb.sigma)]
    for c in kb.concepts:
        rec = {"kind": "concept", "id": c.id, "name_zh": c.name_zh, "name_en": c.name_en, "system": c.system,
               "labels": sorted(c.labels)}
        if c.embedding is not None:
            rec["embedding"] = list(c.embedding)
        recs.append(rec)
    for p in kb.propositions:
        rec = {"kind": "proposition", "id": p.id, "statement": p.statement, "system": p.system}
        if p.subject_concept is not None:
            rec["subject_concept"] = p.subject_concept
        recs.append(rec)
    for r in kb.rules:
        rec = {"kind": "rule", "id": r.id, "text": render_rule(r)}
        if r.source:
            rec["source"] = r.source
        recs.append(rec)
    recs += [{"kind": "exclusion", "first": e.first, "second": e.second} for e in kb.exclusions]
    recs += [{"kind": "bridge", "tcm_prop": b.tcm_prop, "wm_node": b.wm_node, "strength": b.strength}
             for b in kb.bridges]
    for n in kb.bayes_nodes:
        rec = {"kind": "bayes_node", "id": n.id, "states": list(n.states), "parents": list(n.parents), "role": n.role}
        if n.present_state is not None:
            rec["present_state"] = n.present_state
        recs.append(rec)
    recs += [{"kind": "cpt", "node": c.node, "rows": [list(r) for r in c.rows]} for c in kb.cpts]
    recs += [{"kind": "curve", "observation": c.observation, "proposition": c.proposition,
              "breakpoints": [list(p) for p in c.breakpoints]} for c in kb.curves]
    recs += [{"kind": "verb", "name": v.name, "verb_class": v.verb_class, "systems": sorted(v.systems),
              "aliases": list(v.aliases)} for v in kb.verbs]
    recs += [{"kind": "relation", "subject": r.subject, "verb_class": r.verb_class, "object": r.object}
             for r in kb.relations]
    return recs


def save_kb(kb: KnowledgeBase, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in manifest_records(kb):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# -- consistency -------------------------------------------------------------


def _duplicates(items, key, kind: str) -> list[Contradiction]:
    seen: dict[str, Any] = {}
    out = []
    flagged = set()
    for item in items:
        k = key(item)
        if k in seen and seen[k] != item and k not in flagged:
            out.append(Contradiction(kind, k, "conflicting definitions"))
            flagged.add(k)
        seen.setdefault(k, item)
    return out


def check_consistency(kb: KnowledgeBase) -> list[Contradiction]:
    """Every violation in ``kb``; an empty list means consistent. Never raises."""
    out: list[Contradiction] = []
    out += _duplicates(kb.concepts, lambda c: c.id, "duplicate_concept")
    out += _duplicates(kb.propositions, lambda p: p.id, "duplicate_proposition")
    out += _duplicates(kb.bayes_nodes, lambda n: n.id, "duplicate_node")
    out += _duplicates(kb.cpts, lambda c: c.node, "duplicate_cpt")
    concepts = kb.concept_map
    props = kb.proposition_map

    for c in kb.concepts:
        unknown = sorted(c.labels - kb.sigma)
        if unknown:
            out.append(Contradiction("unknown_label", c.id, f"labels {unknown} not in the label alphabet"))
        if c.embedding is not None and len(c.embedding) != kb.embedding_dim:
            out.append(Contradiction("embedding_dim", c.id,
                                     f"embedding has dimension {len(c.embedding)}, KB uses {kb.embedding_dim}"))
    for p in kb.propositions:
        if p.subject_concept is not None and p.subject_concept not in concepts:
            out.append(Contradiction("dangling_reference", p.subject_concept, f"subject of proposition {p.id!r}"))

    for i, r in enumerate(kb.rules):
        name = r.id or f"rule[{i}]"
        for atom in sorted(atoms(r.antecedent) | {r.consequent}):
            if atom not in props:
                out.append(Contradiction("dangling_reference", atom, f"cited by rule {name}"))
    for e in kb.exclusions:
        for end in (e.first, e.second):
            if end not in props:
                out.append(Contradiction("dangling_reference", end, "cited by exclusion"))
    exclusive = {frozenset((e.first, e.second)) for e in kb.exclusions}
    for i, a in enumerate(kb.rules):
        for b in kb.rules[i + 1:]:
            if a.antecedent == b.antecedent and frozenset((a.consequent, b.consequent)) in exclusive:
                out.append(Contradiction(
                    "exclusive_consequents", f"{a.consequent}/{b.consequent}",
                    f"rules {a.id or '?'} and {b.id or '?'} share an antecedent"))
    for key, atom in check_stratified(kb.rules):
        out.append(Contradiction("stratification", atom, f"negated in {key} but derived by a rule"))

    net = kb.bayes_net
    cycle = net.find_cycle()
    if cycle:
        out.append(Contradiction("cycle", cycle[0], " -> ".join(cycle)))
    for n in kb.bayes_nodes:
        for p in n.parents:
            if p not in net.nodes:
                out.append(Contradiction("dangling_reference", p, f"parent of node {n.id!r}"))
    for c in kb.cpts:
        if c.node not in net.nodes:
            out.append(Contradiction("dangling_reference", c.node, "CPT for unknown node"))
    for n in net.nodes.values():
        cpt = net.cpts.get(n.id)
        if cpt is None:
            out.append(Contradiction("invalid_cpt", n.id, "node has no CPT"))
        elif all(p in net.nodes for p in n.parents):
            out += [Contradiction("invalid_cpt", n.id, msg) for msg in cpt_problems(n, cpt, net.family_shape(n.id))]

    seen_bridges = set()
    for b in kb.bridges:
        if b.tcm_prop not in props:
            out.append(Contradiction("missing_bridge_endpoint", b.tcm_prop, f"bridge to {b.wm_node!r}"))
        if b.wm_node not in net.nodes:
            out.append(Contradiction("missing_bridge_endpoint", b.wm_node, f"bridge from {b.tcm_prop!r}"))
        if (b.tcm_prop, b.wm_node) in seen_bridges:
            out.append(Contradiction("duplicate_bridge", f"{b.tcm_prop}->{b.wm_node}"))
        seen_bridges.add((b.tcm_prop, b.wm_node))

    seen_obs = set()
    for c in kb.curves:
        if c.proposition not in props:
            out.append(Contradiction("dangling_reference", c.proposition, f"target of curve {c.observation!r}"))
        if c.observation in seen_obs:
            out.append(Contradiction("duplicate_curve", c.observation))
        seen_obs.add(c.observation)
    verb_classes = {v.verb_class for v in kb.verbs}
    for rel in kb.relations:
        for end in (rel.subject, rel.object):
            if end not in concepts:
                out.append(Contradiction("dangling_reference", end, "cited by relation"))
        if rel.verb_class not in verb_classes:
            out.append(Contradiction("dangling_reference", rel.verb_class, "relation verb class has no verb"))
    return out


# -- extension ---------------------------------------------------------------


@dataclass(frozen=True)
class Additions:
    concepts: tuple[Concept, ...] = ()
    labels: tuple[str, ...] = ()
    propositions: tuple[Proposition, ...] = ()
    rules: tuple[Rule, ...] = ()
    bridges: tuple[BridgeLink, ...] = ()
    bayes_nodes: tuple[BayesNode, ...] = ()
    cpts: tuple[CPT, ...] = ()
    exclusions: tuple[Exclusion, ...] = ()
    curves: tuple[MembershipCurve, ...] = ()
    relations: tuple[Relation, ...] = ()
    verbs: tuple[Verb, ...] = ()


def extend_kb(kb: KnowledgeBase, additions: Additions) -> KnowledgeBase:
    """Return ``kb`` plus ``additions`` at ``version + 1``.

    Raises :class:`ConsistencyError` if the result would be inconsistent;
    ``kb`` itself is never modified.
    """
    # existing nodes may not be redefined, only new ones added
    existing = {n.id for n in kb.bayes_nodes}
    clashes = [Contradiction("duplicate_node", n.id, "already defined") for n in additions.bayes_nodes if n.id in existing]
    clashes += [Contradiction("duplicate_cpt", c.node, "already defined") for c in additions.cpts if c.node in existing]
    new = replace(
        kb,
        concepts=kb.concepts + tuple(additions.concepts),
        sigma=kb.sigma | {normalize_label(x) for x in additions.labels},
        propositions=kb.propositions + tuple(additions.propositions),
        rules=kb.rules + tuple(additions.rules),
        bridges=kb.bridges + tuple(additions.bridges),
        bayes_nodes=kb.bayes_nodes + tuple(additions.bayes_nodes),
        cpts=kb.cpts + tuple(additions.cpts),
        exclusions=kb.exclusions + tuple(additions.exclusions),
        curves=kb.curves + tuple(additions.curves),
        relations=kb.relations + tuple(additions.relations),
        verbs=kb.verbs + tuple(additions.verbs),
        version=kb.version + 1,
    )
    violations = clashes + check_consistency(new)
    if violations:
        raise ConsistencyError(violations)
    # identical re-declarations are accepted but stored once
    return replace(
        new,
        concepts=tuple(dict.fromkeys(new.concepts)),
        propositions=tuple(dict.fromkeys(new.propositions)),
    )


def load_additions(path, kb: KnowledgeBase | None = None) -> Additions:
    """Read an additions file in manifest format (``config`` records are not allowed).

    CPT rows keyed by parent states may refer to nodes already in ``kb``.
    """
    path = Path(path)
    draft = _Draft()
    with path.open(encoding="utf-8") as fh:
        _read_records(fh, draft, str(path))
    if draft.config:
        raise SchemaError("additions may not contain config records", None, str(path))
    base_nodes = list(kb.bayes_nodes) if kb is not None else []
    tmp = _Draft(nodes=base_nodes + draft.nodes, cpt_specs=draft.cpt_specs)
    try:
        cpts = _build_cpts(tmp)
    except SchemaError as exc:
        raise SchemaError(str(exc), None, str(path)) from None
    return Additions(
        concepts=tuple(draft.concepts), labels=tuple(draft.labels), propositions=tuple(draft.propositions),
        rules=tuple(draft.rules), bridges=tuple(draft.bridges), bayes_nodes=tuple(draft.nodes), cpts=tuple(cpts),
        exclusions=tuple(draft.exclusions), curves=tuple(draft.curves), relations=tuple(draft.relations),
        verbs=tuple(draft.verbs),
    )
