"""Fuzzy truth degrees and weighted forward chaining.

Connectives use the min/max family: AND is min, OR is max, NOT a is 1 - a.
A rule fires at min(weight, degree of its antecedent); several rules with the
same consequent are aggregated by max. Evidence degrees act as floors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .rules import And, Atom, Not, Or, Rule, RuleExpr, atoms, negated_atoms

__all__ = [
    "EvidenceSet",
    "MembershipCurve",
    "DegreeAssignment",
    "StratificationError",
    "apply_curves",
    "interpolate",
    "eval_expr",
    "forward_chain",
    "round_bound",
    "load_evidence",
]

EVIDENCE = "evidence"


class StratificationError(ValueError):
    pass


def _check_degree(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ValueError(f"degree for {name!r} is {value}, expected a value in [0, 1]")
    return value


@dataclass(frozen=True)
class MembershipCurve:
    """Piecewise-linear map from a raw observation onto a proposition's degree."""

    observation: str
    breakpoints: tuple[tuple[float, float], ...]
    proposition: str = ""

    def __post_init__(self):
        pts = tuple((float(x), float(mu)) for x, mu in self.breakpoints)
        if not pts:
            raise ValueError(f"curve for {self.observation!r} has no breakpoints")
        for (x0, _), (x1, _) in zip(pts, pts[1:]):
            if not x1 > x0:
                raise ValueError(f"curve for {self.observation!r}: x values must be strictly increasing")
        for _, mu in pts:
            _check_degree(self.observation, mu)
        object.__setattr__(self, "breakpoints", pts)
        if not self.proposition:
            object.__setattr__(self, "proposition", self.observation)

    def __call__(self, x: float) -> float:
        return interpolate(self.breakpoints, x)


def interpolate(breakpoints, x: float) -> float:
    xs = [p[0] for p in breakpoints]
    if x <= xs[0]:
        return breakpoints[0][1]
    if x >= xs[-1]:
        return breakpoints[-1][1]
    # bisect on the right-open segment containing x
    lo, hi = 0, len(xs) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    (x0, y0), (x1, y1) = breakpoints[lo], breakpoints[hi]
    t = (x - x0) / (x1 - x0)
    return y0 + t * (y1 - y0)


@dataclass(frozen=True)
class EvidenceSet:
    """Case evidence.

    ``base_degrees`` are proposition degrees, ``raw_observations`` are numeric
    measurements awaiting a membership curve, and ``node_states`` are crisp
    observations of Bayes-net nodes (lab findings and the like).
    """

    base_degrees: Mapping[str, float] = field(default_factory=dict)
    raw_observations: Mapping[str, float] = field(default_factory=dict)
    node_states: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "base_degrees", {k: _check_degree(k, v) for k, v in self.base_degrees.items()})
        object.__setattr__(self, "raw_observations", {k: float(v) for k, v in self.raw_observations.items()})
        object.__setattr__(self, "node_states", dict(self.node_states))

    def is_empty(self) -> bool:
        return not (self.base_degrees or self.raw_observations or self.node_states)


@dataclass(frozen=True)
class DegreeAssignment:
    degrees: Mapping[str, float]
    derivation: Mapping[str, str]
    rounds: int = 0

    def __getitem__(self, prop: str) -> float:
        return self.degrees.get(prop, 0.0)

    def get(self, prop: str, default: float = 0.0) -> float:
        return self.degrees.get(prop, default)


def apply_curves(curves: Iterable[MembershipCurve], evidence: EvidenceSet) -> EvidenceSet:
    """Convert raw observations to base degrees.

    A curve-derived degree never lowers a degree already present in the
    evidence for the same proposition.
    """
    by_obs: dict[str, MembershipCurve] = {}
    for curve in curves:
        if curve.observation in by_obs:
            raise ValueError(f"duplicate membership curve for observation {curve.observation!r}")
        by_obs[curve.observation] = curve
    degrees = dict(evidence.base_degrees)
    for obs, value in evidence.raw_observations.items():
        curve = by_obs.get(obs)
        if curve is None:
            continue
        mu = curve(value)
        degrees[curve.proposition] = max(degrees.get(curve.proposition, 0.0), mu)
    return EvidenceSet(degrees, evidence.raw_observations, evidence.node_states)


def eval_expr(expr: RuleExpr, assignment) -> float:
    """Degree of ``expr``; atoms missing from ``assignment`` read as 0.0."""
    if isinstance(expr, Atom):
        return assignment.get(expr.name, 0.0)
    if isinstance(expr, Not):
        return 1.0 - eval_expr(expr.operand, assignment)
    if isinstance(expr, And):
        return min(eval_expr(expr.left, assignment), eval_expr(expr.right, assignment))
    if isinstance(expr, Or):
        return max(eval_expr(expr.left, assignment), eval_expr(expr.right, assignment))
    raise TypeError(f"not a rule expression: {expr!r}")


def _rules_of(kb_or_rules) -> list[Rule]:
    return list(getattr(kb_or_rules, "rules", kb_or_rules))


def _rule_key(index: int, rule: Rule) -> str:
    return rule.id or f"rule[{index}]"


def check_stratified(rules: Iterable[Rule]) -> list[tuple[str, str]]:
    """(rule key, atom) pairs where a negated atom is some rule's consequent."""
    rules = list(rules)
    heads = {r.consequent for r in rules}
    bad = []
    for i, r in enumerate(rules):
        for name in sorted(negated_atoms(r.antecedent) & heads):
            bad.append((_rule_key(i, r), name))
    return bad


def round_bound(rules: Iterable[Rule], evidence: EvidenceSet) -> int:
    """Upper bound on the rounds :func:`forward_chain` may take.

    Every derived degree lies in {0, 1} | evidence | 1 - evidence | weights,
    and each counted round raises at least one proposition to a strictly
    larger member of that set.
    """
    rules = list(rules)
    values = {0.0, 1.0}
    for v in evidence.base_degrees.values():
        values.update((v, 1.0 - v))
    values.update(r.weight for r in rules)
    props = set(evidence.base_degrees)
    for r in rules:
        props.add(r.consequent)
        props.update(atoms(r.antecedent))
    return max(1, len(props)) * len(values)


def forward_chain(kb, evidence: EvidenceSet) -> DegreeAssignment:
    """Least fixpoint of weighted fuzzy rule application over ``kb.rules``.

    ``rounds`` counts the rounds that raised some degree; the closing pass
    that confirms the fixpoint is not counted.

    Negated atoms must be evidence-grounded (never a rule consequent);
    otherwise :class:`StratificationError` is raised.
    """
    rules = _rules_of(kb)
    bad = check_stratified(rules)
    if bad:
        listing = ", ".join(f"{atom} (in {key})" for key, atom in bad)
        raise StratificationError(f"negated atoms are derived by other rules: {listing}")

    degrees = dict(evidence.base_degrees)
    derivation = {p: EVIDENCE for p in degrees}
    keyed = [(_rule_key(i, r), r) for i, r in enumerate(rules)]
    rounds = 0
    while True:
        # Jacobi update: every rule reads the previous round's degrees
        best: dict[str, tuple[float, str]] = {}
        for key, rule in keyed:
            fired = min(rule.weight, eval_expr(rule.antecedent, degrees))
            prev = best.get(rule.consequent)
            if prev is None or fired > prev[0] or (fired == prev[0] and key < prev[1]):
                best[rule.consequent] = (fired, key)
        changed = False
        for prop, (value, key) in best.items():
            if value > degrees.get(prop, 0.0):
                degrees[prop] = value
                derivation[prop] = key
                changed = True
            elif prop not in degrees:
                degrees[prop] = value
                derivation[prop] = key
        if not changed:
            break
        rounds += 1
    return DegreeAssignment(degrees, derivation, rounds)


def load_evidence(path) -> EvidenceSet:
    """Read ``kind=evidence`` records from a JSON-lines file.

    Each record carries one of ``proposition``+``degree``,
    ``observation``+``value`` or ``node``+``state``.
    """
    degrees: dict[str, float] = {}
    raw: dict[str, float] = {}
    states: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict) or rec.get("kind") != "evidence":
                raise ValueError(f"{path}:{lineno}: expected a kind=evidence record")
            try:
                if "proposition" in rec:
                    degrees[str(rec["proposition"])] = _check_degree(rec["proposition"], rec["degree"])
                elif "observation" in rec:
                    raw[str(rec["observation"])] = float(rec["value"])
                elif "node" in rec:
                    states[str(rec["node"])] = str(rec["state"])
                else:
                    raise KeyError("proposition, observation or node")
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed evidence record ({exc})") from None
    return EvidenceSet(degrees, raw, states)
