"""Discrete Bayesian networks: exact inference by variable elimination,
maximum-likelihood and EM parameter learning, forward sampling."""

from __future__ import annotations

import itertools
import logging
import math
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "BayesNode",
    "CPT",
    "BayesNet",
    "Factor",
    "BayesError",
    "CycleError",
    "InconsistentEvidenceError",
    "EMResult",
    "joint_probability",
    "posterior",
    "query_joint",
    "elimination_order",
    "learn_ml",
    "learn_em",
    "log_likelihood",
    "sample",
]

logger = logging.getLogger(__name__)

ROLES = ("TCM", "WM", "Bridge")


class BayesError(ValueError):
    pass


class CycleError(BayesError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("cycle in network: " + " -> ".join(cycle))


class InconsistentEvidenceError(BayesError):
    """The evidence has probability zero under the model."""


@dataclass(frozen=True)
class BayesNode:
    id: str
    states: tuple[str, ...]
    parents: tuple[str, ...] = ()
    role: str = "WM"
    # state counted as "finding present" when the coordinator reads a posterior
    present_state: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "parents", tuple(self.parents))
        if len(self.states) < 2:
            raise BayesError(f"node {self.id!r} needs at least two states")
        if len(set(self.states)) != len(self.states):
            raise BayesError(f"node {self.id!r} has repeated state names")
        if len(set(self.parents)) != len(self.parents):
            raise BayesError(f"node {self.id!r} lists a parent twice")
        if self.role not in ROLES:
            raise BayesError(f"node {self.id!r}: role must be one of {ROLES}")
        if self.present_state is not None and self.present_state not in self.states:
            raise BayesError(f"node {self.id!r}: present_state {self.present_state!r} is not a state")

    @property
    def card(self) -> int:
        return len(self.states)

    @property
    def present(self) -> str:
        if self.present_state is not None:
            return self.present_state
        return "present" if "present" in self.states else self.states[-1]

    def index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise BayesError(f"unknown state {state!r} for node {self.id!r}") from None


@dataclass(frozen=True)
class CPT:
    """Conditional table for one node.

    ``rows`` holds one probability vector per parent configuration, in
    ``itertools.product`` order over the parents' states.
    """

    node: str
    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(tuple(float(p) for p in row) for row in self.rows))

    @classmethod
    def from_array(cls, node: str, probs: np.ndarray) -> "CPT":
        probs = np.asarray(probs, dtype=float)
        flat = probs.reshape(-1, probs.shape[-1])
        return cls(node, tuple(tuple(row) for row in flat.tolist()))

    @classmethod
    def from_table(cls, node: BayesNode, parent_nodes: Sequence[BayesNode], table: Mapping) -> "CPT":
        rows = []
        for combo in itertools.product(*(p.states for p in parent_nodes)):
            if combo not in table:
                raise BayesError(f"CPT for {node.id!r} lacks parent configuration {combo}")
            rows.append(tuple(table[combo]))
        if len(table) != len(rows):
            raise BayesError(f"CPT for {node.id!r} has configurations that do not match its parents")
        return cls(node.id, tuple(rows))

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.asarray(self.rows, dtype=float).reshape(shape)


@dataclass(frozen=True)
class BayesNet:
    nodes: Mapping[str, BayesNode] = field(default_factory=dict)
    cpts: Mapping[str, CPT] = field(default_factory=dict)

    @classmethod
    def build(cls, nodes: Iterable[BayesNode], cpts: Iterable[CPT] = ()) -> "BayesNet":
        return cls({n.id: n for n in nodes}, {c.node: c for c in cpts})

    def family_shape(self, node_id: str) -> tuple[int, ...]:
        node = self.nodes[node_id]
        return tuple(self.nodes[p].card for p in node.parents) + (node.card,)

    def table(self, node_id: str) -> np.ndarray:
        return self.cpts[node_id].array(self.family_shape(node_id))

    def find_cycle(self) -> list[str] | None:
        """Return one directed cycle (first node repeated at the end), or None."""
        color: dict[str, int] = {}
        stack: list[str] = []

        def visit(n: str) -> list[str] | None:
            color[n] = 1
            stack.append(n)
            for child in self.children(n):
                if color.get(child) == 1:
                    return stack[stack.index(child):] + [child]
                if child not in color:
                    found = visit(child)
                    if found:
                        return found
            stack.pop()
            color[n] = 2
            return None

        for n in sorted(self.nodes):
            if n not in color:
                found = visit(n)
                if found:
                    return found
        return None

    def children(self, node_id: str) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if node_id in n.parents)

    def topological_order(self) -> list[str]:
        cycle = self.find_cycle()
        if cycle:
            raise CycleError(cycle)
        order: list[str] = []
        placed: set[str] = set()
        remaining = sorted(self.nodes)
        while remaining:
            for n in remaining:
                if all(p in placed or p not in self.nodes for p in self.nodes[n].parents):
                    order.append(n)
                    placed.add(n)
                    remaining.remove(n)
                    break
        return order

    def problems(self, *, require_cpts: bool = True) -> list[str]:
        out = []
        for node in self.nodes.values():
            for p in node.parents:
                if p not in self.nodes:
                    out.append(f"node {node.id!r} has unknown parent {p!r}")
        cycle = self.find_cycle()
        if cycle:
            out.append("cycle: " + " -> ".join(cycle))
        for cid in self.cpts:
            if cid not in self.nodes:
                out.append(f"CPT for unknown node {cid!r}")
        for node in self.nodes.values():
            cpt = self.cpts.get(node.id)
            if cpt is None:
                if require_cpts:
                    out.append(f"node {node.id!r} has no CPT")
                continue
            if any(p not in self.nodes for p in node.parents):
                continue
            out.extend(cpt_problems(node, cpt, self.family_shape(node.id)))
        return out

    def validate(self, *, require_cpts: bool = True) -> None:
        cycle = self.find_cycle()
        if cycle:
            raise CycleError(cycle)
        issues = self.problems(require_cpts=require_cpts)
        if issues:
            raise BayesError("; ".join(issues))

    def without_cpts(self) -> "BayesNet":
        return BayesNet(dict(self.nodes), {})

    def with_cpts(self, cpts: Mapping[str, CPT]) -> "BayesNet":
        return BayesNet(dict(self.nodes), dict(cpts))


def cpt_problems(node: BayesNode, cpt: CPT, shape: tuple[int, ...]) -> list[str]:
    n_rows = math.prod(shape[:-1])
    if len(cpt.rows) != n_rows:
        return [f"CPT for {node.id!r} has {len(cpt.rows)} rows, expected {n_rows}"]
    out = []
    for i, row in enumerate(cpt.rows):
        if len(row) != node.card:
            out.append(f"CPT for {node.id!r} row {i} has {len(row)} entries, expected {node.card}")
        elif any(p < 0 or not math.isfinite(p) for p in row):
            out.append(f"CPT for {node.id!r} row {i} has a negative or non-finite entry")
        elif abs(math.fsum(row) - 1.0) > 1e-9:
            out.append(f"CPT for {node.id!r} row {i} sums to {math.fsum(row)!r}")
    return out


# -- factors -----------------------------------------------------------------


@dataclass
class Factor:
    vars: tuple[str, ...]
    values: np.ndarray

    def __mul__(self, other: "Factor") -> "Factor":
        union = self.vars + tuple(v for v in other.vars if v not in self.vars)
        letters = {v: string.ascii_letters[i] for i, v in enumerate(union)}
        spec = "{},{}->{}".format(
            "".join(letters[v] for v in self.vars),
            "".join(letters[v] for v in other.vars),
            "".join(letters[v] for v in union),
        )
        return Factor(union, np.einsum(spec, self.values, other.values))

    def sum_out(self, var: str) -> "Factor":
        axis = self.vars.index(var)
        return Factor(self.vars[:axis] + self.vars[axis + 1:], self.values.sum(axis=axis))

    def reduce(self, evidence: Mapping[str, int]) -> "Factor":
        index = tuple(evidence.get(v, slice(None)) for v in self.vars)
        return Factor(tuple(v for v in self.vars if v not in evidence), self.values[index])

    def transpose(self, order: Sequence[str]) -> "Factor":
        return Factor(tuple(order), np.transpose(self.values, [self.vars.index(v) for v in order]))


def _evidence_indices(net: BayesNet, evidence: Mapping[str, str]) -> dict[str, int]:
    out = {}
    for var, state in evidence.items():
        if var not in net.nodes:
            raise BayesError(f"evidence names unknown node {var!r}")
        out[var] = net.nodes[var].index(state)
    return out


def elimination_order(factors: Sequence[Factor], eliminate: Iterable[str]) -> list[str]:
    """Greedy min-degree order on the interaction graph, ties broken by node id."""
    scopes = [set(f.vars) for f in factors]
    todo = set(eliminate)
    order = []
    while todo:
        def degree(v: str) -> int:
            nbrs = set()
            for s in scopes:
                if v in s:
                    nbrs |= s
            return len(nbrs - {v})

        v = min(todo, key=lambda v: (degree(v), v))
        merged = set()
        rest = []
        for s in scopes:
            if v in s:
                merged |= s
            else:
                rest.append(s)
        merged.discard(v)
        scopes = rest + ([merged] if merged else [])
        todo.remove(v)
        order.append(v)
    return order


def _eliminate(net: BayesNet, keep: Sequence[str], evidence: Mapping[str, str], order: Sequence[str] | None = None) -> Factor:
    """Unnormalised factor over ``keep`` equal to P(keep, evidence)."""
    net.topological_order()  # raises on cycles
    ev = _evidence_indices(net, evidence)
    factors = []
    for node_id, node in net.nodes.items():
        if node_id not in net.cpts:
            raise BayesError(f"node {node_id!r} has no CPT")
        f = Factor(node.parents + (node_id,), net.table(node_id))
        factors.append(f.reduce(ev))
    hidden = [v for v in net.nodes if v not in ev and v not in keep]
    if order is None:
        order = elimination_order(factors, hidden)
    elif set(order) != set(hidden):
        raise BayesError("elimination order must list exactly the hidden variables")
    for var in order:
        touching = [f for f in factors if var in f.vars]
        factors = [f for f in factors if var not in f.vars]
        if not touching:
            continue
        prod = touching[0]
        for f in touching[1:]:
            prod = prod * f
        factors.append(prod.sum_out(var))
    result = Factor((), np.array(1.0))
    for f in factors:
        result = result * f
    missing = [v for v in keep if v not in result.vars]
    if missing:  # cannot happen for a valid net; guard against silent shape bugs
        raise BayesError(f"variables {missing} vanished during elimination")
    return result.transpose(keep)


def query_joint(net: BayesNet, variables: Sequence[str], evidence: Mapping[str, str] | None = None,
                order: Sequence[str] | None = None) -> np.ndarray:
    """Exact P(variables | evidence), axes in the order given."""
    evidence = dict(evidence or {})
    for v in variables:
        if v not in net.nodes:
            raise BayesError(f"unknown node {v!r}")
        if v in evidence:
            raise BayesError(f"query variable {v!r} is also observed")
    f = _eliminate(net, tuple(variables), evidence, order)
    z = float(f.values.sum())
    if not z > 0.0:
        raise InconsistentEvidenceError(f"evidence {evidence} has probability zero under the model")
    return f.values / z


def posterior(net: BayesNet, query: str, evidence: Mapping[str, str] | None = None,
              order: Sequence[str] | None = None) -> np.ndarray:
    """P(query | evidence) as a vector over ``net.nodes[query].states``."""
    return query_joint(net, [query], evidence, order)


def joint_probability(net: BayesNet, assignment: Mapping[str, str]) -> float:
    p = 1.0
    for node_id, node in net.nodes.items():
        if node_id not in assignment:
            raise BayesError(f"assignment lacks node {node_id!r}")
        idx = tuple(net.nodes[q].index(assignment[q]) for q in node.parents) + (node.index(assignment[node_id]),)
        p *= float(net.table(node_id)[idx])
    return p


def sample(net: BayesNet, n: int, seed: int = 0) -> list[dict[str, str]]:
    rng = np.random.default_rng(seed)
    order = net.topological_order()
    tables = {v: net.table(v) for v in order}
    records = []
    for _ in range(n):
        idx: dict[str, int] = {}
        for v in order:
            node = net.nodes[v]
            row = tables[v][tuple(idx[p] for p in node.parents)]
            idx[v] = int(rng.choice(node.card, p=row))
        records.append({v: net.nodes[v].states[i] for v, i in idx.items()})
    return records


# -- learning ----------------------------------------------------------------


def _counts_to_cpts(net: BayesNet, counts: Mapping[str, np.ndarray], alpha: float) -> dict[str, CPT]:
    cpts = {}
    for node_id, c in counts.items():
        num = c + alpha
        den = num.sum(axis=-1, keepdims=True)
        empty = (den == 0.0)
        if empty.any():
            warnings.warn(
                f"node {node_id!r}: {int(empty.sum())} parent configuration(s) never observed; using uniform rows",
                RuntimeWarning,
                stacklevel=3,
            )
        card = c.shape[-1]
        probs = np.where(empty, 1.0 / card, num / np.where(empty, 1.0, den))
        cpts[node_id] = CPT.from_array(node_id, probs)
    return cpts


def _clean_record(net: BayesNet, record: Mapping[str, str | None], lineno: int) -> dict[str, str]:
    out = {}
    for k, v in record.items():
        if k not in net.nodes:
            raise BayesError(f"record {lineno}: unknown node {k!r}")
        if v is None:
            continue
        if v not in net.nodes[k].states:
            raise BayesError(f"record {lineno}: invalid state {v!r} for node {k!r}")
        out[k] = v
    return out


def learn_ml(structure: BayesNet, data: Iterable[Mapping[str, str]], alpha: float = 1.0) -> BayesNet:
    """Smoothed maximum-likelihood CPTs from complete records.

    Each entry is (count + alpha) / (parent count + alpha * |states|).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    structure.validate(require_cpts=False)
    counts = {v: np.zeros(structure.family_shape(v)) for v in structure.nodes}
    for lineno, raw in enumerate(data, start=1):
        rec = _clean_record(structure, raw, lineno)
        missing = [v for v in structure.nodes if v not in rec]
        if missing:
            raise BayesError(f"record {lineno}: missing value for {missing}; use learn_em for incomplete data")
        for v, node in structure.nodes.items():
            idx = tuple(structure.nodes[p].index(rec[p]) for p in node.parents) + (node.index(rec[v]),)
            counts[v][idx] += 1.0
    return structure.with_cpts(_counts_to_cpts(structure, counts, alpha))


@dataclass
class EMResult:
    net: BayesNet
    log_likelihood: float
    iterations: int
    history: list[float]  # observed-data log-likelihood of the parameters entering each E-step
    converged: bool


def _random_cpts(structure: BayesNet, rng: np.random.Generator) -> dict[str, CPT]:
    out = {}
    for v in sorted(structure.nodes):
        shape = structure.family_shape(v)
        probs = rng.dirichlet(np.ones(shape[-1]), size=math.prod(shape[:-1]))
        out[v] = CPT.from_array(v, probs)
    return out


def _e_step(net: BayesNet, patterns: list[tuple[dict[str, str], int]]) -> tuple[dict[str, np.ndarray], float]:
    counts = {v: np.zeros(net.family_shape(v)) for v in net.nodes}
    ll = 0.0
    for evidence, mult in patterns:
        fam_hidden: dict[str, list[str]] = {}
        for v, node in net.nodes.items():
            fam = node.parents + (v,)
            fam_hidden[v] = [u for u in fam if u not in evidence]
        z = None
        for v, node in net.nodes.items():
            fam = node.parents + (v,)
            hidden = fam_hidden[v]
            idx = tuple(slice(None) if u in hidden else net.nodes[u].index(evidence[u]) for u in fam)
            if not hidden:
                counts[v][idx] += mult
                continue
            f = _eliminate(net, tuple(hidden), evidence)
            total = float(f.values.sum())
            if not total > 0.0:
                raise InconsistentEvidenceError(f"record pattern {evidence} has probability zero")
            z = total
            counts[v][idx] += mult * (f.values / total)
        if z is None:
            z = float(_eliminate(net, (), evidence).values.sum())
            if not z > 0.0:
                raise InconsistentEvidenceError(f"record pattern {evidence} has probability zero")
        ll += mult * math.log(z)
    return counts, ll


def _patterns(structure: BayesNet, data: Iterable[Mapping[str, str | None]]) -> list[tuple[dict[str, str], int]]:
    tally: Counter = Counter()
    for lineno, raw in enumerate(data, start=1):
        rec = _clean_record(structure, raw, lineno)
        if not rec:
            raise BayesError(f"record {lineno} observes no node")
        tally[tuple(sorted(rec.items()))] += 1
    return [(dict(key), n) for key, n in sorted(tally.items())]


def log_likelihood(net: BayesNet, data: Iterable[Mapping[str, str | None]]) -> float:
    """Observed-data log-likelihood, marginalising missing entries."""
    total = 0.0
    for evidence, mult in _patterns(net, data):
        z = float(_eliminate(net, (), evidence).values.sum())
        if not z > 0.0:
            return -math.inf
        total += mult * math.log(z)
    return total


def learn_em(structure: BayesNet, data: Iterable[Mapping[str, str | None]], max_iters: int = 100,
             tol: float = 1e-6, alpha: float = 1.0, seed: int = 0) -> EMResult:
    """Expectation-maximisation for records with missing entries.

    Starts from the structure's CPTs when it carries a full set, otherwise
    from seeded random rows. Each iteration runs an E-step (expected family
    counts from exact posteriors) and the smoothed M-step of :func:`learn_ml`,
    then stops once the log-likelihood gain drops below ``tol``.
    With ``alpha > 0`` the monotone quantity is the smoothed objective, so
    pass ``alpha=0`` when tracking the plain likelihood.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    structure.validate(require_cpts=False)
    patterns = _patterns(structure, data)
    if set(structure.cpts) == set(structure.nodes) and not structure.problems():
        net = structure
    else:
        net = structure.with_cpts(_random_cpts(structure, np.random.default_rng(seed)))

    counts, ll = _e_step(net, patterns)
    history = [ll]
    iterations = 0
    converged = False
    while iterations < max_iters:
        net = structure.with_cpts(_counts_to_cpts(structure, counts, alpha))
        iterations += 1
        counts, new_ll = _e_step(net, patterns)
        gain = new_ll - history[-1]
        history.append(new_ll)
        logger.debug("EM iteration %d: log-likelihood %.12g (gain %.3g)", iterations, new_ll, gain)
        if gain < tol:
            converged = True
            break
    return EMResult(net, history[-1], iterations, history, converged)
