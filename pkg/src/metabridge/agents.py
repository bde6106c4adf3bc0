"""Agent pipeline with recorded chain-of-thought steps.

A case flows through Knowledge-Extraction (membership curves), TCM reasoning
(fuzzy forward chaining), the WM specialist (posterior queries on bridged
nodes), Evaluation (sanity checks on the numbers) and the Coordinator, which
sorts each strong TCM finding into a convergence or a discrepancy.

Every step stores its inputs and outputs in the trace payload, so a result
can be rebuilt from the trace alone (:func:`replay_trace`).
"""

from __future__ import annotations

import json
import logging
import math
import os
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .bayes import BayesError, posterior
from .dataset import SVOSentence
from .embeddings import cosine_similarity
from .fuzzy import EVIDENCE, EvidenceSet, apply_curves, forward_chain
from .kb import BridgeLink, KnowledgeBase
from .rules import atoms, render

__all__ = [
    "AgentRole",
    "CoTStep",
    "CoTTrace",
    "Convergence",
    "Discrepancy",
    "BridgingResult",
    "PipelineConfig",
    "DeterministicBackend",
    "RemoteBackend",
    "BackendError",
    "RemoteProtocolError",
    "PipelineError",
    "UnknownConceptError",
    "run_case",
    "coordinator_merge",
    "judge_alignment",
    "replay_trace",
    "Judgement",
]

logger = logging.getLogger(__name__)


class AgentRole(str, Enum):
    KnowledgeExtraction = "KnowledgeExtraction"
    TcmReasoning = "TcmReasoning"
    WmSpecialist = "WmSpecialist"
    Evaluation = "Evaluation"
    Coordinator = "Coordinator"


PAYLOAD_TYPES = {
    AgentRole.KnowledgeExtraction: {"degree_assignment", "mapping"},
    AgentRole.TcmReasoning: {"degree_assignment", "mapping"},
    AgentRole.WmSpecialist: {"posterior", "mapping"},
    AgentRole.Evaluation: {"verdict"},
    AgentRole.Coordinator: {"mapping", "verdict"},
}


@dataclass(frozen=True)
class CoTStep:
    agent: AgentRole
    rationale: str
    payload: Mapping[str, Any]
    timestamp: int

    def __post_init__(self):
        object.__setattr__(self, "agent", AgentRole(self.agent))
        if not self.rationale.strip():
            raise ValueError("a reasoning step needs a rationale")
        if self.payload.get("type") not in PAYLOAD_TYPES[self.agent]:
            raise ValueError(f"{self.agent.value} cannot emit a {self.payload.get('type')!r} payload")

    def to_json(self, case_id: str) -> dict:
        return {"case_id": case_id, "timestamp": self.timestamp, "agent": self.agent.value,
                "rationale": self.rationale, "payload": self.payload}


@dataclass
class CoTTrace:
    case_id: str
    steps: list[CoTStep] = field(default_factory=list)

    def add(self, agent: AgentRole, rationale: str, payload: Mapping[str, Any]) -> CoTStep:
        step = CoTStep(agent, rationale, payload, len(self.steps) + 1)
        self.steps.append(step)
        return step

    def by_role(self, role: AgentRole) -> list[CoTStep]:
        return [s for s in self.steps if s.agent == role]

    def problems(self) -> list[str]:
        out = []
        stamps = [s.timestamp for s in self.steps]
        if stamps != sorted(stamps) or len(set(stamps)) != len(stamps):
            out.append("timestamps are not strictly increasing")
        if not self.steps or self.steps[-1].agent != AgentRole.Coordinator:
            out.append("trace does not end with a Coordinator step")
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_json(self.case_id), ensure_ascii=False, sort_keys=True) + "\n"
                       for s in self.steps)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> list["CoTTrace"]:
        traces: dict[str, CoTTrace] = {}
        for raw in lines:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            trace = traces.setdefault(rec["case_id"], cls(rec["case_id"]))
            trace.steps.append(CoTStep(AgentRole(rec["agent"]), rec["rationale"], rec["payload"], rec["timestamp"]))
        return list(traces.values())


@dataclass(frozen=True)
class Convergence:
    tcm_prop: str
    wm_node: str
    note: str


@dataclass(frozen=True)
class Discrepancy:
    tcm_prop: str
    reason: str  # "no_bridge" | "weak_wm_support"


@dataclass
class BridgingResult:
    tcm_findings: dict[str, float]
    wm_findings: dict[str, dict[str, float]]
    convergences: list[Convergence]
    discrepancies: list[Discrepancy]
    verdict: str
    trace: CoTTrace

    def to_json(self) -> dict:
        return {
            "case_id": self.trace.case_id,
            "tcm_findings": self.tcm_findings,
            "wm_findings": self.wm_findings,
            "convergences": [asdict(c) for c in self.convergences],
            "discrepancies": [asdict(d) for d in self.discrepancies],
            "verdict": self.verdict,
        }

    def summary(self) -> str:
        if not self.tcm_findings:
            return "no findings"
        parts = [f"{len(self.convergences)} convergence(s), {len(self.discrepancies)} discrepancy(ies)"]
        parts += [f"  convergence: {c.tcm_prop} ~ {c.wm_node} ({c.note})" for c in self.convergences]
        parts += [f"  discrepancy: {d.tcm_prop} ({d.reason})" for d in self.discrepancies]
        return "\n".join(parts)


# -- backends ----------------------------------------------------------------


class BackendError(RuntimeError):
    pass


class RemoteProtocolError(BackendError):
    pass


class PipelineError(RuntimeError):
    """A case failed; ``trace`` holds the steps completed so far."""

    def __init__(self, message: str, trace: CoTTrace):
        self.trace = trace
        super().__init__(message)


class UnknownConceptError(LookupError):
    pass


@dataclass(frozen=True)
class DeterministicBackend:
    kind: str = "deterministic"


@dataclass(frozen=True)
class RemoteBackend:
    """One synchronous JSON request per agent turn.

    Request: ``{"role", "case_id", "model", "prompt", "context"}``.
    Response: ``{"rationale": str, "payload": object}``.
    """

    endpoint: str
    model: str = ""
    timeout: float = 30.0
    token: str | None = None
    kind: str = "remote"

    @classmethod
    def from_env(cls, endpoint: str | None = None, model: str | None = None, timeout: float | None = None
                 ) -> "RemoteBackend":
        env = os.environ
        return cls(
            endpoint=endpoint or env.get("METABRIDGE_AGENT_ENDPOINT", ""),
            model=model if model is not None else env.get("METABRIDGE_AGENT_MODEL", ""),
            timeout=timeout if timeout is not None else float(env.get("METABRIDGE_AGENT_TIMEOUT", "30")),
            token=env.get("METABRIDGE_AGENT_TOKEN"),
        )

    def call(self, role: AgentRole, case_id: str, prompt: str, context: Mapping[str, Any]) -> tuple[str, dict]:
        if not self.endpoint:
            raise BackendError("remote backend has no endpoint configured")
        body = {"role": role.value, "case_id": case_id, "model": self.model, "prompt": prompt, "context": context}
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(body, ensure_ascii=False).encode("utf-8"),
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read().decode("utf-8")
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendError(f"{role.value} backend at {self.endpoint} failed: {exc}") from exc
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError:
            raise RemoteProtocolError(f"{role.value} backend replied with non-JSON text") from None
        if not isinstance(reply, dict) or not isinstance(reply.get("rationale"), str) \
                or not isinstance(reply.get("payload"), dict):
            raise RemoteProtocolError(f"{role.value} backend reply lacks rationale/payload")
        return reply["rationale"], reply["payload"]


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    tau_high: float = 0.7
    tau_low: float = 0.3
    theta: float = 0.6
    similarity_fallback: bool = True
    # roles that may be switched off for ablations; the Coordinator always runs
    enabled: frozenset[AgentRole] = frozenset(AgentRole)

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(AgentRole(r) for r in self.enabled) | {AgentRole.Coordinator})
        if not (0.0 <= self.tau_low <= self.tau_high <= 1.0):
            raise ValueError("thresholds must satisfy 0 <= tau_low <= tau_high <= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")

    @classmethod
    def from_kb(cls, kb: KnowledgeBase, **overrides) -> "PipelineConfig":
        c = kb.config
        base = dict(tau_high=c.tau_high, tau_low=c.tau_low, theta=c.theta, similarity_fallback=c.similarity_fallback)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


def _backend_for(backends, role: AgentRole):
    if backends is None:
        return DeterministicBackend()
    if isinstance(backends, Mapping):
        return backends.get(role, DeterministicBackend())
    return backends


# -- coordinator -------------------------------------------------------------


def coordinator_merge(tcm_findings: Mapping[str, float], wm_findings: Mapping[str, Mapping[str, float]],
                      bridges: Iterable[BridgeLink], tau_high: float, tau_low: float,
                      present: Mapping[str, str] | None = None) -> tuple[list[Convergence], list[Discrepancy]]:
    """Classify each TCM finding with degree >= ``tau_high``.

    A finding converges with every bridged WM node whose posterior mass on
    its "present" state reaches ``tau_low``; with no such node it is a
    discrepancy, reason ``no_bridge`` or ``weak_wm_support``.
    """
    if not (0.0 <= tau_low <= tau_high <= 1.0):
        raise ValueError("thresholds must satisfy 0 <= tau_low <= tau_high <= 1")
    present = present or {}
    bridges = list(bridges)
    convergences: list[Convergence] = []
    discrepancies: list[Discrepancy] = []
    for prop in sorted(tcm_findings):
        degree = tcm_findings[prop]
        if degree < tau_high:
            continue
        links = sorted((b for b in bridges if b.tcm_prop == prop), key=lambda b: b.wm_node)
        if not links:
            discrepancies.append(Discrepancy(prop, "no_bridge"))
            continue
        hits = []
        for b in links:
            post = wm_findings.get(b.wm_node, {})
            state = present.get(b.wm_node, "present")
            mass = post.get(state, 0.0)
            if mass >= tau_low:
                hits.append(Convergence(prop, b.wm_node,
                                        f"mu={degree:.4g}, P({b.wm_node}={state})={mass:.4g}, strength={b.strength:.4g}"))
        if hits:
            convergences.extend(hits)
        else:
            discrepancies.append(Discrepancy(prop, "weak_wm_support"))
    return convergences, discrepancies


# -- case pipeline -----------------------------------------------------------


def _fmt_degrees(d: Mapping[str, float]) -> str:
    return ", ".join(f"{k}={v:.4g}" for k, v in sorted(d.items()))


def _remote_degrees(backend: RemoteBackend, role: AgentRole, case_id: str, prompt: str, context: dict
                    ) -> tuple[str, dict[str, float]]:
    rationale, payload = backend.call(role, case_id, prompt, context)
    degrees = payload.get("degrees")
    if not isinstance(degrees, dict) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and 0.0 <= v <= 1.0 for v in degrees.values()):
        raise RemoteProtocolError(f"{role.value} reply must carry 'degrees' with values in [0, 1]")
    return rationale or "remote reasoning", {str(k): float(v) for k, v in degrees.items()}


def _extraction_step(kb, evidence, backend, trace, case_id) -> EvidenceSet:
    role = AgentRole.KnowledgeExtraction
    if isinstance(backend, RemoteBackend):
        rationale, degrees = _remote_degrees(
            backend, role, case_id, "Convert the raw observations into proposition degrees.",
            {"raw_observations": dict(evidence.raw_observations), "base_degrees": dict(evidence.base_degrees)})
        grounded = EvidenceSet(degrees, evidence.raw_observations, evidence.node_states)
    else:
        grounded = apply_curves(kb.curves, evidence)
        converted = sorted(set(grounded.base_degrees) - set(evidence.base_degrees)
                           | {c.proposition for c in kb.curves if c.observation in evidence.raw_observations})
        if grounded.base_degrees:
            rationale = f"evidence degrees: {_fmt_degrees(grounded.base_degrees)}"
            if converted:
                rationale += f"; from raw observations via membership curves: {', '.join(converted)}"
        else:
            rationale = "no findings: the case carries no graded evidence"
    trace.add(role, rationale, {"type": "degree_assignment", "degrees": dict(grounded.base_degrees),
                                "node_states": dict(grounded.node_states)})
    return grounded


def _tcm_step(kb, evidence, backend, trace, case_id, cfg) -> dict[str, float]:
    role = AgentRole.TcmReasoning
    if isinstance(backend, RemoteBackend):
        rationale, degrees = _remote_degrees(
            backend, role, case_id, "Apply the TCM diagnostic rules to the evidence degrees.",
            {"evidence": dict(evidence.base_degrees), "rules": [render(r.antecedent) + " => " + r.consequent
                                                                  for r in kb.rules]})
        derivation: dict[str, str] = {}
        fired: list[str] = []
    else:
        result = forward_chain(kb, evidence)
        degrees = dict(result.degrees)
        derivation = dict(result.derivation)
        rules = {r.id: r for r in kb.rules if r.id}
        fired = sorted({k for k in derivation.values() if k != EVIDENCE})
        lines = []
        for prop in sorted(degrees):
            key = derivation.get(prop)
            if key in (None, EVIDENCE) or degrees[prop] <= 0.0:
                continue
            rule = rules.get(key)
            support = ", ".join(sorted(atoms(rule.antecedent))) if rule else "rule antecedent"
            lines.append(f"{support} imply {prop} to degree {degrees[prop]:.4g} (rule {key})")
        rationale = "; ".join(lines) if lines else "no findings: no rule fired above degree 0"
    findings = {p: v for p, v in sorted(degrees.items()) if v > 0.0}
    trace.add(role, rationale, {"type": "degree_assignment", "degrees": findings, "derivation": derivation,
                                "fired_rules": fired})
    return findings


def _wm_step(kb, findings, evidence, backend, trace, case_id, cfg) -> dict[str, dict[str, float]]:
    role = AgentRole.WmSpecialist
    net = kb.bayes_net
    strong = [p for p in sorted(findings) if findings[p] >= cfg.tau_high]
    targets = sorted({b.wm_node for p in strong for b in kb.bridges_from(p)})
    observed = dict(evidence.node_states)
    if isinstance(backend, RemoteBackend):
        rationale, payload = backend.call(role, case_id, "Estimate posteriors for the bridged WM nodes.",
                                          {"targets": targets, "observed": observed, "findings": findings})
        posts = payload.get("posteriors")
        if not isinstance(posts, dict):
            raise RemoteProtocolError("WmSpecialist reply must carry 'posteriors'")
        wm: dict[str, dict[str, float]] = {}
        for node_id in targets:
            vec = posts.get(node_id)
            node = net.nodes[node_id]
            if not isinstance(vec, dict) or set(vec) != set(node.states) \
                    or abs(math.fsum(vec.values()) - 1.0) > 1e-6:
                raise RemoteProtocolError(f"posterior for {node_id!r} is malformed")
            wm[node_id] = {s: float(vec[s]) for s in node.states}
    else:
        wm = {}
        notes = []
        for node_id in targets:
            node = net.nodes[node_id]
            if node_id in observed:
                vec = [1.0 if s == observed[node_id] else 0.0 for s in node.states]
            else:
                vec = posterior(net, node_id, observed).tolist()
            wm[node_id] = dict(zip(node.states, vec))
            given = ", ".join(f"{k}={v}" for k, v in sorted(observed.items())) or "no WM evidence"
            notes.append(f"P({node_id}={node.present} | {given}) = {wm[node_id][node.present]:.4g}")
        rationale = "; ".join(notes) if notes else "no findings: no strong TCM finding has a bridged WM node"
    trace.add(role, rationale, {"type": "posterior", "posteriors": wm, "observed": observed})
    return wm


def _evaluation_step(findings, wm, trace) -> None:
    degrees_ok = all(0.0 <= v <= 1.0 for v in findings.values())
    posts_ok = all(abs(math.fsum(p.values()) - 1.0) <= 1e-9 and min(p.values()) >= 0.0 for p in wm.values())
    ok = degrees_ok and posts_ok
    rationale = ("degrees within [0, 1] and posteriors normalised" if ok
                 else "inconsistent numbers: " + ("degrees out of range " if not degrees_ok else "")
                 + ("unnormalised posterior" if not posts_ok else ""))
    trace.add(AgentRole.Evaluation, rationale,
              {"type": "verdict", "ok": ok, "checks": {"degrees_in_range": degrees_ok, "posteriors_normalised": posts_ok}})


def _coordinator_step(kb, findings, wm, trace, cfg) -> tuple[list[Convergence], list[Discrepancy]]:
    present = {n.id: n.present for n in kb.bayes_nodes}
    strong = {p for p, v in findings.items() if v >= cfg.tau_high}
    bridges = [b for b in kb.bridges if b.tcm_prop in strong]
    conv, disc = coordinator_merge(findings, wm, bridges, cfg.tau_high, cfg.tau_low, present)
    if not strong:
        rationale = "no findings: nothing reaches the high threshold"
    else:
        bits = [f"{c.tcm_prop} converges with {c.wm_node}" for c in conv]
        bits += [f"{d.tcm_prop}: {d.reason.replace('_', ' ')}" for d in disc]
        rationale = "; ".join(bits)
    trace.add(AgentRole.Coordinator, rationale, {
        "type": "mapping",
        "thresholds": {"tau_high": cfg.tau_high, "tau_low": cfg.tau_low},
        "bridges": [[b.tcm_prop, b.wm_node, b.strength] for b in bridges],
        "present": {n: present[n] for n in sorted({b.wm_node for b in bridges})},
        "convergences": [asdict(c) for c in conv],
        "discrepancies": [asdict(d) for d in disc],
    })
    return conv, disc


def run_case(kb: KnowledgeBase, evidence: EvidenceSet, backends=None, case_id: str = "case",
             config: PipelineConfig | None = None) -> BridgingResult:
    """Run one case through the pipeline.

    ``backends`` is a single backend or a mapping from role to backend;
    roles not listed use the deterministic backend. Any failure is raised as
    :class:`PipelineError` carrying the partial trace.
    """
    cfg = config or PipelineConfig.from_kb(kb)
    trace = CoTTrace(case_id)
    try:
        grounded = evidence
        if AgentRole.KnowledgeExtraction in cfg.enabled:
            grounded = _extraction_step(kb, evidence, _backend_for(backends, AgentRole.KnowledgeExtraction),
                                        trace, case_id)
        if AgentRole.TcmReasoning in cfg.enabled:
            findings = _tcm_step(kb, grounded, _backend_for(backends, AgentRole.TcmReasoning), trace, case_id, cfg)
        else:
            findings = {p: v for p, v in sorted(grounded.base_degrees.items()) if v > 0.0}
        wm: dict[str, dict[str, float]] = {}
        if AgentRole.WmSpecialist in cfg.enabled:
            wm = _wm_step(kb, findings, grounded, _backend_for(backends, AgentRole.WmSpecialist), trace, case_id, cfg)
        if AgentRole.Evaluation in cfg.enabled:
            _evaluation_step(findings, wm, trace)
        conv, disc = _coordinator_step(kb, findings, wm, trace, cfg)
    except PipelineError:
        raise
    except (BackendError, BayesError, ValueError) as exc:
        raise PipelineError(str(exc), trace) from exc
    verdict = "; ".join([f"{c.tcm_prop}~{c.wm_node}" for c in conv] + [f"{d.tcm_prop}!{d.reason}" for d in disc])
    return BridgingResult(findings, wm, conv, disc, verdict or "no findings", trace)


def replay_trace(trace: CoTTrace) -> BridgingResult:
    """Rebuild a result from trace payloads alone, re-running the merge."""
    problems = trace.problems()
    if problems:
        raise ValueError("; ".join(problems))
    tcm = trace.by_role(AgentRole.TcmReasoning)
    ke = trace.by_role(AgentRole.KnowledgeExtraction)
    if tcm:
        findings = dict(tcm[-1].payload["degrees"])
    elif ke:
        findings = {p: v for p, v in sorted(ke[-1].payload["degrees"].items()) if v > 0.0}
    else:
        findings = {}
    wm_steps = trace.by_role(AgentRole.WmSpecialist)
    wm = {k: dict(v) for k, v in wm_steps[-1].payload["posteriors"].items()} if wm_steps else {}
    coord = trace.steps[-1].payload
    bridges = [BridgeLink(t, w, s) for t, w, s in coord["bridges"]]
    th = coord["thresholds"]
    conv, disc = coordinator_merge(findings, wm, bridges, th["tau_high"], th["tau_low"], coord["present"])
    verdict = "; ".join([f"{c.tcm_prop}~{c.wm_node}" for c in conv] + [f"{d.tcm_prop}!{d.reason}" for d in disc])
    return BridgingResult(findings, wm, conv, disc, verdict or "no findings", trace)


# -- benchmark judging -------------------------------------------------------


@dataclass(frozen=True)
class Judgement:
    verdict: str  # "aligned" | "misaligned"
    branch: str  # relation | similarity | no_license | unknown_concept | remote
    trace: CoTTrace
    ratings: Mapping[str, float] = field(default_factory=dict)


def _template() -> str:
    return resources.files("metabridge").joinpath("templates/perceptual_cot.txt").read_text(encoding="utf-8")


RATING_KEYS = ("familiarity", "emotional_valence", "emotional_arousal", "semantic_accuracy")


def _judge_remote(sentence: SVOSentence, backend: RemoteBackend, trace: CoTTrace) -> Judgement:
    prompt = _template().format(system=sentence.system, text_zh=sentence.text_zh, text_en=sentence.text_en,
                                subject=sentence.subject, verb=sentence.verb, object=sentence.object)
    try:
        rationale, payload = backend.call(AgentRole.Coordinator, sentence.id, prompt, {"sentence_id": sentence.id})
    except BackendError as exc:
        raise PipelineError(str(exc), trace) from exc
    answer = payload.get("answer")
    if not isinstance(answer, str) or answer.strip().lower() not in ("yes", "no"):
        raise PipelineError(f"remote reply for {sentence.id!r} is not a yes/no answer: {answer!r}", trace)
    ratings = {}
    for key in RATING_KEYS:
        v = payload.get(key)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            ratings[key] = float(v)
    verdict = "aligned" if answer.strip().lower() == "yes" else "misaligned"
    trace.add(AgentRole.Coordinator, rationale or f"remote answer: {answer}",
              {"type": "verdict", "verdict": verdict, "branch": "remote", "ratings": ratings})
    return Judgement(verdict, "remote", trace, ratings)


def judge_alignment(kb: KnowledgeBase, sentence: SVOSentence, backend=None,
                    config: PipelineConfig | None = None) -> Judgement:
    """Decide whether ``sentence`` is licensed by the knowledge base.

    Deterministic rule: aligned iff the KB holds the relation
    (subject, verb class, object), or, with the similarity fallback on, the
    subject and object embeddings have cosine >= theta and the verb class is
    registered for the subject's system.
    """
    cfg = config or PipelineConfig.from_kb(kb)
    trace = CoTTrace(sentence.id)
    if isinstance(backend, RemoteBackend):
        return _judge_remote(sentence, backend, trace)

    subj = kb.resolve_concept(sentence.subject)
    obj = kb.resolve_concept(sentence.object)
    verb = kb.resolve_verb(sentence.verb)
    mapping = {"subject": subj.id if subj else None, "object": obj.id if obj else None,
               "verb_class": verb.verb_class if verb else None}
    missing = [t for t, c in ((sentence.subject, subj), (sentence.object, obj)) if c is None]
    trace.add(AgentRole.KnowledgeExtraction,
              f"mapped terms: subject {sentence.subject!r} -> {mapping['subject']}, "
              f"verb {sentence.verb!r} -> {mapping['verb_class']}, object {sentence.object!r} -> {mapping['object']}",
              {"type": "mapping", **mapping})
    if missing and not cfg.similarity_fallback:
        raise UnknownConceptError(f"sentence {sentence.id!r}: unknown concept(s) {missing}")

    specialist = AgentRole.TcmReasoning if sentence.system == "TCM" else AgentRole.WmSpecialist
    licensed_relation = bool(subj and obj and verb and kb.has_relation(subj.id, verb.verb_class, obj.id))
    similarity = None
    if missing:
        branch, verdict = "unknown_concept", "misaligned"
        note = f"no concept for {', '.join(repr(m) for m in missing)}"
    elif licensed_relation:
        branch, verdict = "relation", "aligned"
        note = f"relation ({subj.id}, {verb.verb_class}, {obj.id}) is in the knowledge base"
    elif cfg.similarity_fallback and subj.embedding is not None and obj.embedding is not None:
        similarity = cosine_similarity(subj.embedding, obj.embedding)
        registered = verb is not None and subj.system in verb.systems
        if similarity >= cfg.theta and registered:
            branch, verdict = "similarity", "aligned"
            note = f"cosine({subj.id}, {obj.id}) = {similarity:.4g} >= {cfg.theta} and verb class registered for {subj.system}"
        else:
            branch, verdict = "no_license", "misaligned"
            why = [] if similarity >= cfg.theta else [f"cosine {similarity:.4g} < {cfg.theta}"]
            if not registered:
                why.append(f"verb {sentence.verb!r} not registered for {subj.system}")
            note = "no relation; " + "; ".join(why)
    else:
        branch, verdict = "no_license", "misaligned"
        note = "no relation and no similarity fallback available"
    trace.add(specialist, note, {"type": "mapping", "branch": branch, "relation_found": licensed_relation,
                                 "similarity": similarity})
    trace.add(AgentRole.Coordinator, f"{verdict}: {note}", {"type": "verdict", "verdict": verdict, "branch": branch})
    return Judgement(verdict, branch, trace)
