"""``metabridge`` command line.

Exit codes: 0 success, 1 operational error (I/O, schema, backend), 2 validation
or contradiction findings.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .agents import (
    AgentRole,
    CoTTrace,
    DeterministicBackend,
    PipelineConfig,
    PipelineError,
    RemoteBackend,
    UnknownConceptError,
    judge_alignment,
    run_case,
)
from .bayes import BayesError, posterior
from .dataset import DatasetError, load_dataset, save_dataset, screen_terms, stratified_split
from .embeddings import Corpus, EmbeddingError, EmbeddingTable, Tokenizer, build_embeddings, top_k
from .fuzzy import load_evidence
from .kb import ConsistencyError, SchemaError, check_consistency, extend_kb, load_additions, load_kb, parse_manifest, save_kb
from .metrics import compute_metrics, confusion_from, render_report

logger = logging.getLogger("metabridge")

EXIT_OK, EXIT_ERROR, EXIT_FINDINGS = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        self.code = code
        super().__init__(message)


def _say(text: str = "") -> None:
    sys.stdout.write(text + "\n")


def _warn(text: str) -> None:
    sys.stderr.write(text + "\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


# -- kb ----------------------------------------------------------------------


def cmd_kb_check(args) -> int:
    path = Path(args.kb)
    try:
        with path.open(encoding="utf-8") as fh:
            kb = parse_manifest(fh, str(path))
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror or exc}")
    except SchemaError as exc:
        raise CLIError(f"schema error: {exc}")
    violations = check_consistency(kb)
    for v in violations:
        _say(str(v))
    if violations:
        _warn(f"{path}: {len(violations)} violation(s)")
        return EXIT_FINDINGS
    _say(f"{path}: consistent (version {kb.version}, {len(kb.concepts)} concepts, {len(kb.propositions)} "
         f"propositions, {len(kb.rules)} rules, {len(kb.bayes_nodes)} nodes)")
    return EXIT_OK


def _load_kb(path) -> Any:
    try:
        return load_kb(path)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror or exc}")
    except SchemaError as exc:
        raise CLIError(f"schema error: {exc}")
    except ConsistencyError as exc:
        for v in exc.violations:
            _say(str(v))
        raise CLIError(f"{path}: knowledge base is inconsistent", EXIT_FINDINGS)


def cmd_kb_extend(args) -> int:
    kb = _load_kb(args.kb)
    try:
        additions = load_additions(args.additions, kb)
    except OSError as exc:
        raise CLIError(f"cannot read {args.additions}: {exc.strerror or exc}")
    except SchemaError as exc:
        raise CLIError(f"schema error: {exc}")
    try:
        new = extend_kb(kb, additions)
    except ConsistencyError as exc:
        for v in exc.violations:
            _say(str(v))
        raise CLIError("extension rejected; knowledge base unchanged", EXIT_FINDINGS)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_kb(new, out)
    _say(f"wrote {out} (version {new.version})")
    return EXIT_OK


# -- infer -------------------------------------------------------------------


def _pipeline_config(kb, args) -> PipelineConfig:
    disabled = {AgentRole(r) for r in (args.disable or [])}
    try:
        return PipelineConfig.from_kb(kb, tau_high=args.tau_high, tau_low=args.tau_low, theta=args.theta,
                                      enabled=frozenset(AgentRole) - disabled)
    except ValueError as exc:
        raise CLIError(str(exc))


def _backend(kind: str, endpoint: str | None = None, model: str | None = None, timeout: float | None = None):
    if kind == "deterministic":
        return DeterministicBackend()
    if kind == "remote":
        return RemoteBackend.from_env(endpoint, model, timeout)
    raise CLIError(f"unknown backend {kind!r}")


def cmd_infer(args) -> int:
    kb = _load_kb(args.kb)
    try:
        evidence = load_evidence(args.evidence)
    except OSError as exc:
        raise CLIError(f"cannot read {args.evidence}: {exc.strerror or exc}")
    except ValueError as exc:
        raise CLIError(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backend = _backend(args.backend, args.endpoint, args.model, args.timeout)
    case_id = args.case_id or Path(args.evidence).stem
    try:
        result = run_case(kb, evidence, backend, case_id=case_id, config=_pipeline_config(kb, args))
    except PipelineError as exc:
        exc.trace.write(out / "trace.jsonl")
        raise CLIError(f"case {case_id} failed: {exc} (partial trace in {out / 'trace.jsonl'})")
    _write(out / "result.json", _dump(result.to_json()))
    result.trace.write(out / "trace.jsonl")
    _say(result.summary())
    return EXIT_OK


# -- bayes -------------------------------------------------------------------


def cmd_bayes_query(args) -> int:
    kb = _load_kb(args.kb)
    evidence = {}
    for item in args.evidence or []:
        node, sep, state = item.partition("=")
        if not sep:
            raise CLIError(f"evidence must look like node=state, got {item!r}")
        evidence[node] = state
    try:
        vec = posterior(kb.bayes_net, args.node, evidence)
    except BayesError as exc:
        raise CLIError(str(exc))
    node = kb.bayes_net.nodes[args.node]
    for state, p in zip(node.states, vec):
        _say(f"{args.node}={state}\t{p:.6f}")
    return EXIT_OK


# -- embeddings --------------------------------------------------------------


def cmd_embed_build(args) -> int:
    try:
        texts = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CLIError(f"cannot read {args.corpus}: {exc.strerror or exc}")
    merges = tuple(args.merge or ())
    try:
        corpus = Corpus.from_texts([t for t in texts if t.strip()], Tokenizer(merges))
        table = build_embeddings(corpus, d=args.d, window=args.window, seed=args.seed)
    except EmbeddingError as exc:
        raise CLIError(str(exc))
    _write(Path(args.output), json.dumps(table.to_json(), ensure_ascii=False) + "\n")
    _say(f"wrote {args.output}: {len(table.vocab)} tokens, d={table.d}")
    return EXIT_OK


def cmd_embed_topk(args) -> int:
    try:
        table = EmbeddingTable.from_json(json.loads(Path(args.table).read_text(encoding="utf-8")))
    except OSError as exc:
        raise CLIError(f"cannot read {args.table}: {exc.strerror or exc}")
    try:
        for tok, sim in top_k(table, args.query, args.k):
            _say(f"{tok}\t{sim:.6f}")
    except EmbeddingError as exc:
        raise CLIError(str(exc))
    return EXIT_OK


# -- dataset -----------------------------------------------------------------


def _load_dataset(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror or exc}")
    except DatasetError as exc:
        code = EXIT_FINDINGS if "count mismatch" in str(exc) else EXIT_ERROR
        raise CLIError(f"{path}: {exc}", code)


def cmd_dataset_validate(args) -> int:
    manifest = _load_dataset(args.dataset)
    counts = manifest.counts()
    for cls, n in counts.items():
        _say(f"{cls}\t{n}")
    _say(f"total\t{manifest.total}" + (" (matches declared counts)" if manifest.declared_counts else ""))
    if args.screening:
        try:
            screening = json.loads(Path(args.screening).read_text(encoding="utf-8"))
            removals = [(r["term"], r["reason"]) for r in screening.get("expert_removals", [])]
            result = screen_terms(screening["raw_terms"], expert_removals=removals)
        except OSError as exc:
            raise CLIError(f"cannot read {args.screening}: {exc.strerror or exc}")
        except (KeyError, TypeError, DatasetError) as exc:
            raise CLIError(f"bad screening file: {exc}")
        raw, removed, kept = len(screening["raw_terms"]), len(result.removed), len(result.kept)
        reasons = ", ".join(f"{k}={v}" for k, v in sorted(result.counts.items()))
        _say(f"screening\t{raw} raw - {removed} removed = {kept} kept ({reasons})")
        if kept != manifest.total:
            _say(f"screening mismatch: {kept} kept terms but {manifest.total} sentences")
            return EXIT_FINDINGS
    return EXIT_OK


def cmd_dataset_split(args) -> int:
    manifest = _load_dataset(args.dataset)
    try:
        train, test = stratified_split(manifest, args.fraction, args.seed)
    except DatasetError as exc:
        raise CLIError(str(exc), EXIT_FINDINGS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    _say(f"train {train.total}, test {test.total}")
    for cls in manifest.counts():
        _say(f"{cls}\ttrain {train.counts()[cls]}\ttest {test.counts()[cls]}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


@dataclass
class RunConfig:
    kb: Path
    dataset: Path
    output_dir: Path
    backend: str = "deterministic"
    endpoint: str | None = None
    model: str | None = None
    timeout: float | None = None
    tau_high: float | None = None
    tau_low: float | None = None
    theta: float | None = None
    similarity_fallback: bool | None = None
    test_fraction: float = 0.5
    seed: int = 0
    report_formats: tuple[str, ...] = ("markdown", "csv")
    model_label: str = "metabridge"
    workers: int = 1
    truth_table: Path | None = None
    extra: dict = field(default_factory=dict)


def _run_config(args) -> RunConfig:
    """Flags override the config file, which overrides defaults.

    Remote endpoint, model and timeout also read METABRIDGE_AGENT_* variables
    (flag > environment > file).
    """
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON: {exc.msg}")
    base = path.parent

    def rel(p):
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    try:
        thresholds = raw.get("thresholds", {})
        split = raw.get("split", {})
        remote = raw.get("remote", {})
        cfg = RunConfig(
            kb=rel(raw["kb"]), dataset=rel(raw["dataset"]), output_dir=rel(raw.get("output_dir", "out")),
            backend=raw.get("backend", "deterministic"),
            endpoint=remote.get("endpoint"), model=remote.get("model"), timeout=remote.get("timeout"),
            tau_high=thresholds.get("tau_high"), tau_low=thresholds.get("tau_low"), theta=thresholds.get("theta"),
            similarity_fallback=raw.get("similarity_fallback"),
            test_fraction=float(split.get("test_fraction", 0.5)), seed=int(split.get("seed", 0)),
            report_formats=tuple(raw.get("report_formats", ("markdown", "csv"))),
            model_label=raw.get("model_label", "metabridge"), workers=int(raw.get("workers", 1)),
            truth_table=rel(raw.get("truth_table")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError(f"{path}: bad config ({exc})")

    env = os.environ
    cfg.endpoint = env.get("METABRIDGE_AGENT_ENDPOINT", cfg.endpoint)
    cfg.model = env.get("METABRIDGE_AGENT_MODEL", cfg.model)
    if "METABRIDGE_AGENT_TIMEOUT" in env:
        cfg.timeout = float(env["METABRIDGE_AGENT_TIMEOUT"])
    for name in ("output_dir", "backend", "endpoint", "model", "timeout", "tau_high", "tau_low", "theta",
                 "seed", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, Path(value) if name == "output_dir" else value)
    if getattr(args, "fraction", None) is not None:
        cfg.test_fraction = args.fraction
    if cfg.workers < 1:
        raise CLIError("workers must be at least 1")
    return cfg


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    # validate everything before judging a single sentence
    manifest = _load_dataset(cfg.dataset)
    kb = _load_kb(cfg.kb)
    try:
        _, test = stratified_split(manifest, cfg.test_fraction, cfg.seed)
    except DatasetError as exc:
        raise CLIError(str(exc), EXIT_FINDINGS)
    try:
        pcfg = PipelineConfig.from_kb(kb, tau_high=cfg.tau_high, tau_low=cfg.tau_low, theta=cfg.theta,
                                      similarity_fallback=cfg.similarity_fallback)
    except ValueError as exc:
        raise CLIError(str(exc))
    backend = _backend(cfg.backend, cfg.endpoint, cfg.model, cfg.timeout)
    truth = None
    if cfg.truth_table is not None:
        try:
            truth = {r["id"]: r["verdict"] for r in
                     (json.loads(line) for line in cfg.truth_table.read_text(encoding="utf-8").splitlines() if line.strip())}
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read truth table {cfg.truth_table}: {exc}")

    def judge(sentence):
        try:
            return judge_alignment(kb, sentence, backend, pcfg), None
        except (PipelineError, UnknownConceptError) as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        outcomes = list(pool.map(judge, test.sentences))

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    preds, golds, verdict_lines, trace_text = [], [], [], []
    abstentions = []
    ratings: dict[str, list[float]] = {}
    for sentence, (j, err) in zip(test.sentences, outcomes):
        rec = {"id": sentence.id, "class": sentence.cls, "label": sentence.label}
        if j is None:
            rec.update(verdict=None, abstained=True, error=str(err))
            abstentions.append(sentence.id)
            trace = getattr(err, "trace", None)
        else:
            rec.update(verdict=j.verdict, branch=j.branch, abstained=False)
            if j.ratings:
                rec["ratings"] = dict(j.ratings)
                for k, v in j.ratings.items():
                    ratings.setdefault(k, []).append(v)
            preds.append(j.verdict)
            golds.append(sentence.label)
            trace = j.trace
        if truth is not None:
            rec["expected"] = truth.get(sentence.id)
        verdict_lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
        if trace is not None:
            trace_text.append(trace.to_jsonl())

    summary: dict[str, Any] = {"test_size": test.total, "judged": len(preds), "abstentions": len(abstentions),
                               "abstained_ids": abstentions}
    report_text = {}
    if preds:
        confusion = confusion_from(preds, golds)
        # mean of per-sentence ratings, only when every judged sentence supplied them
        mean_ratings = {k: sum(v) / len(v) for k, v in ratings.items() if len(v) == len(preds)}
        report = compute_metrics(confusion, cfg.model_label, **mean_ratings)
        summary.update(confusion=asdict(confusion), metrics={
            "accuracy": report.accuracy, "recall": report.recall, "precision": report.precision, "f1": report.f1,
            "degenerate": sorted(report.degenerate)})
        for fmt in cfg.report_formats:
            report_text[fmt] = render_report([report], fmt)
    else:
        summary.update(confusion=None, metrics=None)
    if truth is not None:
        judged = [json.loads(line) for line in verdict_lines]
        agree = sum(1 for r in judged if r["verdict"] is not None and r["verdict"] == r["expected"])
        summary["truth_table_agreement"] = {"agree": agree, "total": len(judged)}

    _write(out / "confusion.json", _dump(summary))
    _write(out / "verdicts.jsonl", "".join(line + "\n" for line in verdict_lines))
    _write(out / "traces.jsonl", "".join(trace_text))
    footer = f"\nAbstentions: {len(abstentions)} of {test.total} test sentences (excluded from the counts).\n"
    if "markdown" in report_text:
        _write(out / "metrics.md", report_text["markdown"] + footer)
    if "csv" in report_text:
        _write(out / "metrics.csv", report_text["csv"])

    _say(f"judged {len(preds)} of {test.total} test sentences, {len(abstentions)} abstention(s)")
    if preds:
        m = summary["metrics"]
        _say(f"accuracy {m['accuracy']:.2f}  recall {m['recall']:.2f}  precision {m['precision']:.2f}  f1 {m['f1']:.2f}")
    if truth is not None:
        a = summary["truth_table_agreement"]
        _say(f"truth table agreement {a['agree']}/{a['total']}")
    return EXIT_OK


# -- trace -------------------------------------------------------------------


def cmd_trace_show(args) -> int:
    try:
        lines = Path(args.trace).read_text(encoding="utf-8").splitlines()
        traces = CoTTrace.from_jsonl(lines)
    except OSError as exc:
        raise CLIError(f"cannot read {args.trace}: {exc.strerror or exc}")
    except (ValueError, KeyError) as exc:
        raise CLIError(f"malformed trace: {exc}")
    for trace in traces:
        if args.case and trace.case_id != args.case:
            continue
        _say(f"== {trace.case_id}")
        for step in trace.steps:
            _say(f"[{step.timestamp}] {step.agent.value}: {step.rationale}")
            if args.payload:
                _say("    " + json.dumps(step.payload, ensure_ascii=False, sort_keys=True))
        for problem in trace.problems():
            _say(f"!! {problem}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metabridge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="group", required=True)

    kb = sub.add_parser("kb", help="knowledge base manifests").add_subparsers(dest="action", required=True)
    c = kb.add_parser("check", help="validate a manifest")
    c.add_argument("kb")
    c.set_defaults(func=cmd_kb_check)
    c = kb.add_parser("extend", help="add records to a manifest, atomically")
    c.add_argument("kb")
    c.add_argument("additions")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_kb_extend)

    c = sub.add_parser("infer", help="run one case through the agent pipeline")
    c.add_argument("--kb", required=True)
    c.add_argument("--evidence", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--case-id")
    c.add_argument("--backend", choices=("deterministic", "remote"), default="deterministic")
    c.add_argument("--endpoint")
    c.add_argument("--model")
    c.add_argument("--timeout", type=float)
    c.add_argument("--tau-high", type=float)
    c.add_argument("--tau-low", type=float)
    c.add_argument("--theta", type=float)
    c.add_argument("--disable", action="append", choices=[r.value for r in AgentRole if r != AgentRole.Coordinator],
                   help="switch off an agent role (repeatable)")
    c.set_defaults(func=cmd_infer)

    bayes = sub.add_parser("bayes", help="Bayes net queries").add_subparsers(dest="action", required=True)
    c = bayes.add_parser("query", help="posterior of one node")
    c.add_argument("--kb", required=True)
    c.add_argument("--node", required=True)
    c.add_argument("--evidence", action="append", metavar="NODE=STATE")
    c.set_defaults(func=cmd_bayes_query)

    emb = sub.add_parser("embed", help="corpus embeddings").add_subparsers(dest="action", required=True)
    c = emb.add_parser("build", help="build an embedding table from a text corpus (one document per line)")
    c.add_argument("corpus")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--d", type=int, default=64)
    c.add_argument("--window", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--merge", action="append", help="multi-character CJK term to keep whole (repeatable)")
    c.set_defaults(func=cmd_embed_build)
    c = emb.add_parser("topk", help="nearest neighbours of a token")
    c.add_argument("table")
    c.add_argument("query")
    c.add_argument("--k", type=int, default=5)
    c.set_defaults(func=cmd_embed_topk)

    ds = sub.add_parser("dataset", help="benchmark datasets").add_subparsers(dest="action", required=True)
    c = ds.add_parser("validate", help="schema and count checks")
    c.add_argument("dataset")
    c.add_argument("--screening", help="JSON file with raw_terms and expert_removals")
    c.set_defaults(func=cmd_dataset_validate)
    c = ds.add_parser("split", help="stratified train/test split")
    c.add_argument("dataset")
    c.add_argument("--fraction", type=float, default=0.2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_dataset_split)

    c = sub.add_parser("eval", help="judge the test split and write metrics")
    c.add_argument("config")
    c.add_argument("--output-dir")
    c.add_argument("--backend", choices=("deterministic", "remote"))
    c.add_argument("--endpoint")
    c.add_argument("--model")
    c.add_argument("--timeout", type=float)
    c.add_argument("--tau-high", type=float)
    c.add_argument("--tau-low", type=float)
    c.add_argument("--theta", type=float)
    c.add_argument("--fraction", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int)
    c.set_defaults(func=cmd_eval)

    tr = sub.add_parser("trace", help="chain-of-thought traces").add_subparsers(dest="action", required=True)
    c = tr.add_parser("show", help="print a trace file")
    c.add_argument("trace")
    c.add_argument("--case")
    c.add_argument("--payload", action="store_true")
    c.set_defaults(func=cmd_trace_show)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        _warn(f"error: {exc}")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
