"""End-to-end orchestration: retrieval, structures, plan and answer for every method,
plus report files and grid sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .corpus import Chunk, ConfigurationError, Document, chunk_corpus
from .evaluation import (ACCOUNTING_KEYS, METRIC_KEYS, EvalReport, EvaluationError,
                         aggregate_report, llm_judge_score, score_answer)
from .generation import (METHODS, MethodConfig, answer_full_context, answer_guided, answer_markers,
                         answer_plan_and_retrieve, answer_retrieve_and_plan, answer_standard)
from .graph import infer_graph, infer_markers
from .llm import Backend, LlmClient, UsageLedger
from .perturbation import PerturbSpec, perturb_graph, perturb_plan, perturb_tree
from .planning import make_plan
from .retrieval import (HashingEmbedder, RetrievalResult, VectorIndex, build_index, inject_noise,
                        retrieve_topk)
from .rst import TreeCache, get_or_parse

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OFFLINE_QUERY_ID = "__offline__"
ABLATABLE = ("trees", "graph", "plan")


@dataclass(frozen=True)
class PipelineConfig:
    method: str = "disco"
    chunk_size: int = 256
    top_k: int = 10
    noise_ratio: float = 0.0
    perturb: tuple[str, ...] = ()
    ablate: tuple[str, ...] = ()
    retrieval_scope: str = "open"
    backend: str = "mock"
    parser_backend: str | None = None
    judge_backend: str | None = None
    max_attempts: int = 3
    seed: int = 0
    embed_dim: int = 256
    parallelism: int = 4
    corpus: str | None = None
    queries: str | None = None
    index_dir: str | None = None
    auto_index: bool = False
    cache: str | None = None
    mock_fixtures: str | None = None
    out: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.chunk_size < 1 or self.top_k < 1:
            raise ConfigurationError("chunk_size and top_k must be >= 1")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ConfigurationError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")
        if self.retrieval_scope not in ("open", "closed"):
            raise ConfigurationError("retrieval_scope must be 'open' or 'closed'")
        if self.max_attempts < 1 or self.parallelism < 1:
            raise ConfigurationError("max_attempts and parallelism must be >= 1")
        bad = set(self.ablate) - set(ABLATABLE)
        if bad:
            raise ConfigurationError(f"cannot ablate {sorted(bad)}; choose from {ABLATABLE}")
        if self.ablate and self.method != "disco":
            raise ConfigurationError("ablations apply to the disco method only")
        for text in self.perturb:
            PerturbSpec.parse(text)
        # Canonical forms keep config hashes stable.
        object.__setattr__(self, "perturb", tuple(str(PerturbSpec.parse(t)) for t in self.perturb))
        object.__setattr__(self, "ablate", tuple(sorted(set(self.ablate))))
        object.__setattr__(self, "noise_ratio", float(self.noise_ratio))

    @property
    def perturb_specs(self) -> list[PerturbSpec]:
        return [PerturbSpec.parse(t) for t in self.perturb]

    @property
    def parser(self) -> str:
        return self.parser_backend or self.backend

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["perturb"] = list(self.perturb)
        out["ablate"] = list(self.ablate)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values = dict(data)
        for key in ("perturb", "ablate"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def load_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return data


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    question: str
    golds: tuple[str, ...] = ()
    doc_id: tuple[str, ...] = ()
    dataset: str = ""


def load_queries(path: str | Path) -> list[QueryRecord]:
    """JSONL with ``query_id``, ``question``, ``golds``, optional ``doc_id`` (string or list), ``dataset``."""
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = obj.get("doc_id") or ()
                qr = QueryRecord(str(obj["query_id"]), obj["question"],
                                 tuple(obj.get("golds", ())),
                                 (doc,) if isinstance(doc, str) else tuple(doc),
                                 obj.get("dataset", ""))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed query record ({exc})") from exc
            if qr.query_id in seen:
                raise ConfigurationError(f"{path}:{lineno}: duplicate query_id {qr.query_id!r}")
            seen.add(qr.query_id)
            out.append(qr)
    return out


def derive_seed(seed: int, *parts: str) -> int:
    key = "|".join([str(seed), *parts])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


@dataclass
class ChunkedCorpus:
    chunks: list[Chunk]
    by_id: dict[str, Chunk]
    index: VectorIndex


class Engine:
    """Long-lived state shared by runs: documents, per-chunk-size indexes, tree caches, backends."""

    def __init__(self, docs: Sequence[Document], backends: Mapping[str, Backend],
                 embed_dim: int = 256, max_in_flight: int = 8):
        self.docs = {d.doc_id: d for d in docs}
        self.backends = dict(backends)
        self.provider = HashingEmbedder(embed_dim)
        self.max_in_flight = max_in_flight
        self._corpora: dict[int, ChunkedCorpus] = {}
        self._caches: dict[str | None, TreeCache] = {}

    def client(self) -> LlmClient:
        return LlmClient(self.backends, UsageLedger(), max_in_flight=self.max_in_flight)

    def add_index(self, chunk_size: int, index: VectorIndex) -> None:
        chunks = chunk_corpus(list(self.docs.values()), chunk_size)
        by_id = {c.chunk_id: c for c in chunks}
        if set(by_id) != set(index.ids):
            raise ConfigurationError(f"index for chunk size {chunk_size} does not match the corpus")
        self._corpora[chunk_size] = ChunkedCorpus(chunks, by_id, index)

    def has_index(self, chunk_size: int) -> bool:
        return chunk_size in self._corpora

    def corpus_at(self, chunk_size: int) -> ChunkedCorpus:
        if chunk_size not in self._corpora:
            chunks = chunk_corpus(list(self.docs.values()), chunk_size)
            index = build_index(chunks, self.provider)
            self._corpora[chunk_size] = ChunkedCorpus(chunks, {c.chunk_id: c for c in chunks}, index)
        return self._corpora[chunk_size]

    def cache(self, path: str | None) -> TreeCache:
        if path not in self._caches:
            self._caches[path] = TreeCache(path)
        return self._caches[path]


# -- one query ----------------------------------------------------------------------

def _retrieve(qr: QueryRecord, cfg: PipelineConfig, engine: Engine, corpus: ChunkedCorpus) -> RetrievalResult:
    scope = None
    if cfg.retrieval_scope == "closed":
        if not qr.doc_id:
            raise ConfigurationError(f"query {qr.query_id!r} has no doc_id for closed-domain retrieval")
        scope = qr.doc_id
    result = retrieve_topk(corpus.index, qr.question, cfg.top_k, engine.provider, qr.query_id, scope)
    if cfg.noise_ratio > 0:
        present = set(result.chunk_ids)
        pool = [cid for cid in corpus.index.ids if cid not in present]
        result = inject_noise(result, pool, cfg.noise_ratio, derive_seed(cfg.seed, qr.query_id, "noise"))
    return result


def _source_text(qr: QueryRecord, engine: Engine, chunks: Sequence[Chunk]) -> str:
    docs = [engine.docs[d].text for d in qr.doc_id if d in engine.docs]
    return "\n".join(docs) if docs else " ".join(c.text for c in chunks)


def run_query(qr: QueryRecord, cfg: PipelineConfig, engine: Engine, client: LlmClient,
              cache: TreeCache, retrieval: RetrievalResult | None = None) -> dict:
    """Answer and score one query. Failures are captured in the record, never raised."""
    mc = MethodConfig.for_method(cfg.method, cfg.top_k)
    qid = qr.query_id
    kw = {"backend_id": cfg.backend, "query_id": qid, "max_attempts": cfg.max_attempts}
    rec: dict = {"type": "query", "query_id": qid, "method": cfg.method, "dataset": qr.dataset,
                 "config_hash": cfg.config_hash, "status": "ok", "error": None, "answer": None,
                 "golds": list(qr.golds), "retrieved": [], "injected": [],
                 "perturbations": list(cfg.perturb), "notes": [], "plan": None, "plan_steps": None,
                 "metrics": {}, "llm_score_requested": bool(cfg.judge_backend)}
    notes: list[str] = rec["notes"]
    chunks: list[Chunk] = []
    answer = None
    try:
        if not qr.golds:
            raise EvaluationError(f"query {qid!r} has no gold answers")
        corpus = engine.corpus_at(cfg.chunk_size) if cfg.method != "full_context" else None
        if cfg.method == "full_context":
            if not qr.doc_id:
                raise ConfigurationError(f"query {qid!r} has no doc_id for full-context generation")
            document = "\n".join(engine.docs[d].text for d in qr.doc_id)
            answer = answer_full_context(client, qr.question, document, **kw)
        elif cfg.method == "plan_and_retrieve":
            scope = qr.doc_id if cfg.retrieval_scope == "closed" else None
            answer = answer_plan_and_retrieve(client, qr.question, corpus.index, engine.provider,
                                              cfg.top_k, corpus.by_id, doc_scope=scope, **kw)
            chunks = [corpus.by_id[c] for c in answer.provenance["chunk_ids"]]
            rec["retrieved"] = list(answer.provenance["chunk_ids"])
            rec["plan"] = answer.provenance["plan"]
            notes.extend(answer.provenance["warnings"])
        else:
            retrieval = retrieval or _retrieve(qr, cfg, engine, corpus)
            rec["retrieved"] = retrieval.chunk_ids
            rec["injected"] = retrieval.injected_ids
            chunks = [corpus.by_id[c] for c in retrieval.chunk_ids]
            if cfg.method == "standard_rag":
                answer = answer_standard(client, qr.question, chunks, **kw)
            elif cfg.method == "retrieve_and_plan":
                answer = answer_retrieve_and_plan(client, qr.question, chunks, **kw)
                rec["plan"] = answer.provenance["plan"]
            elif cfg.method == "markers":
                markers = infer_markers(chunks, client, **kw)
                notes.extend(markers.warnings)
                answer = answer_markers(client, qr.question, chunks, markers, **kw)
            else:
                answer = _run_disco(qr, cfg, mc, chunks, client, cache, rec, kw)
        source = _source_text(qr, engine, chunks)
        llm_score = None
        if cfg.judge_backend:
            llm_score = llm_judge_score(client, qr.question, answer.text, qr.golds[0],
                                        cfg.judge_backend, cfg.max_attempts, f"{qid}#judge")
            rec["judge_accounting"] = _accounting(client.ledger, f"{qid}#judge")
        rec["answer"] = answer.text
        rec["metrics"] = score_answer(answer.text, qr.golds, source, llm_score).to_dict()
    except Exception as exc:  # noqa: BLE001 - one failed query must not stop the run
        log.warning("query %r failed: %s: %s", qid, type(exc).__name__, exc)
        rec["status"] = "failed"
        rec["error"] = f"{type(exc).__name__}: {exc}"
    rec["accounting"] = _accounting(client.ledger, qid)
    rec["accounting"]["attempts"] = int(answer.provenance.get("attempts", 0)) if answer else 0
    return rec


def _run_disco(qr, cfg, mc, chunks, client, cache, rec, kw):
    qid = qr.query_id
    specs = cfg.perturb_specs
    notes = rec["notes"]
    trees = graph = plan = None
    if mc.uses_trees and "trees" not in cfg.ablate:
        trees = [get_or_parse(c, cache, client, cfg.parser, cfg.max_attempts, qid).tree for c in chunks]
        for spec in (s for s in specs if s.target == "TREE"):
            trees = [perturb_tree(t, spec, f"{qid}/{t.chunk_id}", notes) for t in trees]
    if mc.uses_graph and "graph" not in cfg.ablate:
        graph = infer_graph(chunks, client, **kw)
        notes.extend(graph.warnings)
        for spec in (s for s in specs if s.target == "GRAPH"):
            graph = perturb_graph(graph, spec, qid, notes)
    if mc.uses_plan and "plan" not in cfg.ablate:
        plan = make_plan(qr.question, chunks, trees, graph, client, **kw)
        for spec in (s for s in specs if s.target == "PLAN"):
            if plan is not None:
                plan = perturb_plan(plan, spec, qid, notes)
        if plan is not None:
            rec["plan"] = plan.text
            rec["plan_steps"] = list(plan.steps)
    return answer_guided(client, qr.question, chunks, trees, graph, plan, **kw)


def _accounting(ledger: UsageLedger, query_id: str) -> dict:
    t = ledger.totals(query_id)
    return {"calls": t["calls"], "input_tokens": t["input_tokens"], "output_tokens": t["output_tokens"],
            "total_tokens": t["total_tokens"], "latency_ms": t["latency_ms"],
            "calls_by_tag": t["calls_by_tag"]}


# -- one configuration ----------------------------------------------------------------

def run_config(queries: Sequence[QueryRecord], cfg: PipelineConfig, engine: Engine) -> EvalReport:
    """Run every query under one configuration.

    Trees for all retrieved chunks are parsed up front under a reserved query id, so
    per-query call counts do not depend on which concurrent query reached a chunk first.
    """
    if not queries:
        raise ConfigurationError("no queries to run")
    mc = MethodConfig.for_method(cfg.method, cfg.top_k)
    client = engine.client()
    cache = engine.cache(cfg.cache)
    retrievals: dict[str, RetrievalResult | None] = {}
    if cfg.method in ("disco", "standard_rag", "retrieve_and_plan", "markers"):
        corpus = engine.corpus_at(cfg.chunk_size)
        for qr in queries:
            try:
                retrievals[qr.query_id] = _retrieve(qr, cfg, engine, corpus)
            except Exception as exc:  # noqa: BLE001 - surfaced again inside run_query
                log.debug("retrieval for %r failed early: %s", qr.query_id, exc)
                retrievals[qr.query_id] = None
        if mc.uses_trees and "trees" not in cfg.ablate:
            needed = sorted({cid for r in retrievals.values() if r for cid in r.chunk_ids})
            for cid in needed:
                get_or_parse(corpus.by_id[cid], cache, client, cfg.parser, cfg.max_attempts,
                             OFFLINE_QUERY_ID)

    def one(qr: QueryRecord) -> dict:
        return run_query(qr, cfg, engine, client, cache, retrievals.get(qr.query_id))

    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            records = list(pool.map(one, queries))
    else:
        records = [one(qr) for qr in queries]
    report = aggregate_report(records, cfg.to_dict())
    report.offline = _accounting(client.ledger, OFFLINE_QUERY_ID)
    report.offline["cache"] = dict(sorted(cache.stats.items()))
    return report


def expand_grid(base: PipelineConfig, grid: Mapping[str, Sequence[Any]]) -> list[PipelineConfig]:
    keys = list(grid)
    cells = itertools.product(*(grid[k] for k in keys))
    return [dataclasses.replace(base, **dict(zip(keys, values))) for values in cells]


def run_suite(queries: Sequence[QueryRecord], grid: Sequence[PipelineConfig],
              engine: Engine) -> list[EvalReport]:
    if not grid:
        raise ConfigurationError("empty configuration grid")
    return [run_config(queries, cfg, engine) for cfg in grid]


# -- report files ---------------------------------------------------------------------

def run_id(cfg: PipelineConfig, now: datetime | None = None) -> str:
    stamp = (now or datetime.now()).strftime("%Y%m%dT%H%M%S%f")
    return f"{stamp}-{cfg.config_hash}"


def write_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_hash = report.per_query[0].get("config_hash") if report.per_query else None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"type": "header", "schema_version": SCHEMA_VERSION,
                             "config_hash": cfg_hash, "config": report.config_snapshot},
                            sort_keys=True) + "\n")
        for rec in report.per_query:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        # Offline (cache-dependent) usage is kept out so reruns stay byte-identical.
        fh.write(json.dumps({"type": "aggregate", "methods": report.aggregate},
                            sort_keys=True) + "\n")


class SchemaError(ValueError):
    pass


def read_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise SchemaError(f"{path}: missing report header")
    version = lines[0].get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    records = [l for l in lines if l.get("type") == "query"]
    agg = next((l for l in lines if l.get("type") == "aggregate"), {})
    return EvalReport(records, agg.get("methods", {}), lines[0]["config"])


AGG_COLUMNS = (["queries", "ok", "failed"] + list(METRIC_KEYS) + ["llm_score_excluded"]
               + [f"mean_{k}" for k in ACCOUNTING_KEYS] + [f"sum_{k}" for k in ACCOUNTING_KEYS])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def aggregate_rows(report: EvalReport, knobs: Sequence[str] = ()) -> list[dict]:
    rows = []
    for method, agg in report.aggregate.items():
        row = {k: report.config_snapshot.get(k) for k in knobs}
        row["method"] = method
        row.update({c: agg.get(c) for c in AGG_COLUMNS})
        rows.append(row)
    return rows


def write_rows_csv(rows: Iterable[dict], path: str | Path, leading: Sequence[str] = ()) -> None:
    rows = list(rows)
    columns = list(leading) + ["method"] + list(AGG_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) if not isinstance(row.get(c), (list, tuple))
                             else ";".join(map(str, row.get(c))) for c in columns])


def write_aggregate_csv(report: EvalReport, path: str | Path) -> None:
    write_rows_csv(aggregate_rows(report), path)


def write_summary_csv(reports: Sequence[EvalReport], knobs: Sequence[str], path: str | Path) -> None:
    """One row per (configuration, method), keyed by the varied knobs."""
    rows = [row for rep in reports for row in aggregate_rows(rep, knobs)]
    write_rows_csv(rows, path, knobs)
