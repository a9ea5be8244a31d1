"""Answer generation for the discourse-guided method and every baseline."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Collection, Mapping, Sequence

from . import prompts
from .corpus import Chunk, ConfigurationError
from .llm import LlmClient, LlmRequest, StructuredOutputError
from .planning import AlignmentError, Blueprint, check_alignment
from .render import render_inputs
from .retrieval import TIE_DECIMALS, EmbeddingProvider, VectorIndex, retrieve_topk

log = logging.getLogger(__name__)

METHODS = ("disco", "full_context", "standard_rag", "retrieve_and_plan", "plan_and_retrieve", "markers")


@dataclass(frozen=True)
class MethodConfig:
    method: str
    top_k: int = 10
    uses_trees: bool = False
    uses_graph: bool = False
    uses_plan: bool = False

    @classmethod
    def for_method(cls, method: str, top_k: int = 10) -> "MethodConfig":
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        flags = {
            "disco": (True, True, True),
            "retrieve_and_plan": (False, False, True),
            "plan_and_retrieve": (False, False, True),
            # The marker baseline fills the graph slot with a marker graph.
            "markers": (False, True, False),
        }.get(method, (False, False, False))
        return cls(method, top_k, *flags)


@dataclass(frozen=True)
class Answer:
    text: str
    method: str
    query_id: str = ""
    provenance: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("answer text is empty")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")


# -- output markers ---------------------------------------------------------

def _marker(raw: str, word: str, start: int = 0) -> re.Match | None:
    """First ``WORD:`` anywhere, or bare ``WORD`` at the start of a line, whichever is earlier."""
    colon = re.compile(rf"\b{word}\s*:", re.I).search(raw, start)
    bare = re.compile(rf"(?im)^[\s*#>_]*{word}\b[*_]*[ \t]*").search(raw, start)
    found = [m for m in (colon, bare) if m]
    return min(found, key=lambda m: m.start()) if found else None


def extract_answer(raw: str) -> str:
    m = _marker(raw, "ANSWER")
    if not m:
        raise StructuredOutputError("no 'ANSWER:' marker in output", code="MISSING_ANSWER")
    text = raw[m.end():].strip()
    if not text:
        raise StructuredOutputError("answer body is empty", code="EMPTY_ANSWER")
    return text


def extract_plan_answer(raw: str) -> tuple[str, str]:
    plan = _marker(raw, "PLAN")
    answer = _marker(raw, "ANSWER")
    if not plan:
        raise StructuredOutputError("no 'PLAN' marker in output", code="MISSING_PLAN")
    if not answer:
        raise StructuredOutputError("no 'ANSWER' marker in output", code="MISSING_ANSWER")
    if answer.start() < plan.start():
        raise StructuredOutputError("'ANSWER' appears before 'PLAN'", code="MARKER_ORDER")
    plan_text = raw[plan.end():answer.start()].strip()
    answer_text = raw[answer.end():].strip()
    if not plan_text:
        raise StructuredOutputError("plan body is empty", code="EMPTY_PLAN")
    if not answer_text:
        raise StructuredOutputError("answer body is empty", code="EMPTY_ANSWER")
    return plan_text, answer_text


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def extract_plan_hints(raw: str) -> tuple[str, list[str]]:
    """Stage-1 output of plan-and-retrieve: plan paragraph plus one hint query per line."""
    plan = _marker(raw, "PLAN")
    if not plan:
        raise StructuredOutputError("no 'PLAN' marker in output", code="MISSING_PLAN")
    hint = _marker(raw, r"RETRIEVAL\s+HINTS?", plan.end())
    end = hint.start() if hint else len(raw)
    plan_text = raw[plan.end():end].strip()
    if not plan_text:
        raise StructuredOutputError("plan body is empty", code="EMPTY_PLAN")
    hints: list[str] = []
    if hint:
        stop = _marker(raw, "ANSWER", hint.end())
        block = raw[hint.end():stop.start() if stop else len(raw)]
        for line in block.splitlines():
            query = _BULLET.sub("", line).strip()
            if query:
                hints.append(query)
    return plan_text, hints


# -- requests ---------------------------------------------------------------

GEN_DECODE = {"max_output_tokens": 1024, "beam_width": 3}


def _request(template: str, inputs: str, tag: str, backend_id: str, query_id: str) -> LlmRequest:
    return LlmRequest(backend_id=backend_id, user_prompt=prompts.load(template).render(inputs=inputs),
                      tag=tag, query_id=query_id, decode_params=dict(GEN_DECODE))


def build_guided_prompt(query: str, chunks: Sequence[Chunk], trees=None, graph=None,
                        plan: Blueprint | None = None, backend_id: str = "mock",
                        query_id: str = "") -> LlmRequest:
    check_alignment(chunks, trees, graph)
    inputs = render_inputs(query, chunks=chunks, trees=trees, graph=graph,
                           plan=plan.text if plan is not None else None)
    return _request("discourse_guided", inputs, "generate", backend_id, query_id)


def build_standard_prompt(query: str, chunks: Sequence[Chunk], backend_id: str = "mock",
                          query_id: str = "", markers=None) -> LlmRequest:
    if not chunks:
        raise ValueError("standard RAG needs at least one chunk")
    if markers is not None:
        check_alignment(chunks, graph=markers)
    inputs = render_inputs(query, chunks=chunks, markers=markers)
    return _request("standard_rag", inputs, "generate", backend_id, query_id)


def build_full_context_prompt(query: str, document: str, backend_id: str = "mock",
                              query_id: str = "") -> LlmRequest:
    if not document.strip():
        raise ValueError("full-context generation needs a non-empty document")
    return _request("full_context", render_inputs(query, document=document), "generate",
                    backend_id, query_id)


def build_retrieve_and_plan_prompt(query: str, chunks: Sequence[Chunk], backend_id: str = "mock",
                                   query_id: str = "") -> LlmRequest:
    if not chunks:
        raise ValueError("retrieve-and-plan needs at least one chunk")
    return _request("retrieve_and_plan", render_inputs(query, chunks=chunks), "generate",
                    backend_id, query_id)


def build_plan_and_retrieve_prompts(query: str, backend_id: str = "mock", query_id: str = "",
                                    plan: str | None = None,
                                    chunks: Sequence[Chunk] | None = None) -> LlmRequest:
    """Stage 1 when ``plan`` is None, otherwise stage 2 over the hint-retrieved chunks."""
    if plan is None:
        return _request("plan_and_retrieve", render_inputs(query, stage=1), "baseline",
                        backend_id, query_id)
    return _request("plan_and_retrieve",
                    render_inputs(query, stage=2, stage_plan=plan, chunks=chunks or []),
                    "generate", backend_id, query_id)


# -- answer functions -------------------------------------------------------

def _answer(client: LlmClient, req: LlmRequest, method: str, max_attempts: int, **prov) -> Answer:
    result = client.run_with_retry(req, extract_answer, max_attempts)
    return Answer(result.value, method, req.query_id,
                  {"backend_id": req.backend_id, "attempts": result.attempts, **prov})


def answer_guided(client: LlmClient, query: str, chunks: Sequence[Chunk], trees=None, graph=None,
                  plan: Blueprint | None = None, *, backend_id: str = "mock", query_id: str = "",
                  max_attempts: int = 3) -> Answer:
    """Discourse-guided generation with any subset of structures (ablations, plan omission)."""
    req = build_guided_prompt(query, chunks, trees, graph, plan, backend_id, query_id)
    return _answer(client, req, "disco", max_attempts)


def answer_disco(client: LlmClient, query: str, chunks: Sequence[Chunk], trees, graph,
                 plan: Blueprint, **kw) -> Answer:
    if trees is None or graph is None or plan is None:
        raise AlignmentError("disco generation needs trees, graph and plan")
    return answer_guided(client, query, chunks, trees, graph, plan, **kw)


def answer_standard(client: LlmClient, query: str, chunks: Sequence[Chunk], *,
                    backend_id: str = "mock", query_id: str = "", max_attempts: int = 3) -> Answer:
    req = build_standard_prompt(query, chunks, backend_id, query_id)
    return _answer(client, req, "standard_rag", max_attempts)


def answer_markers(client: LlmClient, query: str, chunks: Sequence[Chunk], marker_graph, *,
                   backend_id: str = "mock", query_id: str = "", max_attempts: int = 3) -> Answer:
    req = build_standard_prompt(query, chunks, backend_id, query_id, markers=marker_graph)
    return _answer(client, req, "markers", max_attempts)


def answer_full_context(client: LlmClient, query: str, document: str, *, backend_id: str = "mock",
                        query_id: str = "", max_attempts: int = 3) -> Answer:
    req = build_full_context_prompt(query, document, backend_id, query_id)
    return _answer(client, req, "full_context", max_attempts)


def answer_retrieve_and_plan(client: LlmClient, query: str, chunks: Sequence[Chunk], *,
                             backend_id: str = "mock", query_id: str = "",
                             max_attempts: int = 3) -> Answer:
    req = build_retrieve_and_plan_prompt(query, chunks, backend_id, query_id)
    result = client.run_with_retry(req, extract_plan_answer, max_attempts)
    plan, text = result.value
    return Answer(text, "retrieve_and_plan", query_id,
                  {"backend_id": backend_id, "attempts": result.attempts, "plan": plan})


def hint_retrieval(index: VectorIndex, provider: EmbeddingProvider, hints: Sequence[str], k: int,
                   doc_scope: Collection[str] | None = None) -> list[tuple[str, float]]:
    """Each hint gets top-ceil(k/h); the union keeps each chunk's best score and is cut to k."""
    per_hint = math.ceil(k / len(hints))
    best: dict[str, float] = {}
    for hint in hints:
        for r in retrieve_topk(index, hint, per_hint, provider, doc_scope=doc_scope).ranked:
            best[r.chunk_id] = max(best.get(r.chunk_id, -math.inf), r.score)
    order = sorted(best.items(), key=lambda kv: (-round(kv[1], TIE_DECIMALS), kv[0]))
    return order[:k]


def answer_plan_and_retrieve(client: LlmClient, query: str, index: VectorIndex,
                             provider: EmbeddingProvider, k: int,
                             chunks_by_id: Mapping[str, Chunk], *, backend_id: str = "mock",
                             query_id: str = "", max_attempts: int = 3,
                             doc_scope: Collection[str] | None = None) -> Answer:
    stage1 = build_plan_and_retrieve_prompts(query, backend_id, query_id)
    first = client.run_with_retry(stage1, extract_plan_hints, max_attempts)
    plan, hints = first.value
    warnings = []
    if not hints:
        warnings.append("no retrieval hints parsed; retrieved with the query itself")
        log.warning("query %r: %s", query_id, warnings[-1])
        hints = [query]
    ranked = hint_retrieval(index, provider, hints, k, doc_scope)
    chunks = [chunks_by_id[cid] for cid, _ in ranked]
    stage2 = build_plan_and_retrieve_prompts(query, backend_id, query_id, plan=plan, chunks=chunks)
    second = client.run_with_retry(stage2, extract_answer, max_attempts)
    return Answer(second.value, "plan_and_retrieve", query_id, {
        "backend_id": backend_id, "attempts": first.attempts + second.attempts, "plan": plan,
        "hints": list(hints), "chunk_ids": [c.chunk_id for c in chunks], "warnings": warnings})
