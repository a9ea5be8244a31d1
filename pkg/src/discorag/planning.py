"""Discourse-driven planning: a one-paragraph blueprint and its sentence-level steps."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts
from .corpus import Chunk
from .llm import LlmClient, LlmRequest, StructuredOutputError
from .render import render_inputs

PLAN_DECODE = {"max_output_tokens": 512, "beam_width": 3}

_PLAN_RE = re.compile(r"\bPLAN\s*:", re.I)
_STEP_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


class AlignmentError(ValueError):
    """Structures passed together do not describe the same ordered chunks."""


@dataclass(frozen=True)
class Blueprint:
    text: str
    steps: tuple[str, ...]
    provenance: tuple = field(default=(), compare=False)

    @classmethod
    def from_steps(cls, steps: Sequence[str], provenance: tuple = ()) -> "Blueprint":
        return cls(" ".join(steps), tuple(steps), provenance)

    @classmethod
    def from_text(cls, text: str, provenance: tuple = ()) -> "Blueprint":
        return cls(text, tuple(split_steps(text)), provenance)


def split_steps(text: str) -> list[str]:
    """Sentence split after ``.``, ``!`` or ``?`` followed by whitespace (abbreviation-blind)."""
    if not text.strip():
        raise ValueError("cannot split an empty plan")
    return [s.strip() for s in _STEP_BOUNDARY.split(text.strip()) if s.strip()]


def parse_plan(raw: str) -> Blueprint:
    m = _PLAN_RE.search(raw)
    if not m:
        raise StructuredOutputError("no 'PLAN:' marker in output", code="MISSING_PLAN")
    text = raw[m.end():].strip()
    if not text:
        raise StructuredOutputError("plan body after 'PLAN:' is empty", code="EMPTY_PLAN")
    return Blueprint.from_text(text)


def check_alignment(chunks: Sequence[Chunk], trees=None, graph=None) -> None:
    ids = [c.chunk_id for c in chunks]
    if trees is not None:
        if len(trees) != len(chunks):
            raise AlignmentError(f"{len(trees)} trees for {len(chunks)} chunks")
        for pos, (cid, tree) in enumerate(zip(ids, trees), start=1):
            if tree.chunk_id != cid:
                raise AlignmentError(f"tree {pos} belongs to {tree.chunk_id!r}, chunk is {cid!r}")
    if graph is not None and list(graph.nodes) != ids:
        raise AlignmentError("graph nodes do not match the chunk order")


def build_plan_prompt(query: str, chunks: Sequence[Chunk], trees=None, graph=None,
                      backend_id: str = "mock", query_id: str = "") -> LlmRequest:
    """Planning request over query, chunks and whichever structures are supplied.

    Passing ``trees=None`` or ``graph=None`` drops that section (ablation runs).
    """
    check_alignment(chunks, trees, graph)
    inputs = render_inputs(query, chunks=chunks, trees=trees, graph=graph)
    return LlmRequest(backend_id=backend_id, user_prompt=prompts.load("planning").render(inputs=inputs),
                      tag="plan", query_id=query_id, decode_params=dict(PLAN_DECODE))


def make_plan(query: str, chunks: Sequence[Chunk], trees, graph, client: LlmClient,
              backend_id: str = "mock", max_attempts: int = 3, query_id: str = "") -> Blueprint:
    req = build_plan_prompt(query, chunks, trees, graph, backend_id, query_id)
    result = client.run_with_retry(req, parse_plan, max_attempts)
    bp = result.value
    return Blueprint(bp.text, bp.steps, (query_id, backend_id, result.attempts))
