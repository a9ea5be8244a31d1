"""Rendering of pipeline inputs into the ``{{inputs}}`` slot of the generation-side prompts.

Every input kind gets its own header line so the presence or absence of a structure in a
prompt is checkable by substring.
"""
from __future__ import annotations

from typing import Sequence

from .corpus import Chunk

QUERY = "QUERY:"
DOCUMENT = "DOCUMENT:"
CHUNKS = "CHUNKS:"
TREES = "RST TREES:"
GRAPH = "RHETORICAL GRAPH:"
MARKERS = "DISCOURSE MARKERS:"
PLAN = "DISCOURSE-AWARE PLAN:"
STAGE_PLAN = "PLAN FROM STAGE 1:"
STAGE = "STAGE:"

SECTION_HEADERS = (QUERY, DOCUMENT, CHUNKS, TREES, GRAPH, MARKERS, PLAN, STAGE_PLAN, STAGE)


def chunk_lines(chunks: Sequence[Chunk]) -> str:
    return "\n".join(f"CHUNK[{i}]: {c.text}" for i, c in enumerate(chunks, start=1))


def render_inputs(query: str, *, stage: int | None = None, document: str | None = None,
                  chunks: Sequence[Chunk] | None = None, trees=None, graph=None,
                  markers=None, plan: str | None = None, stage_plan: str | None = None) -> str:
    """Sections appear in a fixed order: query, chunks, trees, graph, plan."""
    from .rst import serialize_tree

    parts = []
    if stage is not None:
        parts.append(f"{STAGE}\n{stage}")
    parts.append(f"{QUERY}\n{query}")
    if document is not None:
        parts.append(f"{DOCUMENT}\n{document}")
    if stage_plan is not None:
        parts.append(f"{STAGE_PLAN}\n{stage_plan}")
    if chunks is not None:
        parts.append(f"{CHUNKS}\n{chunk_lines(chunks)}")
    if trees is not None:
        body = "\n".join(f"TREE[{i}]:\n{serialize_tree(t)}" for i, t in enumerate(trees, start=1))
        parts.append(f"{TREES}\n{body}")
    if graph is not None:
        parts.append(f"{GRAPH}\n{graph.render() or '(fewer than two chunks; no pairs)'}")
    if markers is not None:
        parts.append(f"{MARKERS}\n{markers.render() or '(fewer than two chunks; no pairs)'}")
    if plan is not None:
        parts.append(f"{PLAN}\n{plan}")
    return "\n".join(parts)
