"""Inter-chunk rhetorical graph and the shallow discourse-marker variant.

Both graphs are complete over ordered pairs of distinct chunk positions (1-based).
Canonical text form is one ``CHUNK[i] -> CHUNK[j]: LABEL`` line per pair in (i, j) order.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import ClassVar, Mapping, Sequence

from . import prompts
from .corpus import Chunk
from .llm import LlmClient, LlmRequest, StructuredOutputError, StructuredOutputExhausted
from .render import chunk_lines

log = logging.getLogger(__name__)

INTER_RELATIONS = (
    "SUPPORTS", "CONTRADICTS", "ELABORATES", "EXEMPLIFIES", "CAUSES", "RESULTS_FROM",
    "ENABLES", "PREVENTS", "PRECEDES", "FOLLOWS", "SIMULTANEOUS", "BACKGROUND_FOR",
    "GENERALIZES", "SPECIFIES", "COMPARES_WITH", "CONTRASTS_WITH", "SUPPLEMENTS",
    "REPLACES", "MOTIVATES", "JUSTIFIES", "UNRELATED",
)
UNRELATED = "UNRELATED"

MARKERS = (
    "however", "but", "although", "in contrast", "therefore", "because", "as a result",
    "meanwhile", "moreover", "furthermore", "for example", "for instance", "in addition",
)
NONE_MARKER = "NONE"


class DegenerateInputError(ValueError):
    """Fewer than two chunks: there are no ordered pairs to label."""


class GraphParseError(StructuredOutputError):
    code = "NO_PAIR_LINES"


class GraphIndexError(StructuredOutputError):
    code = "CHUNK_INDEX"

    def __init__(self, index: int, k: int, lineno: int):
        super().__init__(f"line {lineno}: chunk index {index} outside 1..{k}")
        self.index = index


class GraphLabelError(StructuredOutputError):
    code = "UNKNOWN_LABEL"

    def __init__(self, token: str, lineno: int):
        super().__init__(f"line {lineno}: unknown label {token!r}")
        self.token = token


class MarkerError(GraphLabelError):
    code = "UNKNOWN_MARKER"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class _PairGraph:
    nodes: tuple[str, ...]
    edges: Mapping[tuple[int, int], str]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    labels: ClassVar[frozenset[str]] = frozenset()
    default: ClassVar[str] = ""

    @property
    def k(self) -> int:
        return len(self.nodes)

    def lines(self) -> list[str]:
        return [f"CHUNK[{i}] -> CHUNK[{j}]: {self.edges[(i, j)]}" for i, j in sorted(self.edges)]

    def render(self) -> str:
        return "\n".join(self.lines())

    def labeled(self) -> list[tuple[int, int]]:
        """Pairs carrying a label other than the default, in (i, j) order."""
        return [p for p in sorted(self.edges) if self.edges[p] != self.default]

    @classmethod
    def uniform(cls, nodes: Sequence[str], warnings: Sequence[str] = ()):
        k = len(nodes)
        edges = {(i, j): cls.default for i in range(1, k + 1) for j in range(1, k + 1) if i != j}
        return cls(tuple(nodes), edges, tuple(warnings))


@dataclass(frozen=True)
class RhetoricalGraph(_PairGraph):
    labels: ClassVar[frozenset[str]] = frozenset(INTER_RELATIONS)
    default: ClassVar[str] = UNRELATED


@dataclass(frozen=True)
class MarkerGraph(_PairGraph):
    labels: ClassVar[frozenset[str]] = frozenset(MARKERS) | {NONE_MARKER}
    default: ClassVar[str] = NONE_MARKER


def validate_graph(g: _PairGraph) -> list[Violation]:
    out = []
    k = g.k
    for (i, j), label in sorted(g.edges.items()):
        if i == j:
            out.append(Violation("SELF_EDGE", f"self-edge ({i}, {j})"))
        elif not (1 <= i <= k and 1 <= j <= k):
            out.append(Violation("INDEX", f"edge ({i}, {j}) outside 1..{k}"))
        if label not in g.labels:
            out.append(Violation("LABEL", f"unknown label {label!r} on ({i}, {j})"))
    expected = {(i, j) for i in range(1, k + 1) for j in range(1, k + 1) if i != j}
    if set(g.edges) != expected:
        missing = len(expected - set(g.edges))
        out.append(Violation("COVERAGE", f"{len(g.edges)} edges for k={k}; "
                                         f"{missing} ordered pairs missing, need {k * (k - 1)}"))
    return out


_PAIR_RE = re.compile(
    r"CHUNK\s*\[\s*(\d+)\s*\]\s*-+\s*>\s*CHUNK\s*\[\s*(\d+)\s*\]\s*:\s*\{?\s*([^{}]*?)\s*\}?[\s.*]*$",
    re.I)


def _relation_token(token: str) -> str | None:
    label = re.sub(r"[\s\-]+", "_", token.strip(" .,;*`'\"")).upper()
    return label if label in RhetoricalGraph.labels else None


def _marker_token(token: str) -> str | None:
    cleaned = token.strip(" .,;*`'\"")
    if cleaned.upper() == NONE_MARKER:
        return NONE_MARKER
    marker = re.sub(r"\s+", " ", cleaned).lower()
    return marker if marker in MARKERS else None


def _parse_pairs(raw: str, k: int, normalize, label_error, cls, nodes):
    if k < 2:
        raise DegenerateInputError(f"need at least 2 chunks, got {k}")
    edges: dict[tuple[int, int], str] = {}
    warnings = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        m = _PAIR_RE.search(line)
        if not m:
            continue
        i, j = int(m.group(1)), int(m.group(2))
        for idx in (i, j):
            if not 1 <= idx <= k:
                raise GraphIndexError(idx, k, lineno)
        if i == j:
            raise StructuredOutputError(f"line {lineno}: self-pair CHUNK[{i}] -> CHUNK[{j}]",
                                        code="SELF_EDGE")
        label = normalize(m.group(3))
        if label is None:
            raise label_error(m.group(3).strip(), lineno)
        if (i, j) in edges:
            warnings.append(f"duplicate pair ({i}, {j}) on line {lineno}; last occurrence kept")
        edges[(i, j)] = label
    if not edges:
        raise GraphParseError("no 'CHUNK[i] -> CHUNK[j]: LABEL' lines found")
    missing = [(i, j) for i in range(1, k + 1) for j in range(1, k + 1) if i != j and (i, j) not in edges]
    for pair in missing:
        edges[pair] = cls.default
    if missing:
        warnings.append(f"{len(missing)} missing pairs filled with {cls.default}: {missing[:10]}")
    node_ids = tuple(nodes) if nodes is not None else tuple(str(i) for i in range(1, k + 1))
    if len(node_ids) != k:
        raise ValueError(f"{len(node_ids)} node ids for k={k}")
    return cls(node_ids, dict(sorted(edges.items())), tuple(warnings))


def parse_graph_output(raw: str, k: int, nodes: Sequence[str] | None = None) -> RhetoricalGraph:
    """Parse listwise relation lines; missing pairs become UNRELATED, duplicates keep the last."""
    return _parse_pairs(raw, k, _relation_token, GraphLabelError, RhetoricalGraph, nodes)


def parse_marker_output(raw: str, k: int, nodes: Sequence[str] | None = None) -> MarkerGraph:
    return _parse_pairs(raw, k, _marker_token, MarkerError, MarkerGraph, nodes)


def _pair_budget(k: int) -> int:
    return max(1024, 16 * k * (k - 1))


def build_graph_prompt(chunks: Sequence[Chunk], backend_id: str = "mock",
                       query_id: str = "") -> LlmRequest:
    if len(chunks) < 2:
        raise DegenerateInputError(f"listwise graph needs at least 2 chunks, got {len(chunks)}")
    text = prompts.load("listwise_graph").render(
        relation_definitions=prompts.raw("inter_relations"), chunks=chunk_lines(chunks))
    return LlmRequest(backend_id=backend_id, user_prompt=text, tag="graph", query_id=query_id,
                      decode_params={"max_output_tokens": _pair_budget(len(chunks)), "beam_width": 3})


def build_marker_prompt(chunks: Sequence[Chunk], backend_id: str = "mock",
                        query_id: str = "") -> LlmRequest:
    if len(chunks) < 2:
        raise DegenerateInputError(f"marker inference needs at least 2 chunks, got {len(chunks)}")
    text = prompts.load("markers").render(chunks=chunk_lines(chunks))
    return LlmRequest(backend_id=backend_id, user_prompt=text, tag="baseline", query_id=query_id,
                      decode_params={"max_output_tokens": _pair_budget(len(chunks)), "beam_width": 3})


def _infer(chunks, client, build, parse, cls, backend_id, max_attempts, query_id):
    nodes = [c.chunk_id for c in chunks]
    if len(chunks) < 2:
        return cls.uniform(nodes)
    req = build(chunks, backend_id, query_id)
    try:
        return client.run_with_retry(req, lambda raw: parse(raw, len(chunks), nodes), max_attempts).value
    except StructuredOutputExhausted as exc:
        log.warning("%s inference exhausted for query %r; using a %s-only graph", req.tag,
                    query_id, cls.default)
        return cls.uniform(nodes, [f"retry exhausted ({exc.last_violation}); all pairs {cls.default}"])


def infer_graph(chunks: Sequence[Chunk], client: LlmClient, backend_id: str = "mock",
                max_attempts: int = 3, query_id: str = "") -> RhetoricalGraph:
    """One listwise call; an empty graph for k < 2 and an all-UNRELATED graph on exhaustion."""
    return _infer(chunks, client, build_graph_prompt, parse_graph_output, RhetoricalGraph,
                  backend_id, max_attempts, query_id)


def infer_markers(chunks: Sequence[Chunk], client: LlmClient, backend_id: str = "mock",
                  max_attempts: int = 3, query_id: str = "") -> MarkerGraph:
    return _infer(chunks, client, build_marker_prompt, parse_marker_output, MarkerGraph,
                  backend_id, max_attempts, query_id)
