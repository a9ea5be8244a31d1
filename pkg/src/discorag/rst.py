"""Intra-chunk RST trees: prompt, output grammar, validation, fallback and offline cache.

Canonical text form (what ``serialize_tree`` emits and ``parse_rst_output`` reads)::

    EDUs:
    [1] first unit
    [2] second unit
    RST ANALYSIS:
    RELATION(EDU_1, EDU_2): {ELABORATION}
    TREE STRUCTURE:
    ROOT[1-2]
    |--- NUCLEUS[1] first unit (N)
    |--- SATELLITE[2] second unit (S): {ELABORATION}

Nesting depth of a tree line is the number of ``|`` characters before the dashes, so
grandchildren are written ``|   |--- ...``. In a multinuclear pair the second nucleus
carries the relation label.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from . import prompts
from .corpus import Chunk
from .llm import LlmClient, LlmRequest, StructuredOutputError, StructuredOutputExhausted

log = logging.getLogger(__name__)

INTRA_RELATIONS = (
    "ELABORATION", "EXPLANATION", "EVIDENCE", "EXAMPLE", "CONTRAST", "COMPARISON",
    "CONCESSION", "ANTITHESIS", "CAUSE", "RESULT", "CONSEQUENCE", "PURPOSE", "CONDITION",
    "TEMPORAL", "SEQUENCE", "BACKGROUND", "CIRCUMSTANCE", "SUMMARY", "RESTATEMENT",
    "EVALUATION", "INTERPRETATION", "ATTRIBUTION", "DEFINITION", "CLASSIFICATION",
)
_INTRA_SET = frozenset(INTRA_RELATIONS)

NUCLEUS = "NUCLEUS"
SATELLITE = "SATELLITE"
MULTINUCLEAR_DEFAULT = "SEQUENCE"
FALLBACK_RELATION = "ELABORATION"


class RstParseError(StructuredOutputError):
    code = "MISSING_BLOCK"


class RelationLabelError(StructuredOutputError):
    code = "UNKNOWN_LABEL"

    def __init__(self, token: str, where: str = ""):
        super().__init__(f"unknown relation label {token!r}{where}")
        self.token = token


class TreeStructureError(StructuredOutputError):
    code = "STRUCTURE"


class EduIndexError(StructuredOutputError):
    code = "EDU_INDEX"


class CacheCorruptionError(RuntimeError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"tree cache entry {key[:16]}... is corrupt: {reason}")
        self.key = key


@dataclass(frozen=True)
class Edu:
    index: int
    text: str


@dataclass(frozen=True)
class RstNode:
    span: tuple[int, int]
    role: str = NUCLEUS
    relation: str | None = None
    children: tuple["RstNode", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class RstTree:
    chunk_id: str
    edus: tuple[Edu, ...]
    root: RstNode
    relation_edges: tuple[tuple[int, int, str], ...] = ()

    @property
    def m(self) -> int:
        return len(self.edus)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


# -- validation -------------------------------------------------------------

def validate_tree(tree: RstTree) -> list[Violation]:
    """Check every tree invariant; returns all violations (empty list means valid)."""
    out: list[Violation] = []
    m = len(tree.edus)
    if m == 0:
        return [Violation("EDU_SEQUENCE", "tree has no EDUs")]
    for pos, edu in enumerate(tree.edus, start=1):
        if edu.index != pos:
            out.append(Violation("EDU_SEQUENCE", f"EDU at position {pos} has index {edu.index}"))
        if not edu.text.strip():
            out.append(Violation("EMPTY_EDU", f"EDU {edu.index} has empty text"))
        elif edu.text != edu.text.strip() or len(edu.text.splitlines()) != 1:
            out.append(Violation("EDU_TEXT", f"EDU {edu.index} text has surrounding or embedded line whitespace"))

    def in_range(span) -> bool:
        lo, hi = span
        return 1 <= lo <= hi <= m

    root = tree.root
    if root.span != (1, m):
        out.append(Violation("ROOT_SPAN", f"root span {root.span} != (1, {m})"))
    if root.role != NUCLEUS or root.relation is not None:
        out.append(Violation("ROOT_ROLE", "root must be an unlabeled nucleus"))

    def visit(node: RstNode):
        if not in_range(node.span):
            out.append(Violation("INDEX", f"span {node.span} outside EDUs 1..{m}"))
        if node.relation is not None and node.relation not in _INTRA_SET:
            out.append(Violation("LABEL", f"unknown relation {node.relation!r} at {node.span}"))
        if node.role not in (NUCLEUS, SATELLITE):
            out.append(Violation("ROLE", f"unknown role {node.role!r} at {node.span}"))
        n = len(node.children)
        lo, hi = node.span
        if n == 0:
            if lo != hi:
                out.append(Violation("LEAF_SPAN", f"leaf spans several EDUs {node.span}"))
            return
        if n != 2:
            out.append(Violation("ARITY", f"node {node.span} has {n} children"))
        elif lo == hi:
            out.append(Violation("LEAF_SPAN", f"single-EDU node {node.span} has children"))
        elif all(in_range(c.span) for c in node.children):
            left, right = node.children
            if left.span[0] != lo or left.span[1] + 1 != right.span[0] or right.span[1] != hi:
                out.append(Violation("PARTITION",
                                     f"children {left.span},{right.span} do not tile {node.span}"))
            roles = (left.role, right.role)
            if roles == (SATELLITE, SATELLITE):
                out.append(Violation("ROLE_PAIR", f"two satellites under {node.span}"))
            elif roles == (NUCLEUS, NUCLEUS):
                if left.relation is not None or right.relation is None:
                    out.append(Violation("RELATION",
                                         f"multinuclear pair under {node.span} must label only the second nucleus"))
            else:
                nuc, sat = (left, right) if left.role == NUCLEUS else (right, left)
                if sat.relation is None:
                    out.append(Violation("RELATION", f"satellite {sat.span} has no relation"))
                if nuc.relation is not None:
                    out.append(Violation("RELATION", f"nucleus {nuc.span} carries a relation"))
        for child in node.children:
            visit(child)

    visit(root)
    for i, j, label in tree.relation_edges:
        if not (1 <= i <= m and 1 <= j <= m):
            out.append(Violation("INDEX", f"relation edge ({i}, {j}) outside EDUs 1..{m}"))
        if label not in _INTRA_SET:
            out.append(Violation("LABEL", f"unknown relation {label!r} on edge ({i}, {j})"))
    if not out:
        leaves = Counter(n.span[0] for n in root.walk() if n.is_leaf)
        if sorted(leaves) != list(range(1, m + 1)) or any(c != 1 for c in leaves.values()):
            out.append(Violation("COVERAGE", "EDUs are not covered by exactly one leaf each"))
    return out


def _raise_for(violations: list[Violation]) -> None:
    if not violations:
        return
    detail = "; ".join(f"{v.code}: {v.message}" for v in violations)
    codes = {v.code for v in violations}
    if codes & {"INDEX", "EDU_SEQUENCE"}:
        raise EduIndexError(detail)
    if "LABEL" in codes:
        raise StructuredOutputError(detail, code="UNKNOWN_LABEL")
    raise TreeStructureError(detail)


def derive_relation_edges(root: RstNode) -> tuple[tuple[int, int, str], ...]:
    """One (nucleus head EDU, satellite head EDU, label) edge per internal node, pre-order.

    For multinuclear pairs the edge runs from the first nucleus to the second.
    """
    edges = []
    for node in root.walk():
        if node.is_leaf:
            continue
        left, right = node.children
        if left.role == NUCLEUS and right.role == NUCLEUS:
            edges.append((left.span[0], right.span[0], right.relation))
        else:
            nuc, sat = (left, right) if left.role == NUCLEUS else (right, left)
            edges.append((nuc.span[0], sat.span[0], sat.relation))
    return tuple(edges)


# -- serialization ----------------------------------------------------------

def _span_text(span: tuple[int, int]) -> str:
    lo, hi = span
    return str(lo) if lo == hi else f"{lo}-{hi}"


def render_tree_block(tree: RstTree) -> list[str]:
    lines = [f"ROOT[{tree.root.span[0]}-{tree.root.span[1]}]"]
    texts = {e.index: e.text for e in tree.edus}

    def emit(node: RstNode, depth: int):
        prefix = "|   " * (depth - 1) + "|--- "
        body = f"{node.role}[{_span_text(node.span)}]"
        if node.is_leaf:
            body += f" {texts[node.span[0]]}"
        body += " (N)" if node.role == NUCLEUS else " (S)"
        if node.relation is not None:
            body += f": {{{node.relation}}}"
        lines.append(prefix + body)
        for child in node.children:
            emit(child, depth + 1)

    for child in tree.root.children:
        emit(child, 1)
    return lines


def serialize_tree(tree: RstTree) -> str:
    _raise_for(validate_tree(tree))
    lines = ["EDUs:"]
    lines += [f"[{e.index}] {e.text}" for e in tree.edus]
    lines.append("RST ANALYSIS:")
    lines += [f"RELATION(EDU_{i}, EDU_{j}): {{{label}}}" for i, j, label in tree.relation_edges]
    lines.append("TREE STRUCTURE:")
    lines += render_tree_block(tree)
    return "\n".join(lines)


# -- parsing ----------------------------------------------------------------

_HEADERS = {"EDUS": "EDUs", "RST ANALYSIS": "RST ANALYSIS", "TREE STRUCTURE": "TREE STRUCTURE"}
_HEADER_RE = re.compile(r"^[\s*#>`_]*(EDUS|RST\s+ANALYSIS|TREE\s+STRUCTURE)[\s*_`]*:?[\s*_`]*$", re.I)
_EDU_RE = re.compile(r"^\s*\[\s*(\d+)\s*\]\s*(.*?)\s*$")
_REL_RE = re.compile(
    r"RELATION\s*\(\s*EDU_?\{?\s*(\d+)\s*\}?\s*,\s*EDU_?\{?\s*(\d+)\s*\}?\s*\)\s*:\s*"
    r"(?:\{\s*([^{}]*?)\s*\}|([A-Za-z_][A-Za-z_ \-]*?))\s*$", re.I)
_ROOT_RE = re.compile(r"^\s*ROOT\s*\[\s*(\d+)\s*(?:-\s*(\d+)\s*)?\]", re.I)
_BRANCH_RE = re.compile(r"^([\s|]*)-{2,}\s*(.*)$")
_NODE_RE = re.compile(r"^(NUCLEUS|SATELLITE)\s*\[\s*(\d+)\s*(?:-\s*(\d+)\s*)?\](.*)$", re.I)
_TAIL_RE = re.compile(
    r"^(?P<text>.*?)\s*(?:\(\s*(?P<mark>[NS])\s*\))?\s*"
    r"(?::\s*(?:\{\s*(?P<blabel>[^{}]*?)\s*\}|(?P<label>[A-Za-z_]+)))?\s*$", re.S)


def normalize_label(token: str) -> str:
    return re.sub(r"[\s\-]+", "_", token.strip()).upper()


def _check_label(token: str, where: str) -> str:
    label = normalize_label(token)
    if label not in _INTRA_SET:
        raise RelationLabelError(token.strip(), where)
    return label


def _split_blocks(raw: str) -> dict[str, list[tuple[int, str]]]:
    blocks: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, line in enumerate(raw.splitlines(), start=1):
        m = _HEADER_RE.match(line)
        if m:
            name = _HEADERS[re.sub(r"\s+", " ", m.group(1).upper())]
            # First occurrence wins; a repeated header closes the block.
            current = name if name not in blocks else None
            if current:
                blocks[current] = []
            continue
        if current is not None:
            blocks[current].append((lineno, line))
    for name in ("EDUs", "RST ANALYSIS", "TREE STRUCTURE"):
        if name not in blocks:
            raise RstParseError(f"missing block {name}:")
    return blocks


def _parse_edus(lines) -> list[Edu]:
    texts: list[tuple[int, str]] = []
    for lineno, line in lines:
        if not line.strip() or line.strip().startswith("```") or line.strip() == "...":
            continue
        m = _EDU_RE.match(line)
        if m:
            texts.append((int(m.group(1)), m.group(2)))
        elif texts:
            idx, text = texts[-1]
            texts[-1] = (idx, f"{text} {line.strip()}".strip())
    if not texts:
        raise RstParseError("block EDUs: contains no [k] lines", code="EMPTY_BLOCK")
    edus = []
    for pos, (idx, text) in enumerate(texts, start=1):
        if idx != pos:
            raise EduIndexError(f"EDU numbering must run 1..m; found [{idx}] at position {pos}")
        if not text:
            raise StructuredOutputError(f"EDU [{idx}] is empty", code="EMPTY_EDU")
        edus.append(Edu(idx, text))
    return edus


def _parse_analysis(lines, m: int) -> list[tuple[int, int, str]]:
    edges = []
    for lineno, line in lines:
        match = _REL_RE.search(line)
        if not match:
            continue
        i, j = int(match.group(1)), int(match.group(2))
        token = match.group(3) if match.group(3) is not None else match.group(4)
        label = _check_label(token, f" in RST ANALYSIS line {lineno}")
        for idx in (i, j):
            if not 1 <= idx <= m:
                raise EduIndexError(f"RST ANALYSIS line {lineno} references EDU {idx}, valid range 1..{m}")
        edges.append((i, j, label))
    return edges


@dataclass
class _Draft:
    span: tuple[int, int]
    role: str
    label: str | None
    lineno: int
    children: list["_Draft"] = field(default_factory=list)


def _parse_tree_block(lines, m: int) -> RstNode:
    root: _Draft | None = None
    stack: list[_Draft] = []
    for lineno, line in lines:
        if root is None:
            rm = _ROOT_RE.match(line)
            if rm:
                lo = int(rm.group(1))
                hi = int(rm.group(2)) if rm.group(2) else lo
                root = _Draft((lo, hi), NUCLEUS, None, lineno)
                stack = [root]
            continue
        branch = _BRANCH_RE.match(line)
        if not branch:
            if re.search(r"\b(NUCLEUS|SATELLITE)\s*\[", line, re.I):
                raise TreeStructureError(f"tree line {lineno} lacks a '|---' branch marker",
                                         code="MALFORMED_LINE")
            continue
        node = _NODE_RE.match(branch.group(2).strip())
        if not node:
            raise TreeStructureError(f"tree line {lineno} is not a NUCLEUS/SATELLITE node",
                                     code="MALFORMED_LINE")
        depth = max(1, branch.group(1).count("|"))
        role = node.group(1).upper()
        lo = int(node.group(2))
        hi = int(node.group(3)) if node.group(3) else lo
        tail = _TAIL_RE.match(node.group(4))
        mark = tail.group("mark") if tail else None
        if mark and mark.upper() != role[0]:
            raise TreeStructureError(f"tree line {lineno}: {role} marked ({mark})", code="ROLE_MARK")
        token = None
        if tail:
            token = tail.group("blabel") if tail.group("blabel") is not None else tail.group("label")
        label = _check_label(token, f" in TREE STRUCTURE line {lineno}") if token else None
        if depth > len(stack):
            raise TreeStructureError(f"tree line {lineno} jumps to depth {depth} without a parent",
                                     code="DEPTH")
        for idx in (lo, hi):
            if not 1 <= idx <= m:
                raise EduIndexError(f"tree line {lineno} references EDU {idx}, valid range 1..{m}")
        draft = _Draft((lo, hi), role, label, lineno)
        del stack[depth:]
        stack[-1].children.append(draft)
        stack.append(draft)
    if root is None:
        raise RstParseError("block TREE STRUCTURE: has no ROOT[lo-hi] line", code="MISSING_ROOT")
    return _freeze(root, is_root=True)


def _freeze(d: _Draft, is_root: bool = False) -> RstNode:
    n = len(d.children)
    if n not in (0, 2):
        raise TreeStructureError(f"node {d.span} (line {d.lineno}) has {n} children; need 0 or 2",
                                 code="ARITY")
    children: tuple[RstNode, ...] = ()
    if n == 2:
        left, right = d.children
        roles = (left.role, right.role)
        if roles == (SATELLITE, SATELLITE):
            raise TreeStructureError(f"node {d.span} has two satellites", code="ROLE_PAIR")
        if roles == (NUCLEUS, NUCLEUS):
            right.label = right.label or left.label or MULTINUCLEAR_DEFAULT
            left.label = None
        else:
            nuc, sat = (left, right) if left.role == NUCLEUS else (right, left)
            if sat.label is None:
                raise TreeStructureError(f"satellite {sat.span} (line {sat.lineno}) has no relation",
                                         code="MISSING_RELATION")
            nuc.label = None
        children = (_freeze(left), _freeze(right))
    if is_root:
        return RstNode(d.span, NUCLEUS, None, children)
    return RstNode(d.span, d.role, d.label, children)


def parse_rst_output(raw: str, chunk_id: str) -> RstTree:
    """Parse the three-block parser output into a validated tree.

    Raises a StructuredOutputError subclass whose ``code`` names the violation.
    """
    blocks = _split_blocks(raw)
    edus = _parse_edus(blocks["EDUs"])
    edges = _parse_analysis(blocks["RST ANALYSIS"], len(edus))
    root = _parse_tree_block(blocks["TREE STRUCTURE"], len(edus))
    tree = RstTree(chunk_id, tuple(edus), root, tuple(edges))
    _raise_for(validate_tree(tree))
    return tree


# -- construction -----------------------------------------------------------

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    # Collapse whitespace runs so each sentence fits on one transcript line.
    parts = (" ".join(s.split()) for s in _SENTENCE_END.split(text.strip()))
    return [s for s in parts if s]


def right_chain(edus: list[Edu], relation: str = FALLBACK_RELATION) -> RstNode:
    m = len(edus)

    def build(i: int, role: str, rel: str | None) -> RstNode:
        if i == m:
            return RstNode((i, i), role, rel)
        return RstNode((i, m), role, rel, (RstNode((i, i), NUCLEUS), build(i + 1, SATELLITE, relation)))

    return build(1, NUCLEUS, None)


def fallback_tree(chunk: Chunk) -> RstTree:
    """Right-branching chain over sentence EDUs; each later EDU elaborates the first."""
    sentences = split_sentences(chunk.text) or [chunk.text.strip()]
    edus = [Edu(i, s) for i, s in enumerate(sentences, start=1)]
    root = right_chain(edus)
    return RstTree(chunk.chunk_id, tuple(edus), root, derive_relation_edges(root))


def relation_definitions() -> str:
    return prompts.raw("intra_relations")


def prompt_version() -> str:
    return f"{prompts.load('rst_tree').version}+{prompts.load('intra_relations').version}"


def build_rst_prompt(chunk: Chunk, backend_id: str = "mock", query_id: str = "") -> LlmRequest:
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id!r} has empty text")
    text = prompts.load("rst_tree").render(relation_definitions=relation_definitions(),
                                           chunk=chunk.text)
    return LlmRequest(backend_id=backend_id, user_prompt=text, tag="rst_parse", query_id=query_id,
                      decode_params={"max_output_tokens": 1024, "beam_width": 3})


# -- cache ------------------------------------------------------------------

def cache_key(chunk_text: str, prompt_version: str, backend_id: str) -> str:
    return hashlib.sha256(f"{chunk_text}\x00{prompt_version}\x00{backend_id}".encode("utf-8")).hexdigest()


class TreeCache:
    """Content-addressed tree store backed by an append-only JSONL file (or memory only).

    Later lines for the same key supersede earlier ones.
    """

    def __init__(self, path: str | Path | None = None, prompt_version: str | None = None):
        self.path = Path(path) if path else None
        self.prompt_version = prompt_version or globals()["prompt_version"]()
        self._store: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self.stats: Counter = Counter()
        self.errors: list[str] = []
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    self._store[entry["key"]] = entry
                except (ValueError, KeyError, TypeError):
                    self.errors.append(f"{self.path}:{lineno}: unreadable cache line skipped")
                    log.warning(self.errors[-1])

    def __len__(self) -> int:
        return len(self._store)

    def key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks[key]

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._store.get(key)

    def put(self, key: str, entry: dict) -> None:
        entry = {"key": key, **entry}
        with self._lock:
            self._store[key] = entry
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class ParsedTree(NamedTuple):
    tree: RstTree
    cache_hit: bool


def get_or_parse(chunk: Chunk, cache: TreeCache, client: LlmClient, backend_id: str = "mock",
                 max_attempts: int = 3, query_id: str = "") -> ParsedTree:
    """Return the cached tree for ``chunk`` or parse it (retry with repair, then fallback)."""
    key = cache_key(chunk.text, cache.prompt_version, backend_id)
    with cache.key_lock(key):
        entry = cache.get(key)
        if entry is not None:
            try:
                tree = parse_rst_output(entry["tree"], chunk.chunk_id)
                cache.stats["hits"] += 1
                return ParsedTree(tree, True)
            except (StructuredOutputError, KeyError, TypeError) as exc:
                err = CacheCorruptionError(key, str(exc))
                cache.errors.append(str(err))
                cache.stats["corrupt"] += 1
                log.warning("%s; re-parsing", err)
        cache.stats["misses"] += 1
        fallback = False
        try:
            req = build_rst_prompt(chunk, backend_id, query_id)
            tree = client.run_with_retry(req, lambda raw: parse_rst_output(raw, chunk.chunk_id),
                                         max_attempts).value
        except StructuredOutputExhausted as exc:
            log.info("rst parse exhausted for %s (%s); using fallback tree", chunk.chunk_id,
                     exc.last_violation)
            tree = fallback_tree(chunk)
            fallback = True
            cache.stats["fallbacks"] += 1
        cache.put(key, {"prompt_version": cache.prompt_version, "backend_id": backend_id,
                        "chunk_id": chunk.chunk_id, "fallback": fallback,
                        "tree": serialize_tree(tree)})
        return ParsedTree(tree, False)
