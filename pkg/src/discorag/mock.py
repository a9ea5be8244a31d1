"""Deterministic stand-in completions for offline runs.

``default_response`` reads the request tag and prompt and synthesizes a well-formed
answer for that contract: a valid RST transcript, a complete pair listing, a plan, an
extractive answer, or a judge score. Output depends only on the prompt text.
"""
from __future__ import annotations

import hashlib
import re

from .llm import LlmRequest

_REPAIR = "\n\nYOUR PREVIOUS OUTPUT WAS REJECTED:"
_CHUNK_LINE = re.compile(r"^CHUNK\[(\d+)\]: (.*)$", re.M)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _h(*parts) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()[:8], "big")


def _base(req: LlmRequest) -> str:
    return req.user_prompt.split(_REPAIR, 1)[0]


def _inputs(prompt: str) -> str:
    m = re.search(r"TEXT TO ANALYZE:?\s*\n", prompt)
    return prompt[m.end():] if m else prompt


def _section(inputs: str, header: str) -> str:
    start = inputs.find(header + "\n")
    if start < 0:
        return ""
    body = inputs[start + len(header) + 1:]
    nxt = re.search(r"^(QUERY|DOCUMENT|CHUNKS|RST TREES|RHETORICAL GRAPH|DISCOURSE MARKERS|"
                    r"DISCOURSE-AWARE PLAN|PLAN FROM STAGE 1|STAGE):$", body, re.M)
    return body[:nxt.start()] if nxt else body


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_END.split(text.strip()) if s.strip()]


def _clip(sentence: str, limit: int = 40) -> str:
    words = sentence.split()
    return " ".join(words[:limit])


def rst_response(prompt: str) -> str:
    from .rst import INTRA_RELATIONS, NUCLEUS, SATELLITE, Edu, RstNode, RstTree, derive_relation_edges, serialize_tree

    text = prompt.rsplit("TEXT TO ANALYZE:", 1)[-1].strip()
    sentences = _sentences(text) or [text]
    edus = tuple(Edu(i, s) for i, s in enumerate(sentences, start=1))

    def build(lo: int, hi: int, role: str, relation: str | None) -> RstNode:
        if lo == hi:
            return RstNode((lo, hi), role, relation)
        cut = lo + _h(text, lo, hi, "cut") % (hi - lo)
        pair = ("NS", "SN", "NN")[_h(text, lo, hi, "roles") % 3]
        label = INTRA_RELATIONS[_h(text, lo, hi, "label") % len(INTRA_RELATIONS)]
        roles = [NUCLEUS if c == "N" else SATELLITE for c in pair]
        rels = [label if (r == SATELLITE or (pair == "NN" and pos == 1)) else None
                for pos, r in enumerate(roles)]
        return RstNode((lo, hi), role, relation, (build(lo, cut, roles[0], rels[0]),
                                                  build(cut + 1, hi, roles[1], rels[1])))

    root = build(1, len(edus), NUCLEUS, None)
    return serialize_tree(RstTree("mock", edus, root, derive_relation_edges(root)))


def pair_response(prompt: str, labels: tuple[str, ...], default: str) -> str:
    chunks = dict((int(i), t) for i, t in _CHUNK_LINE.findall(_inputs(prompt)))
    k = max(chunks) if chunks else 0
    lines = []
    for i in range(1, k + 1):
        for j in range(1, k + 1):
            if i == j:
                continue
            # Roughly half the pairs are left at the default label.
            h = _h(chunks.get(i, ""), chunks.get(j, ""), i < j)
            label = default if h % 2 else labels[(h >> 1) % len(labels)]
            lines.append(f"CHUNK[{i}] -> CHUNK[{j}]: {{{label}}}")
    return "\n".join(lines)


def _chunks(inputs: str) -> list[str]:
    return [t for _, t in _CHUNK_LINE.findall(_section(inputs, "CHUNKS:"))]


def _ranked_chunk_positions(inputs: str, n: int) -> list[int]:
    """Chunk positions ordered by how many labelled outgoing pairs they have."""
    graph = _section(inputs, "RHETORICAL GRAPH:") or _section(inputs, "DISCOURSE MARKERS:")
    degree = [0] * n
    for i, label in re.findall(r"^CHUNK\[(\d+)\] -> CHUNK\[\d+\]: (.+)$", graph, re.M):
        if label not in ("UNRELATED", "NONE") and 1 <= int(i) <= n:
            degree[int(i) - 1] += 1
    return sorted(range(n), key=lambda p: (-degree[p], p))


def _words(text: str) -> set[str]:
    return {w for w in re.findall(r"\w+", text.lower()) if len(w) > 3}


def _best_sentences(texts: list[str], query: str, n: int) -> list[str]:
    """The ``n`` sentences sharing most content words with the query, kept in text order."""
    q = _words(query)
    cands = [s for t in texts for s in (_sentences(t) or [t])]
    ranked = sorted(range(len(cands)), key=lambda i: (-len(q & _words(cands[i])), i))[:n]
    return [cands[i] for i in sorted(ranked)]


def _extract(inputs: str, n_sentences: int) -> str:
    chunks = _chunks(inputs)
    query = _section(inputs, "QUERY:")
    if not chunks:
        doc = _section(inputs, "DOCUMENT:").strip()
        picks = _best_sentences([doc], query, n_sentences) if doc else []
    else:
        order = _ranked_chunk_positions(inputs, len(chunks))
        # Graph-central chunks first, then the best-matching sentence of each.
        picks = [_best_sentences([chunks[p]], query, 1)[0] for p in order[:n_sentences]]
        best = _best_sentences(chunks, query, 1)[0]
        if best not in picks:
            picks = [best] + picks[:-1]
    picks = [_clip(s) for s in picks if s]
    return " ".join(picks) if picks else "No supporting evidence was retrieved."


def plan_text(inputs: str) -> str:
    n = len(_chunks(inputs))
    order = _ranked_chunk_positions(inputs, n) if n else []
    lead = order[0] + 1 if order else 1
    steps = [f"Open with the central claim from CHUNK[{lead}] that answers the query."]
    if len(order) > 1:
        steps.append(f"Support it with the evidence in CHUNK[{order[1] + 1}].")
    if "RST TREES:" in inputs:
        steps.append("Keep nuclei in the foreground and mention satellites only as support.")
    if "RHETORICAL GRAPH:" in inputs:
        steps.append("Resolve contrasting chunks before drawing the conclusion.")
    steps.append("Close with a short synthesis that restates the answer.")
    return " ".join(steps)


def _overlap_score(prompt: str) -> int:
    gold = prompt.split("REFERENCE ANSWER:\n", 1)[-1].split("\nCANDIDATE ANSWER:\n", 1)[0]
    answer = prompt.split("CANDIDATE ANSWER:\n", 1)[-1]
    gold_words = set(re.findall(r"\w+", gold.lower()))
    ans_words = set(re.findall(r"\w+", answer.lower()))
    if not gold_words:
        return 0
    return round(100 * len(gold_words & ans_words) / len(gold_words))


def default_response(req: LlmRequest) -> str:
    prompt = _base(req)
    if req.tag == "rst_parse":
        return rst_response(prompt)
    if req.tag == "graph":
        from .graph import INTER_RELATIONS, UNRELATED

        return pair_response(prompt, tuple(l for l in INTER_RELATIONS if l != UNRELATED), UNRELATED)
    inputs = _inputs(prompt)
    if req.tag == "baseline":
        if "Discourse marker list" in prompt:
            from .graph import MARKERS, NONE_MARKER

            return pair_response(prompt, MARKERS, NONE_MARKER)
        query = _section(inputs, "QUERY:").strip()
        return (f"PLAN: Gather the evidence that answers the query, then state it directly.\n"
                f"RETRIEVAL HINT:\n- {query}\n- background facts for: {query}")
    if req.tag == "plan":
        return "PLAN: " + plan_text(inputs)
    if req.tag == "generate":
        n = 3 if "DISCOURSE-AWARE PLAN:" in inputs else 2
        answer = _extract(inputs, n)
        if "first writing a short plan" in prompt:
            return f"PLAN {plan_text(inputs)}\nANSWER {answer}"
        return f"ANSWER: {answer}"
    if req.tag == "judge":
        return f"SCORE: {_overlap_score(prompt)}"
    return ""
