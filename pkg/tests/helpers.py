"""Independent oracles and generators shared by the test modules.

Nothing here calls into the code under test for the quantity being checked.
"""
from __future__ import annotations

import itertools
import math
import random

import numpy as np

from discorag.corpus import Chunk
from discorag.rst import INTRA_RELATIONS, NUCLEUS, SATELLITE, Edu, RstNode, RstTree

# Tokens chosen to collide with the transcript grammar.
TRICKY_WORDS = ["alpha", "beta", "(N)", "(S)", ":", "{ELABORATION}", "[2]", "|---", "NUCLEUS[1]",
                "-", "ROOT[1-2]", "x-y", "café", "EDUs", "{", "}", "(", ")", "RELATION(EDU_1,",
                "gamma.", "delta?", "TEXT", "|", "SATELLITE[3]", "{FOOBAR}"]


def random_text(rng: random.Random, lo: int = 1, hi: int = 8) -> str:
    return " ".join(rng.choice(TRICKY_WORDS) for _ in range(rng.randint(lo, hi)))


def random_tree(rng: random.Random, m: int, chunk_id: str = "doc#0") -> RstTree:
    """Uniformly random binary bracketing with random role pairs and labels."""
    edus = tuple(Edu(i, random_text(rng)) for i in range(1, m + 1))

    def build(lo, hi, role, rel):
        if lo == hi:
            return RstNode((lo, lo), role, rel)
        cut = rng.randint(lo, hi - 1)
        pair = rng.choice(["NS", "SN", "NN"])
        label = rng.choice(INTRA_RELATIONS)
        left_role = NUCLEUS if pair[0] == "N" else SATELLITE
        right_role = NUCLEUS if pair[1] == "N" else SATELLITE
        left_rel = label if left_role == SATELLITE else None
        right_rel = label if (right_role == SATELLITE or pair == "NN") else None
        return RstNode((lo, hi), role, rel, (build(lo, cut, left_role, left_rel),
                                             build(cut + 1, hi, right_role, right_rel)))

    root = build(1, m, NUCLEUS, None)
    n_edges = rng.randint(0, 2 * m)
    edges = tuple((rng.randint(1, m), rng.randint(1, m), rng.choice(INTRA_RELATIONS))
                  for _ in range(n_edges))
    return RstTree(chunk_id, edus, root, edges)


def chunk(text: str, chunk_id: str = "doc#0") -> Chunk:
    return Chunk(chunk_id, chunk_id.split("#")[0], 0, (0, len(text.split())), text)


def brute_lcs(a, b) -> int:
    """Longest common subsequence by enumerating every subsequence of the shorter input."""
    if len(a) > len(b):
        a, b = b, a
    best = 0
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return r
    return best


def brute_rouge(pred, ref):
    if not pred or not ref:
        return 0.0, 0.0, 0.0
    l = brute_lcs(pred, ref)
    if l == 0:
        return 0.0, 0.0, 0.0
    r, p = l / len(ref), l / len(pred)
    return r, p, 2 * r * p / (r + p)


def enum_ngrams(tokens, n):
    out = set()
    for i in range(len(tokens)):
        if i + n <= len(tokens):
            out.add(" ".join(tokens[i:i + n]))
    return out


def oracle_f1(cand: set, credit: set) -> float:
    if not cand and not credit:
        return 1.0
    if not cand or not credit:
        return 0.0
    tp = sum(1 for g in cand if g in credit)
    if tp == 0:
        return 0.0
    p = tp / len(cand)
    r = tp / len(credit)
    return 2 * p * r / (p + r)


def oracle_sari(source: str, pred: str, refs: list[str]) -> tuple[float, float, float, float]:
    s_t, p_t = source.lower().split(), pred.lower().split()
    r_ts = [r.lower().split() for r in refs]
    comps = [0.0, 0.0, 0.0]
    for n in (1, 2, 3, 4):
        S, P = enum_ngrams(s_t, n), enum_ngrams(p_t, n)
        R = set()
        for t in r_ts:
            R |= enum_ngrams(t, n)
        comps[0] += oracle_f1({g for g in P if g not in S}, {g for g in R if g not in S})
        comps[1] += oracle_f1({g for g in P if g in S}, {g for g in R if g in S})
        comps[2] += oracle_f1({g for g in S if g not in P}, {g for g in S if g not in R})
    add, keep, dele = (c / 4 for c in comps)
    return 100 * (add + keep + dele) / 3, add, keep, dele


def scan_topk(ids, vectors, query, k):
    """Linear-scan cosine ranking with ties broken by id."""
    scored = []
    qn = math.sqrt(sum(x * x for x in query))
    for cid, v in zip(ids, vectors):
        vn = math.sqrt(sum(x * x for x in v))
        cos = 0.0 if qn == 0 or vn == 0 else sum(a * b for a, b in zip(v, query)) / (vn * qn)
        scored.append((round(cos, 12), cid))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [cid for _, cid in scored[:k]]


class TableEmbedder:
    """Provider returning preset vectors keyed by text."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim
        self.name = f"table-d{dim}"

    def embed(self, text):
        return self.table[text]
