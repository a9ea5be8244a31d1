"""Seeded structural perturbations of trees, graphs and plans.

Every operator draws from ``random.Random`` seeded by ``spec_seed(spec, query_id)``:
the first 8 bytes (big-endian) of SHA-256 over ``"{query_id}|{target}|{kind}|{fraction:.17g}|{seed}"``.
Counts are ``ceil(p * n)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .corpus import ConfigurationError
from .graph import INTER_RELATIONS, UNRELATED, RhetoricalGraph
from .planning import Blueprint
from .rst import (INTRA_RELATIONS, NUCLEUS, SATELLITE, Edu, RstNode, RstTree,
                  derive_relation_edges)

log = logging.getLogger(__name__)

KINDS = {
    "TREE": ("SHUFFLE_LABELS", "SWAP_NUCLEARITY", "DROP_SUBTREE"),
    "GRAPH": ("REMOVE_EDGES", "FLIP_DIRECTION", "REPLACE_LABELS"),
    "PLAN": ("OMIT", "SHUFFLE_STEPS", "REMOVE_STEPS"),
}
PARAMETERLESS = frozenset({"DROP_SUBTREE", "OMIT"})


@dataclass(frozen=True)
class PerturbSpec:
    target: str
    kind: str
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.target not in KINDS:
            raise ConfigurationError(f"unknown perturbation target {self.target!r}")
        if self.kind not in KINDS[self.target]:
            raise ConfigurationError(f"kind {self.kind!r} does not apply to {self.target}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError(f"fraction must be in [0, 1], got {self.fraction}")

    @classmethod
    def parse(cls, text: str) -> "PerturbSpec":
        """``target:kind:fraction:seed``, e.g. ``graph:flip_direction:0.5:7``."""
        parts = text.split(":")
        if len(parts) != 4:
            raise ConfigurationError(f"perturbation {text!r} is not target:kind:fraction:seed")
        target, kind, fraction, seed = parts
        try:
            return cls(target.upper(), kind.upper(), float(fraction), int(seed))
        except ValueError as exc:
            raise ConfigurationError(f"perturbation {text!r}: {exc}") from exc

    def __str__(self) -> str:
        return f"{self.target.lower()}:{self.kind.lower()}:{self.fraction:g}:{self.seed}"

    def to_dict(self) -> dict:
        return {"target": self.target, "kind": self.kind, "fraction": self.fraction, "seed": self.seed}


def spec_seed(spec: PerturbSpec, query_id: str = "") -> int:
    key = f"{query_id}|{spec.target}|{spec.kind}|{spec.fraction:.17g}|{spec.seed}"
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


def count_for(fraction: float, n: int) -> int:
    # The epsilon keeps 0.3 * 10 from rounding up to 4 through float error.
    return min(n, max(0, math.ceil(fraction * n - 1e-9)))


def _note(notes: list | None, msg: str) -> None:
    log.warning(msg)
    if notes is not None:
        notes.append(msg)


# -- trees ------------------------------------------------------------------

def _preorder(root: RstNode) -> list[RstNode]:
    return list(root.walk())


def _rebuild(node: RstNode, edit) -> RstNode:
    """Apply ``edit(node, new_children) -> node`` bottom-up."""
    kids = tuple(_rebuild(c, edit) for c in node.children)
    return edit(node, kids)


def _with_root(tree: RstTree, root: RstNode, edus=None) -> RstTree:
    return RstTree(tree.chunk_id, tuple(edus if edus is not None else tree.edus), root,
                   derive_relation_edges(root))


def _shuffle_labels(tree, rng, fraction):
    nodes = _preorder(tree.root)
    labeled = [id(n) for n in nodes if n.relation is not None]
    n = count_for(fraction, len(labeled))
    if n == 0:
        return tree
    chosen = set(rng.sample(labeled, n))
    new_label = {}
    for node in nodes:
        if id(node) in chosen:
            new_label[id(node)] = rng.choice([l for l in INTRA_RELATIONS if l != node.relation])

    def edit(node, kids):
        return replace(node, children=kids, relation=new_label.get(id(node), node.relation))

    return _with_root(tree, _rebuild(tree.root, edit))


def _swap_nuclearity(tree, rng, fraction):
    eligible = [id(n) for n in _preorder(tree.root)
                if n.children and {c.role for c in n.children} == {NUCLEUS, SATELLITE}]
    n = count_for(fraction, len(eligible))
    if n == 0:
        return tree
    chosen = set(rng.sample(eligible, n))

    def edit(node, kids):
        if id(node) in chosen:
            sat = next(c for c in node.children if c.role == SATELLITE)
            kids = tuple(replace(k, role=NUCLEUS, relation=None) if k.role == SATELLITE
                         else replace(k, role=SATELLITE, relation=sat.relation) for k in kids)
        return replace(node, children=kids)

    return _with_root(tree, _rebuild(tree.root, edit))


def _renumber(tree: RstTree, root: RstNode) -> RstTree:
    leaves = [n.span[0] for n in root.walk() if n.is_leaf]
    new_index = {old: pos for pos, old in enumerate(leaves, start=1)}
    texts = {e.index: e.text for e in tree.edus}

    def fix(node: RstNode) -> RstNode:
        if node.is_leaf:
            i = new_index[node.span[0]]
            return replace(node, span=(i, i))
        kids = tuple(fix(c) for c in node.children)
        return replace(node, span=(kids[0].span[0], kids[-1].span[1]), children=kids)

    new_root = fix(root)
    edus = [Edu(new_index[old], texts[old]) for old in leaves]
    return _with_root(tree, new_root, edus)


def _drop_subtree(tree, rng, notes):
    internal = [n for n in _preorder(tree.root) if n.children]
    if not internal:
        _note(notes, f"DROP_SUBTREE on single-leaf tree {tree.chunk_id!r}: no-op")
        return tree
    # A connection joins a node to its parent, so the root is only chosen when nothing else can be.
    candidates = [n for n in internal if n is not tree.root] or internal
    target = candidates[rng.randrange(len(candidates))]
    keep = next(c for c in target.children if c.role == NUCLEUS)

    def splice(node: RstNode) -> RstNode:
        if node is target:
            return replace(keep, role=node.role, relation=node.relation)
        return replace(node, children=tuple(splice(c) for c in node.children))

    return _renumber(tree, splice(tree.root))


def perturb_tree(tree: RstTree, spec: PerturbSpec, query_id: str = "",
                 notes: list | None = None) -> RstTree:
    if spec.target != "TREE":
        raise ConfigurationError(f"{spec} does not target trees")
    rng = random.Random(spec_seed(spec, query_id))
    if spec.kind == "SHUFFLE_LABELS":
        return _shuffle_labels(tree, rng, spec.fraction)
    if spec.kind == "SWAP_NUCLEARITY":
        return _swap_nuclearity(tree, rng, spec.fraction)
    return _drop_subtree(tree, rng, notes)


# -- graphs -----------------------------------------------------------------

def perturb_graph(g: RhetoricalGraph, spec: PerturbSpec, query_id: str = "",
                  notes: list | None = None) -> RhetoricalGraph:
    if spec.target != "GRAPH":
        raise ConfigurationError(f"{spec} does not target graphs")
    labeled = g.labeled()
    if not labeled:
        _note(notes, f"{spec.kind} on a graph without labelled edges: no-op")
        return g
    n = count_for(spec.fraction, len(labeled))
    if n == 0:
        return g
    rng = random.Random(spec_seed(spec, query_id))
    chosen = sorted(rng.sample(labeled, n))
    edges = dict(g.edges)
    if spec.kind == "REMOVE_EDGES":
        for pair in chosen:
            edges[pair] = UNRELATED
    elif spec.kind == "FLIP_DIRECTION":
        done = set()
        for i, j in chosen:
            if frozenset((i, j)) in done:
                continue
            done.add(frozenset((i, j)))
            edges[(i, j)], edges[(j, i)] = g.edges[(j, i)], g.edges[(i, j)]
    else:
        pool = [l for l in INTER_RELATIONS if l != UNRELATED]
        for pair in chosen:
            edges[pair] = rng.choice([l for l in pool if l != g.edges[pair]])
    return RhetoricalGraph(g.nodes, edges, g.warnings)


# -- plans ------------------------------------------------------------------

def perturb_plan(b: Blueprint, spec: PerturbSpec, query_id: str = "",
                 notes: list | None = None) -> Blueprint | None:
    """OMIT returns None, meaning the plan section is dropped from the generation prompt."""
    if spec.target != "PLAN":
        raise ConfigurationError(f"{spec} does not target plans")
    if spec.kind == "OMIT":
        return None
    steps = list(b.steps)
    rng = random.Random(spec_seed(spec, query_id))
    if spec.kind == "SHUFFLE_STEPS":
        n = count_for(spec.fraction, len(steps))
        if n < 2:
            return b
        positions = sorted(rng.sample(range(len(steps)), n))
        order = positions[:]
        rng.shuffle(order)
        shuffled = steps[:]
        for pos, src in zip(positions, order):
            shuffled[pos] = steps[src]
        return Blueprint.from_steps(shuffled, b.provenance)
    n = count_for(spec.fraction, len(steps))
    if n == 0:
        return b
    if len(steps) == 1:
        _note(notes, "REMOVE_STEPS on a single-step plan: no-op")
        return b
    n = min(n, len(steps) - 1)
    drop = set(rng.sample(range(len(steps)), n))
    return Blueprint.from_steps([s for i, s in enumerate(steps) if i not in drop], b.provenance)


# -- manifests --------------------------------------------------------------

def manifest_records(query_ids: Iterable[str], specs: Iterable[PerturbSpec]) -> list[dict]:
    specs = list(specs)
    return [{"query_id": q, **s.to_dict()} for q in query_ids for s in specs]


def write_manifest(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[tuple[str, PerturbSpec]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["query_id"], PerturbSpec(rec["target"], rec["kind"],
                                                         float(rec["fraction"]), int(rec["seed"]))))
    return out
