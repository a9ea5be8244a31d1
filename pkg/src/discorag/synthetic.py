"""Seeded synthetic corpus and query set for offline runs of the whole pipeline."""
from __future__ import annotations

import json
import random
from pathlib import Path

_SUBJECTS = ["the observatory", "the river delta", "the enzyme", "the trade route", "the reactor",
             "the glacier", "the archive", "the vaccine trial", "the coral reef", "the bridge",
             "the protocol", "the festival", "the satellite", "the vineyard", "the railway"]
_VERBS = ["reshaped", "documented", "stabilized", "doubled", "delayed", "funded", "monitored",
          "reduced", "expanded", "replaced", "measured", "supported", "challenged", "revealed"]
_OBJECTS = ["regional rainfall patterns", "the local economy", "sediment transport", "public trust",
            "seasonal migration", "energy output", "the early settlements", "water quality",
            "the survey results", "long-term costs", "crop yields", "the original design"]
_CONNECTIVES = ["However,", "Therefore,", "Meanwhile,", "Moreover,", "In contrast,", "For example,",
                "As a result,", "In addition,", "Because of this,", ""]
_NAMES = ["Alder", "Brenning", "Castellan", "Dunmore", "Elsworth", "Farrow", "Garrick", "Halvard",
          "Ingram", "Jessop", "Kestrel", "Lowell", "Marlowe", "Northam", "Oakhurst", "Pemberton",
          "Quillon", "Ravensworth", "Stanmore", "Thistlewood", "Underhill", "Varga", "Wexford"]
_KINDS = ["Institute", "Museum", "Foundation", "Laboratory", "Society", "Observatory", "Academy"]


def _sentence(rng: random.Random) -> str:
    lead = rng.choice(_CONNECTIVES)
    body = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
    if rng.random() < 0.4:
        body += f" after {rng.randint(2, 40)} years of {rng.choice(_OBJECTS)}"
    text = f"{lead} {body}" if lead else body[0].upper() + body[1:]
    return text + "."


def make_corpus(n_docs: int = 20, sentences_per_doc: tuple[int, int] = (60, 90),
                seed: int = 13) -> tuple[list[dict], list[dict]]:
    """Return (documents, queries). Each document hides one founding fact; its query asks for it."""
    rng = random.Random(seed)
    names = rng.sample([f"{n} {k}" for n in _NAMES for k in _KINDS], n_docs)
    docs, queries = [], []
    for i, name in enumerate(names):
        doc_id = f"doc{i:03d}"
        year = rng.randint(1700, 2015)
        city = rng.choice(_NAMES) + "ton"
        sentences = [_sentence(rng) for _ in range(rng.randint(*sentences_per_doc))]
        fact = f"The {name} was founded in {year} in {city}."
        sentences.insert(rng.randrange(len(sentences) // 3), fact)
        sentences.insert(rng.randrange(len(sentences)), f"The {name} later expanded beyond {city}.")
        docs.append({"doc_id": doc_id, "text": " ".join(sentences), "lang": "en"})
        queries.append({"query_id": f"q{i:03d}", "question": f"When and where was the {name} founded?",
                        "golds": [f"The {name} was founded in {year} in {city}.", f"{year}"],
                        "doc_id": doc_id, "dataset": "synthetic"})
    return docs, queries


def write_corpus(out_dir: str | Path, n_docs: int = 20, seed: int = 13) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs, queries = make_corpus(n_docs, seed=seed)
    corpus_path, query_path = out / "corpus.jsonl", out / "queries.jsonl"
    for path, rows in ((corpus_path, docs), (query_path, queries)):
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return corpus_path, query_path
