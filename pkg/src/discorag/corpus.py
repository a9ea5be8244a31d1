"""Document ingestion, tokenization and fixed-size chunking."""
from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence


class CorpusError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    lang: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    ordinal: int
    token_span: tuple[int, int]
    text: str

    @property
    def n_tokens(self) -> int:
        return self.token_span[1] - self.token_span[0]


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[str]: ...


@lru_cache(maxsize=4096)
def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


class WhitespacePunctTokenizer:
    """Split on Unicode whitespace, then peel leading and trailing punctuation
    characters off each piece as single-character tokens."""

    name = "ws-punct/1"

    def tokenize(self, text: str) -> list[str]:
        tokens: list[str] = []
        for piece in text.split():
            lo, hi = 0, len(piece)
            while lo < hi and _is_punct(piece[lo]):
                lo += 1
            while hi > lo and _is_punct(piece[hi - 1]):
                hi -= 1
            tokens.extend(piece[:lo])
            if lo < hi:
                tokens.append(piece[lo:hi])
            tokens.extend(piece[hi:])
        return tokens


DEFAULT_TOKENIZER = WhitespacePunctTokenizer()


def tokenize(text: str, tok: Tokenizer = DEFAULT_TOKENIZER) -> list[str]:
    return tok.tokenize(text)


def detokenize(tokens: Iterable[str]) -> str:
    # Lossy by design: chunk text is the single-space join of its tokens.
    return " ".join(tokens)


def count_tokens(text: str, tok: Tokenizer = DEFAULT_TOKENIZER) -> int:
    return len(tok.tokenize(text))


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSONL corpus (``doc_id``, ``text``, optional ``lang``).

    Raises CorpusError naming the offending line number, or the duplicated id.
    """
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, text = obj["doc_id"], obj["text"]
                if not isinstance(doc_id, str) or not isinstance(text, str):
                    raise TypeError("doc_id and text must be strings")
                doc = Document(doc_id=doc_id, text=text, lang=obj.get("lang"))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise CorpusError(f"line {lineno}: malformed corpus record ({exc})") from exc
            if doc.doc_id in seen:
                raise CorpusError(f"line {lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def chunk_document(doc: Document, chunk_size: int,
                   tok: Tokenizer = DEFAULT_TOKENIZER) -> list[Chunk]:
    if chunk_size < 1:
        raise ConfigurationError(f"chunk_size must be >= 1, got {chunk_size}")
    tokens = tok.tokenize(doc.text)
    chunks = []
    for ordinal, start in enumerate(range(0, len(tokens), chunk_size)):
        end = min(start + chunk_size, len(tokens))
        chunks.append(Chunk(
            chunk_id=f"{doc.doc_id}#{ordinal}",
            doc_id=doc.doc_id,
            ordinal=ordinal,
            token_span=(start, end),
            text=detokenize(tokens[start:end]),
        ))
    return chunks


def chunk_corpus(docs: Sequence[Document], chunk_size: int,
                 tok: Tokenizer = DEFAULT_TOKENIZER) -> list[Chunk]:
    out: list[Chunk] = []
    for doc in docs:
        out.extend(chunk_document(doc, chunk_size, tok))
    return out
