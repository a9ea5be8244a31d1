"""Answer metrics (EM, ROUGE-L, DR, SARI), LLM-judge scoring and per-method aggregation."""
from __future__ import annotations

import math
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Protocol, Sequence

from . import prompts
from .corpus import DEFAULT_TOKENIZER, Tokenizer
from .llm import LlmClient, LlmRequest, StructuredOutputError, StructuredOutputExhausted

METRIC_KEYS = ("em", "rouge_l_r", "rouge_l_p", "rouge_l_f", "dr", "sari", "sari_add", "sari_keep",
               "sari_del", "llm_score")
ACCOUNTING_KEYS = ("calls", "input_tokens", "output_tokens", "total_tokens", "latency_ms", "attempts")


class EvaluationError(ValueError):
    pass


# -- text ---------------------------------------------------------------------

def normalize_text(s: str) -> str:
    """NFC, lowercase, drop punctuation characters, collapse whitespace."""
    s = unicodedata.normalize("NFC", s).lower()
    s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    return " ".join(s.split())


def exact_match(pred: str, golds: Iterable[str]) -> int:
    golds = list(golds)
    if not golds:
        raise EvaluationError("exact_match needs at least one gold answer")
    p = normalize_text(pred)
    return int(any(p == normalize_text(g) for g in golds))


def _tokens(text: str, tok: Tokenizer = DEFAULT_TOKENIZER) -> list[str]:
    return tok.tokenize(text.lower())


# -- ROUGE-L ------------------------------------------------------------------

def lcs_len(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


class RougeL(NamedTuple):
    r: float
    p: float
    f: float


def rouge_l_tokens(pred: Sequence, ref: Sequence) -> RougeL:
    if not pred or not ref:
        return RougeL(0.0, 0.0, 0.0)
    lcs = lcs_len(pred, ref)
    r, p = lcs / len(ref), lcs / len(pred)
    f = 0.0 if lcs == 0 else 2 * r * p / (r + p)
    return RougeL(r, p, f)


def rouge_l(pred: str, ref: str) -> RougeL:
    return rouge_l_tokens(_tokens(pred), _tokens(ref))


def rouge_l_multi(pred: str, refs: Sequence[str]) -> RougeL:
    """Best-F score over references."""
    if not refs:
        raise EvaluationError("rouge_l_multi needs at least one reference")
    return max((rouge_l(pred, r) for r in refs), key=lambda s: s.f)


# -- DR -------------------------------------------------------------------------

def dr_score(pred: str, refs: Sequence[str]) -> float:
    """Share of references whose normalized text occurs in the normalized prediction
    as a run of whole tokens."""
    if not refs:
        raise EvaluationError("dr_score needs at least one reference")
    padded = f" {normalize_text(pred)} "
    hits = 0
    for ref in refs:
        norm = normalize_text(ref)
        if norm and f" {norm} " in padded:
            hits += 1
    return hits / len(refs)


# -- SARI -------------------------------------------------------------------------

class SariScores(NamedTuple):
    sari: float
    add_f1: float
    keep_f1: float
    del_f1: float


def ngrams(tokens: Sequence[str], n: int) -> set[tuple[str, ...]]:
    return {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


def set_f1(candidates: set, credit: set) -> float:
    if not candidates and not credit:
        return 1.0
    if not candidates or not credit:
        return 0.0
    hit = len(candidates & credit)
    if hit == 0:
        return 0.0
    p, r = hit / len(candidates), hit / len(credit)
    return 2 * p * r / (p + r)


def sari(source: str, pred: str, refs: Sequence[str], max_order: int = 4) -> SariScores:
    """Set-based SARI with F1 for all three operations, averaged over n-gram orders.

    Components are in [0, 1]; ``sari`` is their mean scaled to [0, 100].
    """
    if not refs:
        raise EvaluationError("sari needs at least one reference")
    src_t, pred_t = _tokens(source), _tokens(pred)
    ref_ts = [_tokens(r) for r in refs]
    add = keep = dele = 0.0
    for n in range(1, max_order + 1):
        s, p = ngrams(src_t, n), ngrams(pred_t, n)
        r = set().union(*(ngrams(t, n) for t in ref_ts))
        add += set_f1(p - s, r - s)
        keep += set_f1(p & s, r & s)
        dele += set_f1(s - p, s - r)
    add, keep, dele = add / max_order, keep / max_order, dele / max_order
    return SariScores(100.0 * (add + keep + dele) / 3.0, add, keep, dele)


# -- judge ----------------------------------------------------------------------

_INT = re.compile(r"-?\d+")


def parse_judge_score(raw: str) -> int:
    m = _INT.search(raw)
    if not m:
        raise StructuredOutputError("no integer score in judge output", code="NO_SCORE")
    value = int(m.group())
    if not 0 <= value <= 100:
        raise StructuredOutputError(f"score {value} outside 0..100", code="SCORE_RANGE")
    return value


def build_judge_prompt(query: str, answer: str, gold: str, backend_id: str,
                       query_id: str = "") -> LlmRequest:
    text = prompts.load("judge").render(query=query, gold=gold, answer=answer)
    return LlmRequest(backend_id=backend_id, user_prompt=text, tag="judge", query_id=query_id,
                      decode_params={"max_output_tokens": 16})


def llm_judge_score(client: LlmClient, query: str, answer: str, gold: str, backend_id: str,
                    max_attempts: int = 3, query_id: str = "") -> int | None:
    """Integer 0..100, or None when the judge never produced a usable score."""
    req = build_judge_prompt(query, answer, gold, backend_id, query_id)
    try:
        return client.run_with_retry(req, parse_judge_score, max_attempts).value
    except StructuredOutputExhausted:
        return None


class Scorer(Protocol):
    """Plug-in point for model-based metrics (e.g. BERTScore, SummaC)."""

    name: str

    def score(self, pred: str, refs: Sequence[str], source: str | None) -> float: ...


# -- per-answer scores ------------------------------------------------------------

@dataclass(frozen=True)
class MetricScores:
    em: int
    rouge_l_r: float
    rouge_l_p: float
    rouge_l_f: float
    dr: float
    sari: float
    sari_add: float
    sari_keep: float
    sari_del: float
    llm_score: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_KEYS}
        out.update(self.extra)
        return out


def score_answer(pred: str, golds: Sequence[str], source: str, llm_score: int | None = None,
                 scorers: Sequence[Scorer] = ()) -> MetricScores:
    rl = rouge_l_multi(pred, golds)
    sr = sari(source, pred, golds)
    extra = {s.name: s.score(pred, golds, source) for s in scorers}
    return MetricScores(exact_match(pred, golds), rl.r, rl.p, rl.f, dr_score(pred, golds),
                        sr.sari, sr.add_f1, sr.keep_f1, sr.del_f1, llm_score, extra)


# -- aggregation ------------------------------------------------------------------

@dataclass
class EvalReport:
    per_query: list[dict]
    aggregate: dict[str, dict]
    config_snapshot: dict
    # LLM usage not attributable to a single query (offline tree parsing).
    offline: dict = field(default_factory=dict)


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate_report(records: Sequence[dict], config_snapshot: dict | None = None) -> EvalReport:
    """Per-method means of every metric and accounting column, in sorted method order.

    Records are dicts with ``method``, ``status``, ``metrics`` and ``accounting`` keys and an
    optional ``config_hash``; mixing several config hashes is an error.
    """
    if not records:
        raise EvaluationError("cannot aggregate zero records")
    hashes = {r.get("config_hash") for r in records}
    if len(hashes) > 1:
        raise EvaluationError(f"records come from {len(hashes)} different configs")
    by_method: dict[str, list[dict]] = {}
    for r in records:
        by_method.setdefault(r["method"], []).append(r)
    aggregate = {}
    for method in sorted(by_method):
        recs = by_method[method]
        ok = [r for r in recs if r["status"] == "ok"]
        row: dict = {"queries": len(recs), "ok": len(ok), "failed": len(recs) - len(ok)}
        for key in METRIC_KEYS:
            vals = [r["metrics"][key] for r in ok if r["metrics"].get(key) is not None]
            row[key] = _mean(vals)
        row["llm_score_excluded"] = sum(1 for r in ok if r.get("llm_score_requested")
                                        and r["metrics"].get("llm_score") is None)
        for key in ACCOUNTING_KEYS:
            vals = [r["accounting"].get(key, 0) for r in recs]
            row[f"sum_{key}"] = math.fsum(vals) if key == "latency_ms" else sum(vals)
            row[f"mean_{key}"] = _mean([float(v) for v in vals])
        aggregate[method] = row
    return EvalReport(list(records), aggregate, dict(config_snapshot or {}))
