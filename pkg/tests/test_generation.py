import pytest

from discorag.corpus import Chunk, ConfigurationError
from discorag.generation import (METHODS, Answer, MethodConfig, answer_disco, answer_full_context,
                                 answer_guided, answer_markers, answer_plan_and_retrieve,
                                 answer_retrieve_and_plan, answer_standard, build_plan_and_retrieve_prompts,
                                 build_standard_prompt, extract_answer, extract_plan_answer, extract_plan_hints,
                                 hint_retrieval)
from discorag.graph import infer_graph, infer_markers
from discorag.llm import LlmClient, MockBackend, MockFixtures, StructuredOutputError
from discorag.planning import AlignmentError, Blueprint
from discorag.retrieval import HashingEmbedder, build_index
from discorag.rst import fallback_tree

from helpers import chunk

QUERY = "When did the river flood the valley?"


def _chunks():
    return [chunk("The river flooded the valley in 1952. Farms were lost.", "d#0"),
            chunk("Rebuilding took a decade. New levees were raised.", "d#1"),
            chunk("Tourism grew in the 1970s.", "d#2")]


def test_method_flags():
    assert MethodConfig.for_method("disco") == MethodConfig("disco", 10, True, True, True)
    assert MethodConfig.for_method("standard_rag").uses_plan is False
    assert MethodConfig.for_method("markers").uses_graph
    with pytest.raises(ConfigurationError):
        MethodConfig.for_method("magic")
    assert len(METHODS) == 6


def test_answer_rejects_empty_and_unknown():
    with pytest.raises(ValueError):
        Answer("  ", "disco")
    with pytest.raises(ConfigurationError):
        Answer("x", "magic")


@pytest.mark.parametrize("raw,expected", [
    ("ANSWER: The flood was in 1952.", "The flood was in 1952."),
    ("Some preamble\n**ANSWER**\nIn 1952.", "In 1952."),
    ("answer : lowercase works", "lowercase works"),
])
def test_extract_answer(raw, expected):
    assert extract_answer(raw) == expected


@pytest.mark.parametrize("raw,code", [("nothing", "MISSING_ANSWER"), ("ANSWER:   ", "EMPTY_ANSWER")])
def test_extract_answer_errors(raw, code):
    with pytest.raises(StructuredOutputError) as err:
        extract_answer(raw)
    assert err.value.code == code


def test_extract_plan_answer_order():
    assert extract_plan_answer("PLAN first do x\nANSWER it is y") == ("first do x", "it is y")
    with pytest.raises(StructuredOutputError) as err:
        extract_plan_answer("ANSWER y\nPLAN x")
    assert err.value.code == "MARKER_ORDER"


def test_extract_plan_hints_strips_bullets():
    plan, hints = extract_plan_hints("PLAN: gather facts\nRETRIEVAL HINT:\n- flood year\n2) valley name\n\n")
    assert plan == "gather facts" and hints == ["flood year", "valley name"]
    assert extract_plan_hints("PLAN: only a plan") == ("only a plan", [])


def test_guided_prompt_sections(mock_client):
    chunks = _chunks()
    trees = [fallback_tree(c) for c in chunks]
    graph = infer_graph(chunks, mock_client)
    plan = Blueprint.from_text("Lead with the year. Then add context.")
    answer = answer_disco(mock_client, QUERY, chunks, trees, graph, plan, query_id="q")
    assert answer.method == "disco" and answer.text
    prompt = mock_client.ledger.records[-1]
    assert prompt.tag == "generate"
    with pytest.raises(AlignmentError):
        answer_disco(mock_client, QUERY, chunks, trees, None, plan)


def test_guided_without_plan_omits_section():
    seen = []
    client = LlmClient({"mock": MockBackend(fallback=lambda r: seen.append(r.user_prompt) or "ANSWER: ok")})
    answer_guided(client, QUERY, _chunks())
    assert "DISCOURSE-AWARE PLAN:" not in seen[0] and "CHUNK[3]:" in seen[0]


def test_baselines_make_expected_calls(mock_client):
    chunks = _chunks()
    assert answer_standard(mock_client, QUERY, chunks, query_id="s").text
    assert mock_client.ledger.totals("s")["calls"] == 1
    assert answer_full_context(mock_client, QUERY, " ".join(c.text for c in chunks), query_id="f").text
    assert mock_client.ledger.totals("f")["calls"] == 1
    rp = answer_retrieve_and_plan(mock_client, QUERY, chunks, query_id="r")
    assert rp.provenance["plan"] and mock_client.ledger.totals("r")["calls"] == 1
    markers = infer_markers(chunks, mock_client, query_id="m")
    answer_markers(mock_client, QUERY, chunks, markers, query_id="m")
    assert mock_client.ledger.totals("m")["calls_by_tag"] == {"baseline": 1, "generate": 1}


def test_standard_prompt_needs_chunks():
    with pytest.raises(ValueError):
        build_standard_prompt(QUERY, [])


def _index():
    chunks = [Chunk(f"d#{i}", "d", i, (0, 3), t) for i, t in enumerate(
        ["flood year 1952", "valley name Arden", "unrelated sports news", "flood damage costs", "weather today"])]
    emb = HashingEmbedder(64)
    return build_index(chunks, emb), emb, {c.chunk_id: c for c in chunks}


def test_hint_retrieval_union_keeps_best_and_truncates():
    index, emb, _ = _index()
    ranked = hint_retrieval(index, emb, ["flood year", "valley name"], 3)
    ids = [cid for cid, _ in ranked]
    assert len(ids) == 3 and len(set(ids)) == 3
    assert {"d#0", "d#1"} <= set(ids)
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_plan_and_retrieve_two_stages(mock_client):
    index, emb, by_id = _index()
    ans = answer_plan_and_retrieve(mock_client, "flood year", index, emb, 3, by_id, query_id="p")
    assert mock_client.ledger.totals("p")["calls_by_tag"] == {"baseline": 1, "generate": 1}
    # Overlapping hint results may leave fewer than k distinct chunks.
    assert 1 <= len(ans.provenance["chunk_ids"]) <= 3 and ans.provenance["hints"]
    stage1 = build_plan_and_retrieve_prompts("flood year")
    assert stage1.tag == "baseline" and "STAGE:\n1" in stage1.user_prompt


def test_plan_and_retrieve_without_hints_falls_back_to_query():
    fx = MockFixtures(rules=[{"tag": "baseline", "response": "PLAN: just answer"}])
    client = LlmClient({"mock": MockBackend(fx)})
    index, emb, by_id = _index()
    ans = answer_plan_and_retrieve(client, "flood year", index, emb, 2, by_id)
    assert ans.provenance["hints"] == ["flood year"] and ans.provenance["warnings"]
