import dataclasses
import json

import pytest

from discorag.corpus import ConfigurationError
from discorag.llm import MockBackend, MockFixtures
from discorag.pipeline import (Engine, PipelineConfig, QueryRecord, SchemaError, aggregate_rows, expand_grid,
                               read_report, run_config, run_suite, write_report, write_summary_csv)

CALLS = {"disco": 3, "standard_rag": 1, "markers": 2, "retrieve_and_plan": 1, "plan_and_retrieve": 2,
         "full_context": 1}


def _queries(raw, n=6):
    return [QueryRecord(q["query_id"], q["question"], tuple(q["golds"]), (q["doc_id"],), q["dataset"])
            for q in raw[:n]]


def _engine(docs, fixtures=None):
    return Engine(docs, {"mock": MockBackend(fixtures)}, embed_dim=128)


def test_config_validation_and_canonical_forms():
    cfg = PipelineConfig(perturb=("GRAPH:Flip_Direction:0.50:7",), ablate=("plan", "graph", "plan"))
    assert cfg.perturb == ("graph:flip_direction:0.5:7",) and cfg.ablate == ("graph", "plan")
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"method": "nope"}, {"noise_ratio": 1.5}, {"ablate": ("trees",), "method": "standard_rag"},
                {"perturb": ("tree:bogus:0.5:1",)}, {"retrieval_scope": "both"}):
        with pytest.raises(ConfigurationError):
            PipelineConfig(**bad)
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"topk": 3})


def test_config_hash_tracks_fields():
    a = PipelineConfig()
    assert a.config_hash == PipelineConfig().config_hash
    assert a.config_hash != PipelineConfig(top_k=20).config_hash


@pytest.mark.parametrize("method", sorted(CALLS))
def test_per_query_call_budget(method, synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw), PipelineConfig(method=method, parallelism=3), _engine(docs))
    for rec in report.per_query:
        assert rec["status"] == "ok", rec["error"]
        assert rec["accounting"]["calls"] == CALLS[method]
    agg = report.aggregate[method]
    assert agg["sum_calls"] == sum(r["accounting"]["calls"] for r in report.per_query)
    assert agg["sum_total_tokens"] == sum(r["accounting"]["total_tokens"] for r in report.per_query)


def test_offline_parsing_is_reported_separately(synthetic):
    docs, raw = synthetic
    engine = _engine(docs)
    first = run_config(_queries(raw), PipelineConfig(), engine)
    assert first.offline["calls_by_tag"].get("rst_parse", 0) > 0
    second = run_config(_queries(raw), PipelineConfig(), engine)
    assert second.offline["calls"] == 0
    assert [r["answer"] for r in first.per_query] == [r["answer"] for r in second.per_query]


def test_failure_is_isolated(synthetic):
    docs, raw = synthetic
    queries = _queries(raw, 3)
    queries[1] = dataclasses.replace(queries[1], golds=())
    report = run_config(queries, PipelineConfig(method="standard_rag"), _engine(docs))
    assert [r["status"] for r in report.per_query] == ["ok", "failed", "ok"]
    assert "gold" in report.per_query[1]["error"]
    assert report.aggregate["standard_rag"]["failed"] == 1


def test_closed_scope_needs_doc_ids(synthetic):
    docs, raw = synthetic
    q = dataclasses.replace(_queries(raw, 1)[0], doc_id=())
    report = run_config([q], PipelineConfig(method="standard_rag", retrieval_scope="closed"), _engine(docs))
    assert report.per_query[0]["status"] == "failed"


def test_closed_scope_retrieves_only_own_document(synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw, 3), PipelineConfig(method="standard_rag", retrieval_scope="closed",
                                                         chunk_size=64), _engine(docs))
    for rec in report.per_query:
        doc = rec["query_id"].replace("q", "doc")
        assert all(cid.startswith(doc + "#") for cid in rec["retrieved"])


def test_noise_injection_marks_chunks(synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw), PipelineConfig(method="standard_rag", noise_ratio=0.4), _engine(docs))
    for rec in report.per_query:
        assert len(rec["injected"]) == 4 and set(rec["injected"]) <= set(rec["retrieved"])


def test_ablations_remove_calls(synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw, 2), PipelineConfig(ablate=("graph", "plan")), _engine(docs))
    assert all(r["accounting"]["calls"] == 1 for r in report.per_query)
    assert all(r["plan"] is None for r in report.per_query)


def test_plan_omission_and_perturbation_notes(synthetic):
    docs, raw = synthetic
    cfg = PipelineConfig(perturb=("plan:omit:0.5:0", "graph:remove_edges:1:3"))
    report = run_config(_queries(raw, 2), cfg, _engine(docs))
    for rec in report.per_query:
        assert rec["status"] == "ok" and rec["plan"] is None
        assert rec["perturbations"] == list(cfg.perturb)


def test_judge_accounting_kept_apart(synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw, 2), PipelineConfig(method="standard_rag", judge_backend="mock"),
                        _engine(docs))
    for rec in report.per_query:
        assert rec["accounting"]["calls"] == 1
        assert rec["judge_accounting"]["calls"] == 1
        assert 0 <= rec["metrics"]["llm_score"] <= 100


def test_generation_exhaustion_marks_failure(synthetic):
    docs, raw = synthetic
    fx = MockFixtures(rules=[{"tag": "generate", "response": "no marker"}])
    report = run_config(_queries(raw, 2), PipelineConfig(method="standard_rag", max_attempts=2),
                        _engine(docs, fx))
    assert all(r["status"] == "failed" for r in report.per_query)
    assert all(r["accounting"]["calls"] == 2 for r in report.per_query)


def test_report_round_trip_and_schema(tmp_path, synthetic):
    docs, raw = synthetic
    report = run_config(_queries(raw, 2), PipelineConfig(method="standard_rag"), _engine(docs))
    write_report(report, tmp_path / "r.jsonl")
    back = read_report(tmp_path / "r.jsonl")
    assert back.per_query == json.loads(json.dumps(report.per_query))
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = 99
    (tmp_path / "bad.jsonl").write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(SchemaError):
        read_report(tmp_path / "bad.jsonl")


def test_sweep_emits_row_per_cell(tmp_path, synthetic):
    docs, raw = synthetic
    cells = expand_grid(PipelineConfig(method="standard_rag"), {"top_k": [5, 10], "noise_ratio": [0.0, 0.2]})
    assert len(cells) == 4
    reports = run_suite(_queries(raw, 2), cells, _engine(docs))
    write_summary_csv(reports, ["top_k", "noise_ratio"], tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].startswith("top_k,noise_ratio,method,")
    assert aggregate_rows(reports[0], ["top_k"])[0]["top_k"] == 5
