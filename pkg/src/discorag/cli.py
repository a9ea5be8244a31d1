"""``discorag`` command line. Exit codes: 0 success, 1 fatal error, 2 some queries failed."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .corpus import ConfigurationError, CorpusError, chunk_corpus, load_corpus
from .evaluation import EvaluationError, aggregate_report, llm_judge_score, score_answer
from .llm import HttpBackend, LlmError, MockBackend, MockFixtures
from .perturbation import manifest_records, write_manifest
from .pipeline import (OFFLINE_QUERY_ID, Engine, PipelineConfig, SchemaError,
                       aggregate_rows, expand_grid, load_config, load_queries, read_report, run_config,
                       run_id, run_suite, write_aggregate_csv, write_report, write_rows_csv,
                       write_summary_csv)
from .retrieval import HashingEmbedder, RetrievalError, build_index, load_index, save_index
from .rst import get_or_parse

log = logging.getLogger("discorag")

VERBS = ("ingest", "index", "parse-trees", "run", "sweep", "perturb-run", "evaluate", "report")

# flag dest -> PipelineConfig field
FLAG_FIELDS = {
    "corpus": "corpus", "queries": "queries", "method": "method", "chunk_size": "chunk_size",
    "top_k": "top_k", "noise_ratio": "noise_ratio", "perturb": "perturb", "backend": "backend",
    "parser_backend": "parser_backend", "judge_backend": "judge_backend",
    "mock_fixtures": "mock_fixtures", "cache": "cache", "out": "out", "seed": "seed",
    "index_dir": "index_dir", "auto_index": "auto_index", "scope": "retrieval_scope",
    "max_attempts": "max_attempts", "parallelism": "parallelism", "ablate": "ablate",
    "embed_dim": "embed_dim",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit 2, which is reserved for partial failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with pipeline config fields")
    p.add_argument("--corpus", help="corpus JSONL (doc_id, text, lang?)")
    p.add_argument("--queries", help="query JSONL (query_id, question, golds, doc_id?, dataset?)")
    p.add_argument("--method", help="disco | full_context | standard_rag | retrieve_and_plan | "
                                    "plan_and_retrieve | markers")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--noise-ratio", type=float)
    p.add_argument("--perturb", action="append", metavar="TARGET:KIND:FRACTION:SEED")
    p.add_argument("--ablate", action="append", choices=("trees", "graph", "plan"))
    p.add_argument("--scope", choices=("open", "closed"), help="retrieval scope")
    p.add_argument("--backend", help="generator backend id: mock | http[:model]")
    p.add_argument("--parser-backend", help="RST parser backend id (default: --backend)")
    p.add_argument("--judge-backend", help="judge backend id; enables LLM scoring")
    p.add_argument("--mock-fixtures", help="JSON fixture table for the mock backend")
    p.add_argument("--cache", help="tree cache JSONL path")
    p.add_argument("--index-dir", help="directory holding index files (default: <corpus>.index)")
    p.add_argument("--auto-index", action="store_true", default=None,
                   help="build missing indexes instead of failing")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-attempts", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="discorag", description="Discourse-structured retrieval-augmented generation.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    helps = {
        "ingest": "load and chunk a corpus, writing chunks JSONL",
        "index": "build the vector index for one chunk size",
        "parse-trees": "populate the RST tree cache for every chunk",
        "run": "run one configuration over the query set",
        "sweep": "run a grid of configurations and write a summary CSV",
        "perturb-run": "run with structural perturbations and write a manifest",
        "evaluate": "re-score the answers in existing reports",
        "report": "merge report files into aggregate tables",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb])
        _add_config_flags(p)
        if verb == "sweep":
            p.add_argument("--grid", action="append", default=[], metavar="FIELD=V1,V2,...",
                           help="vary a config field; repeat for a cartesian grid")
        if verb in ("evaluate", "report"):
            p.add_argument("reports", nargs="*", help="report JSONL files")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    values = load_config(args.config) if args.config else {}
    for dest, fname in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        values[fname] = tuple(value) if isinstance(value, list) else value
    return PipelineConfig.from_dict(values)


def make_backends(cfg: PipelineConfig) -> dict:
    backends = {}
    fixtures = MockFixtures.load(cfg.mock_fixtures) if cfg.mock_fixtures else None
    ids = [(cfg.backend, False), (cfg.parser, False)]
    if cfg.judge_backend:
        ids.append((cfg.judge_backend, True))
    for bid, is_judge in ids:
        if bid in backends:
            continue
        kind, _, model = bid.partition(":")
        if kind == "mock":
            backends[bid] = MockBackend(fixtures, name=bid)
        elif kind == "http":
            url_var, key_var = ("JUDGE_API_URL", "JUDGE_API_KEY") if is_judge else ("LLM_API_URL", "LLM_API_KEY")
            backends[bid] = HttpBackend.from_env(model or "default", url_var, key_var, name=bid)
        else:
            raise ConfigurationError(f"unknown backend id {bid!r}; use 'mock' or 'http[:model]'")
    return backends


def _require(value, flag: str):
    if not value:
        raise ConfigurationError(f"{flag} is required for this command")
    return value


def index_path(cfg: PipelineConfig, chunk_size: int) -> Path:
    base = Path(cfg.index_dir) if cfg.index_dir else Path(f"{_require(cfg.corpus, '--corpus')}.index")
    return base / f"index-cs{chunk_size}-{HashingEmbedder(cfg.embed_dim).name}.jsonl"


def make_engine(cfg: PipelineConfig, chunk_sizes: Sequence[int]) -> Engine:
    docs = load_corpus(_require(cfg.corpus, "--corpus"))
    engine = Engine(docs, make_backends(cfg), embed_dim=cfg.embed_dim)
    for cs in sorted(set(chunk_sizes)):
        path = index_path(cfg, cs)
        if path.exists():
            index, _ = load_index(path, engine.provider)
            engine.add_index(cs, index)
        elif cfg.auto_index:
            save_index(engine.corpus_at(cs).index, _mkparent(path), {"chunk_size": cs})
        else:
            raise ConfigurationError(
                f"no index for chunk size {cs} at {path}; run `discorag index --corpus {cfg.corpus} "
                f"--chunk-size {cs}` or pass --auto-index")
    return engine


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _out_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.out or "runs")


# -- verbs --------------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, args) -> int:
    docs = load_corpus(_require(cfg.corpus, "--corpus"))
    chunks = chunk_corpus(docs, cfg.chunk_size)
    print(f"documents={len(docs)} chunks={len(chunks)} chunk_size={cfg.chunk_size}")
    if cfg.out:
        path = _mkparent(Path(cfg.out) / f"chunks-cs{cfg.chunk_size}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for c in chunks:
                fh.write(json.dumps({"chunk_id": c.chunk_id, "doc_id": c.doc_id, "ordinal": c.ordinal,
                                     "token_span": list(c.token_span), "text": c.text}) + "\n")
        print(f"wrote {path}")
    return 0


def cmd_index(cfg: PipelineConfig, args) -> int:
    docs = load_corpus(_require(cfg.corpus, "--corpus"))
    provider = HashingEmbedder(cfg.embed_dim)
    chunks = chunk_corpus(docs, cfg.chunk_size)
    path = _mkparent(index_path(cfg, cfg.chunk_size))
    save_index(build_index(chunks, provider), path, {"chunk_size": cfg.chunk_size})
    print(f"indexed {len(chunks)} chunks -> {path}")
    return 0


def cmd_parse_trees(cfg: PipelineConfig, args) -> int:
    docs = load_corpus(_require(cfg.corpus, "--corpus"))
    engine = Engine(docs, make_backends(cfg), embed_dim=cfg.embed_dim)
    client = engine.client()
    cache = engine.cache(cfg.cache)
    chunks = chunk_corpus(docs, cfg.chunk_size)
    for chunk in chunks:
        get_or_parse(chunk, cache, client, cfg.parser, cfg.max_attempts, OFFLINE_QUERY_ID)
    calls = client.ledger.totals(OFFLINE_QUERY_ID)["calls_by_tag"].get("rst_parse", 0)
    print(f"chunks={len(chunks)} hits={cache.stats['hits']} misses={cache.stats['misses']} "
          f"fallbacks={cache.stats['fallbacks']} corrupt={cache.stats['corrupt']} rst_parse_calls={calls}")
    return 0


def _emit_run(report, cfg: PipelineConfig, out: Path, rid: str) -> int:
    path = out / f"{rid}.jsonl"
    write_report(report, path)
    write_aggregate_csv(report, out / f"{rid}.aggregate.csv")
    with open(out / f"{rid}.offline.json", "w", encoding="utf-8") as fh:
        json.dump(report.offline, fh, indent=2, sort_keys=True)
    failed = sum(1 for r in report.per_query if r["status"] != "ok")
    print(f"report {path} ({len(report.per_query)} queries, {failed} failed)")
    for rec in report.per_query:
        if rec["status"] != "ok":
            print(f"  failed {rec['query_id']}: {rec['error']}")
    return 2 if failed else 0


def cmd_run(cfg: PipelineConfig, args) -> int:
    queries = load_queries(_require(cfg.queries, "--queries"))
    engine = make_engine(cfg, [cfg.chunk_size] if cfg.method != "full_context" else [])
    report = run_config(queries, cfg, engine)
    return _emit_run(report, cfg, _out_dir(cfg), run_id(cfg))


def cmd_perturb_run(cfg: PipelineConfig, args) -> int:
    if not cfg.perturb:
        raise ConfigurationError("perturb-run needs at least one --perturb TARGET:KIND:FRACTION:SEED")
    queries = load_queries(_require(cfg.queries, "--queries"))
    rid = run_id(cfg)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / f"{rid}.manifest.jsonl",
                   manifest_records([q.query_id for q in queries], cfg.perturb_specs))
    engine = make_engine(cfg, [cfg.chunk_size])
    return _emit_run(run_config(queries, cfg, engine), cfg, out, rid)


def _parse_grid(items: Sequence[str]) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    grid = {}
    for item in items:
        name, _, raw = item.partition("=")
        name = name.strip().replace("-", "_")
        name = FLAG_FIELDS.get(name, name)
        if name not in types or not raw:
            raise ConfigurationError(f"bad --grid entry {item!r}")
        kind = str(types[name])
        if kind.startswith("tuple"):
            # Multi-valued fields take '+'-joined items per cell; 'none' is the empty cell.
            cast = lambda v: () if v == "none" else tuple(v.split("+"))  # noqa: E731
        elif kind.startswith("int"):
            cast = int
        elif kind.startswith("float"):
            cast = float
        elif kind.startswith("bool"):
            cast = lambda v: v.lower() in ("1", "true", "yes")  # noqa: E731
        else:
            cast = str
        grid[name] = [cast(v) for v in raw.split(",")]
    if not grid:
        raise ConfigurationError("sweep needs at least one --grid FIELD=V1,V2")
    return grid


def cmd_sweep(cfg: PipelineConfig, args) -> int:
    grid = _parse_grid(args.grid)
    cells = expand_grid(cfg, grid)
    queries = load_queries(_require(cfg.queries, "--queries"))
    engine = make_engine(cfg, [c.chunk_size for c in cells])
    reports = run_suite(queries, cells, engine)
    out = _out_dir(cfg) / f"sweep-{run_id(cfg)}"
    status = 0
    for cell, report in zip(cells, reports):
        code = _emit_run(report, cell, out, cell.config_hash)
        status = max(status, code)
    write_summary_csv(reports, list(grid), out / "summary.csv")
    print(f"summary {out / 'summary.csv'} ({len(cells)} cells)")
    return status


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    if not args.reports:
        raise ConfigurationError("evaluate needs at least one report file")
    golds = {q.query_id: q for q in load_queries(cfg.queries)} if cfg.queries else {}
    docs = {d.doc_id: d.text for d in load_corpus(cfg.corpus)} if cfg.corpus else {}
    client = None
    if cfg.judge_backend:
        engine = Engine([], make_backends(cfg))
        client = engine.client()
    status = 0
    for path in args.reports:
        report = read_report(path)
        records = []
        for rec in report.per_query:
            rec = dict(rec)
            if rec["status"] == "ok":
                q = golds.get(rec["query_id"])
                refs = list(q.golds) if q else rec["golds"]
                source = "\n".join(docs[d] for d in (q.doc_id if q else ()) if d in docs)
                score = None
                if client is not None:
                    score = llm_judge_score(client, q.question if q else "", rec["answer"], refs[0],
                                            cfg.judge_backend, cfg.max_attempts, f"{rec['query_id']}#judge")
                    rec["llm_score_requested"] = True
                rec["metrics"] = score_answer(rec["answer"], refs, source or rec["answer"], score).to_dict()
            records.append(rec)
        new = aggregate_report(records, report.config_snapshot)
        target = Path(cfg.out or Path(path).parent) / f"{Path(path).stem}.eval.jsonl"
        write_report(new, target)
        write_aggregate_csv(new, target.with_suffix(".csv"))
        print(f"evaluated {path} -> {target}")
        if any(r["status"] != "ok" for r in records):
            status = 2
    return status


def _text_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, list):
        return ";".join(map(str, v))
    return str(v)


def cmd_report(cfg: PipelineConfig, args) -> int:
    if not args.reports:
        raise ConfigurationError("report needs at least one report file")
    reports = [read_report(p) for p in args.reports]
    knobs = ["chunk_size", "top_k", "noise_ratio", "perturb", "ablate"]
    rows = [row for rep in reports for row in aggregate_rows(rep, knobs)]
    out = _out_dir(cfg)
    write_rows_csv(rows, out / "report.csv", knobs)
    main_cols = knobs + ["method", "queries", "failed", "em", "rouge_l_f", "dr", "sari", "llm_score",
                         "llm_score_excluded"]
    eff_cols = ["method", "top_k", "mean_total_tokens", "mean_input_tokens", "mean_output_tokens",
                "mean_latency_ms", "mean_calls"]
    eff_rows = sorted(rows, key=lambda r: (r["method"], r["top_k"] or 0))
    text = (_text_table(rows, main_cols) + "\n\nEfficiency (per query)\n"
            + _text_table(eff_rows, eff_cols) + "\n")
    (out / "report.txt").write_text(text, encoding="utf-8")
    write_rows_csv(eff_rows, out / "efficiency.csv", ["top_k"])
    print(text, end="")
    return 0


HANDLERS = {
    "ingest": cmd_ingest, "index": cmd_index, "parse-trees": cmd_parse_trees, "run": cmd_run,
    "sweep": cmd_sweep, "perturb-run": cmd_perturb_run, "evaluate": cmd_evaluate, "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"discorag: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        return HANDLERS[args.verb](cfg, args)
    except (ConfigurationError, CorpusError, EvaluationError, SchemaError, RetrievalError, LlmError,
            OSError, ValueError) as exc:
        print(f"discorag: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
