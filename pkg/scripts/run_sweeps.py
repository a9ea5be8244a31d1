"""Chunk-size x top-k grid and noise-robustness sweep for each method.

Every grid goes through `discorag sweep`, so each cell leaves a full report and
the sweep directory gets a summary.csv with one row per cell.
"""
import argparse
import sys

from discorag.cli import main as cli

METHODS = ["disco", "standard_rag", "markers", "retrieve_and_plan", "plan_and_retrieve"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--queries", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--cache", required=True, help="tree cache JSONL, shared across runs")
    ap.add_argument("--backend", default="mock")
    ap.add_argument("--methods", nargs="+", default=METHODS)
    ap.add_argument("--chunk-sizes", default="128,256,512,1024")
    ap.add_argument("--top-ks", default="5,10,20,50")
    ap.add_argument("--noise", default="0.0,0.2,0.4")
    args = ap.parse_args()

    common = ["--corpus", args.corpus, "--queries", args.queries, "--out", args.out, "--cache", args.cache,
              "--backend", args.backend, "--auto-index"]
    worst = 0
    for method in args.methods:
        for grid in (["--grid", f"chunk_size={args.chunk_sizes}", "--grid", f"top_k={args.top_ks}"],
                     ["--grid", f"noise_ratio={args.noise}"]):
            code = cli(["sweep", *common, "--method", method, *grid])
            print(f"{method} {' '.join(grid[1::2])}: exit {code}", file=sys.stderr)
            worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
