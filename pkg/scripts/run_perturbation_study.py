"""Run the disco method once per structural perturbation and once unperturbed.

Each run writes its own report plus a manifest listing every perturbation
applied per query; `discorag report` can merge the reports afterwards.
"""
import argparse
import sys

from discorag.cli import main as cli

STUDY = [
    "tree:shuffle_labels:0.5:1",
    "tree:swap_nuclearity:0.5:1",
    "tree:drop_subtree:0.3:1",
    "graph:remove_edges:0.5:1",
    "graph:flip_direction:0.5:1",
    "graph:replace_labels:0.5:1",
    "plan:omit:0:1",
    "plan:shuffle_steps:1.0:1",
    "plan:remove_steps:0.5:1",
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--queries", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--cache", required=True)
    ap.add_argument("--backend", default="mock")
    ap.add_argument("--spec", action="append", help="override the default perturbation list")
    args = ap.parse_args()

    common = ["--corpus", args.corpus, "--queries", args.queries, "--out", args.out, "--cache", args.cache,
              "--backend", args.backend, "--auto-index", "--method", "disco"]
    worst = cli(["run", *common])
    for spec in args.spec or STUDY:
        code = cli(["perturb-run", *common, "--perturb", spec])
        print(f"{spec}: exit {code}", file=sys.stderr)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
