"""Write a synthetic corpus and query set for offline runs against the mock backend."""
import argparse

from discorag.synthetic import write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--docs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=13)
    args = ap.parse_args()
    corpus, queries = write_corpus(args.out, n_docs=args.docs, seed=args.seed)
    print(corpus)
    print(queries)


if __name__ == "__main__":
    main()
