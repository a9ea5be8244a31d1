"""Check rouge_l_tokens against a subsequence-enumeration oracle for every pair
of sequences over a small alphabet, up to a given length.

Length 10 over three symbols is about 7.8e9 pairs. Split the work with
--shard I/N across processes or machines; each shard covers a disjoint slice
of left-hand sequences.
"""
import argparse
import itertools
import sys
import time
from multiprocessing import Pool

from discorag.evaluation import rouge_l_tokens

_SEQS: list = []
_SUBS: dict = {}


def _subsequences(seq):
    return [{tuple(seq[i] for i in idx) for idx in itertools.combinations(range(len(seq)), r)}
            for r in range(len(seq) + 1)]


def _init(depth, alphabet):
    global _SEQS, _SUBS
    _SEQS = [s for n in range(depth + 1) for s in itertools.product(alphabet, repeat=n)]
    _SUBS = {s: _subsequences(s) for s in _SEQS}


def _check_row(i):
    a = _SEQS[i]
    sa = _SUBS[a]
    bad = []
    for b in _SEQS:
        sb = _SUBS[b]
        lcs = next(r for r in range(min(len(a), len(b)), -1, -1) if not sa[r].isdisjoint(sb[r]))
        want = 0.0 if lcs == 0 else 2 * lcs / (len(a) + len(b))
        if abs(rouge_l_tokens(a, b).f - want) > 1e-12:
            bad.append((a, b))
    return bad


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--alphabet", default="abc")
    ap.add_argument("--shard", default="0/1", help="I/N: check rows i with i %% N == I")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    shard, n_shards = map(int, args.shard.split("/"))

    _init(args.depth, args.alphabet)
    rows = range(shard, len(_SEQS), n_shards)
    start, mismatches = time.monotonic(), 0
    with Pool(args.workers, initializer=_init, initargs=(args.depth, args.alphabet)) as pool:
        for done, bad in enumerate(pool.imap_unordered(_check_row, rows, chunksize=64), 1):
            mismatches += len(bad)
            for a, b in bad[:5]:
                print(f"mismatch: {''.join(a)!r} vs {''.join(b)!r}")
            if done % 1000 == 0:
                print(f"{done}/{len(rows)} rows, {time.monotonic() - start:.0f}s", file=sys.stderr)
    pairs = len(rows) * len(_SEQS)
    print(f"depth {args.depth} shard {args.shard}: {pairs} pairs, {mismatches} mismatches")
    return 1 if mismatches else 0


if __name__ == "__main__":
    sys.exit(main())
