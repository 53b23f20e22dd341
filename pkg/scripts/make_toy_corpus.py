#!/usr/bin/env python3
"""Generate the desk-scale Zipf toy corpus used by the example configs."""

import argparse

from masksched.data import synthetic_zipf_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="corpus file to write")
    parser.add_argument("--lines", type=int, default=2000)
    parser.add_argument("--word-types", type=int, default=195)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--min-len", type=int, default=6)
    parser.add_argument("--max-len", type=int, default=14)
    args = parser.parse_args()

    lines = synthetic_zipf_corpus(
        args.lines, args.word_types, args.seed, args.min_len, args.max_len
    )
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} lines to {args.out}")


if __name__ == "__main__":
    main()
