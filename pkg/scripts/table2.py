"""Convergence table (time per episode, episodes to converge, convergence time).

Reads a results directory written by ``scripts/fig2.py`` or ``noma-ee run``.

    python scripts/table2.py results/fig2
"""

import argparse

from noma_ee.experiment import format_table, summarize_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dir", nargs="?", default="results/fig2")
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--tol", type=float, default=0.05)
    args = ap.parse_args()
    print(format_table(summarize_dir(args.dir, args.window, args.tol)))


if __name__ == "__main__":
    main()
