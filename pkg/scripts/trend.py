"""Average EE per scheme across a sweep (Fig. 3: requirements, Fig. 4: M_M).

Writes ``<out>/trend.csv`` (scheme, sweep value, mean EE over seeds) and
flags any scheme whose mean EE rises along the sweep.

    python scripts/trend.py fig3
    python scripts/trend.py fig4 --episodes 20 --timeslots 20 --out /tmp/fig4
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from noma_ee.experiment import load_config, run_experiment

SPECS = Path(__file__).parent / "specs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("figure", choices=["fig3", "fig4"])
    ap.add_argument("--episodes", type=int)
    ap.add_argument("--timeslots", type=int)
    ap.add_argument("--replications", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    spec = load_config(SPECS / f"{args.figure}.txt")
    if args.episodes:
        spec.train = dataclasses.replace(spec.train, episodes=args.episodes)
    if args.timeslots:
        spec.train = dataclasses.replace(spec.train, timeslots=args.timeslots)
    if args.replications:
        spec.replications = args.replications
    if args.out:
        spec.out = args.out
    rows, _ = run_experiment(spec)

    means = {}
    for r in rows:
        means.setdefault(r.scheme, {}).setdefault(float(r.sweep_value), []).append(r.avg_ee)
    with open(Path(spec.out) / "trend.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scheme", "sweep_value", "mean_ee"))
        for scheme in sorted(means):
            xs = sorted(means[scheme])
            m = [float(np.mean(means[scheme][x])) for x in xs]
            for x, v in zip(xs, m):
                w.writerow((scheme, f"{x:g}", repr(v)))
            rises = any(b > a for a, b in zip(m, m[1:]))
            print(f"{scheme:<12} " + "  ".join(f"{v / 1e6:7.2f}" for v in m)
                  + ("   (not monotone)" if rises else ""))
    print(f"{spec.sweep_axis}: {[f'{x:g}' for x in sorted(next(iter(means.values())))]}; "
          f"Mbit/J; trend written to {spec.out}/trend.csv")


if __name__ == "__main__":
    main()
