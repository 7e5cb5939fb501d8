"""Reward-vs-episode curves for every scheme (default cell).

Writes ``<out>/curves.csv`` in long format (scheme, episode, mean reward over
seeds in bits/J) next to the usual results.csv and traces.

    python scripts/fig2.py                       # E_p = 200, T = 100, 3 seeds
    python scripts/fig2.py --episodes 20 --timeslots 20 --out /tmp/fig2
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from noma_ee.experiment import load_config, run_experiment

SPEC = Path(__file__).parent / "specs" / "fig2.txt"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int)
    ap.add_argument("--timeslots", type=int)
    ap.add_argument("--replications", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    spec = load_config(SPEC)
    if args.episodes:
        spec.train = dataclasses.replace(spec.train, episodes=args.episodes)
    if args.timeslots:
        spec.train = dataclasses.replace(spec.train, timeslots=args.timeslots)
    if args.replications:
        spec.replications = args.replications
    if args.out:
        spec.out = args.out
    rows, logs = run_experiment(spec)

    curves = {}
    for (scheme, _, _), log in logs.items():
        curves.setdefault(scheme, []).append(log.episode_reward)
    with open(Path(spec.out) / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scheme", "episode", "mean_reward"))
        for scheme in sorted(curves):
            mean = np.mean(curves[scheme], axis=0)
            for i, r in enumerate(mean, 1):
                w.writerow((scheme, i, repr(float(r))))

    for scheme in sorted(curves):
        final = [r.avg_ee for r in rows if r.scheme == scheme]
        print(f"{scheme:<12} final-window EE {np.mean(final) / 1e6:7.2f} Mbit/J  "
              f"(seeds: {', '.join(f'{v / 1e6:.2f}' for v in final)})")
    print(f"curves written to {spec.out}/curves.csv")


if __name__ == "__main__":
    main()
