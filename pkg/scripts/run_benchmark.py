"""Time path preparation from scratch against incremental extension.

    python scripts/run_benchmark.py --out runs/bench [--addresses 1000] [--repeats 3]

Writes ``bench.csv`` (repeat, method, seconds, addresses) and prints the
median incremental/from-scratch ratio.
"""

import argparse
import csv
import statistics
from pathlib import Path

from pathtracer.cli import RunConfig, bench_paths
from pathtracer.synth import generate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--addresses", type=int, default=1000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    cfg = RunConfig(addresses=args.addresses)
    synth = generate(cfg.synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = []
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", "method", "seconds", "addresses"])
        for k in range(args.repeats):
            timings = bench_paths(synth.ledger, synth.labels, cfg)
            for method, secs in timings.items():
                w.writerow([k, method, f"{secs:.6f}", len(synth.labels)])
            ratios.append(timings["incremental"] / timings["batch"])
    print(f"incremental / from-scratch: median {statistics.median(ratios):.3f} over {args.repeats} repeats")


if __name__ == "__main__":
    main()
