"""Train the three model variants on one synthetic ledger and compare test metrics.

    python scripts/run_ablation.py --out runs/ablation [--addresses 1000] [--epochs 40]

Writes ``ablation.csv`` (variant, best_epoch, final_F1, F1E, F1C, mean_tfc, seconds)
and one training log per variant.
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from pathtracer.cli import RunConfig
from pathtracer.model import with_variant
from pathtracer.samples import build_samples
from pathtracer.synth import generate
from pathtracer.training import evaluate, train, write_history


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--addresses", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--variants", nargs="+", default=["af", "paths", "full"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig(addresses=args.addresses, epochs=args.epochs, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = generate(cfg.synth)
    samples = build_samples(synth.ledger, synth.labels, cfg.model, cfg.trace, cfg.timeline)
    split = None
    rows = []
    for variant in args.variants:
        for s in samples:
            s.scaled = {}
        model_cfg = with_variant(cfg.model, variant)
        start = time.perf_counter()
        result = train(samples, model_cfg, cfg.training, split=split)
        split = result.split
        report = evaluate(result.params, model_cfg, [samples[i] for i in split[2]])
        write_history(result.history, out / f"train_log_{variant}.csv")
        rows.append([variant, result.best_epoch, report.final_f1, report.f1_early, report.f1_consistent, report.mean_first_confident, time.perf_counter() - start])
        print(f"{variant}: final F1 {report.final_f1:.3f}  F1E {report.f1_early:.3f}  F1C {report.f1_consistent:.3f}")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "best_epoch", "final_F1", "F1E", "F1C", "mean_tfc", "seconds"])
        for r in rows:
            w.writerow([r[0], r[1], *(f"{v:.6f}" for v in r[2:])])


if __name__ == "__main__":
    main()
