"""Replay a fresh ledger through a trained checkpoint at several removal thresholds.

    python scripts/run_early_stop.py --checkpoint runs/train/checkpoint.json --out runs/early_stop

Generates a ledger with a 5% malicious share, replays it once per threshold
(plus the checkpoint's calibrated one and no removal at all) and writes
``skip_ratio.csv`` (tau, t, skip_ratio) and ``summary.csv`` (tau, recall,
precision, final skip ratio), plus ``skip_ratio.svg``.
"""

import argparse
import csv
import math
from pathlib import Path

from pathtracer.evalmetrics import confusion_metrics
from pathtracer.monitor import horizon_predictions, open_watchlist, replay
from pathtracer.pathfind import TraceParams
from pathtracer.samples import Timeline
from pathtracer.svgplot import line_chart
from pathtracer.synth import SynthConfig, generate
from pathtracer.training import load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="runs/early_stop")
    ap.add_argument("--addresses", type=int, default=400)
    ap.add_argument("--seed", type=int, default=107)
    ap.add_argument("--taus", type=float, nargs="+", default=[0.5, 1.0, 2.5, 5.0])
    args = ap.parse_args()

    params, cfg, scalers, meta = load_checkpoint(args.checkpoint)
    trace = TraceParams(**meta["trace"]) if "trace" in meta else TraceParams()
    timeline = Timeline(horizon=cfg.horizon)
    synth = generate(SynthConfig(addresses=args.addresses, malicious_fraction=0.05, seed=args.seed))
    labels = {r.address: r.label for r in synth.labels}
    watch = [(r.address, r.first_seen_time) for r in synth.labels]
    taus = sorted(set(args.taus) | ({meta["calibrated_tau"]} if "calibrated_tau" in meta else set())) + [math.inf]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves, summary = {}, []
    for tau in taus:
        wl = open_watchlist(params, cfg, scalers, watch, tau, trace, timeline)
        reports = replay(wl, synth.ledger, timeline.horizon)
        preds = horizon_predictions(wl)
        addrs = sorted(preds)
        _, prec, rec, _ = confusion_metrics([preds[a] for a in addrs], [labels[a] for a in addrs])
        curves[f"tau={tau:g}"] = [r.skip_ratio for r in reports]
        summary.append([tau, rec, prec, reports[-1].skip_ratio])
        print(f"tau {tau:g}: recall {rec:.3f}  precision {prec:.3f}  skip ratio {reports[-1].skip_ratio:.3f}")
    with open(out / "skip_ratio.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "t", "skip_ratio"])
        for name, ratios in curves.items():
            for t, v in enumerate(ratios, start=1):
                w.writerow([name.split("=")[1], t, f"{v:.6f}"])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "recall", "precision", "final_skip_ratio"])
        for row in summary:
            w.writerow([f"{row[0]:g}", *(f"{v:.6f}" for v in row[1:])])
    line_chart(out / "skip_ratio.svg", curves, "timestep", "skip ratio", "Skip ratio by removal threshold")


if __name__ == "__main__":
    main()
