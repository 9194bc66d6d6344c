"""Command-line entry point: ``python -m pathtracer <command> [flags]``.

Settings resolve as flags > ``--config`` file (JSON) > defaults, and the
resolved values are written to ``manifest.json`` next to every output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .evalmetrics import dump_report, evaluate_scores
from .features import ADDRESS_FEATURES, TX_FEATURES, address_features, dump_feature_rows, uniform_path
from .graphs import build_path_graph
from .ledger import LedgerError, load_labels, load_ledger
from .model import ModelConfig, count_params
from .monitor import calibrate_tau, horizon_predictions, open_watchlist, replay
from .numerics import ShapeError
from .pathfind import PathSet, TraceParams, build_path_set, dump_paths, extend_path_set
from .samples import Timeline, build_samples
from .svgplot import line_chart
from .synth import SynthConfig, generate, write
from .training import TrainConfig, evaluate, load_checkpoint, predict_rates, save_checkpoint, survival_scores, train, write_history

log = logging.getLogger("pathtracer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    theta: float = 0.01
    tspan: int = 24 * 3600
    lu: int = 6
    hidden: int = 32
    heads: int = 4
    gamma: float = 1.0
    tau: float = 2.5
    interval_hours: float = 1.0
    horizon: int = 24
    seed: int = 7
    epochs: int = 40
    patience: int = 5
    lr: float = 1e-3
    path_cap: int = 256
    batch_size: int = 64
    variant: str = "full"
    addresses: int = 1000
    malicious_fraction: float = 0.1

    def validate(self) -> None:
        """Construct every module config once so bad values fail before any work starts."""
        _ = (self.trace, self.timeline, self.model, self.training, self.synth)

    @property
    def trace(self) -> TraceParams:
        return TraceParams(self.theta, self.tspan, self.path_cap)

    @property
    def timeline(self) -> Timeline:
        return Timeline(int(round(self.interval_hours * 3600)), self.horizon)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(d=self.hidden, l_u=self.lu, heads=self.heads, path_cap=self.path_cap, horizon=self.horizon, variant=self.variant)

    @property
    def training(self) -> TrainConfig:
        return TrainConfig(self.gamma, self.lr, self.epochs, self.patience, self.seed, self.batch_size)

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(addresses=self.addresses, malicious_fraction=self.malicious_fraction, seed=self.seed)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"float": float, "int": int, "str": str}


def resolve_config(flags: dict, config_file: str | None) -> RunConfig:
    """Merge defaults, the optional config file and explicitly given flags."""
    values = asdict(RunConfig())
    if config_file:
        loaded = json.loads(Path(config_file).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in flags.items() if k in values and v is not None})
    try:
        cfg = RunConfig(**{k: _CASTS[FIELD_TYPES[k]](v) for k, v in values.items()})
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "outputs": {k: Path(v).name for k, v in outputs.items()},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(args):
    ledger = load_ledger(args.ledger, external_refs=args.external_refs)
    labels = load_labels(args.labels) if args.labels else []
    if getattr(args, "address", None):
        wanted = set(args.address)
        labels = [r for r in labels if r.address in wanted]
        missing = wanted - {r.address for r in labels}
        if missing:
            raise LedgerError(f"addresses not in labels file: {sorted(missing)}")
    return ledger, labels


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = _out_dir(args)
    result = generate(cfg.synth)
    paths = write(result, out)
    synth_manifest = json.loads(paths["manifest"].read_text())
    write_manifest(out, "synth", cfg, paths, {"synth": synth_manifest})
    return paths


def cmd_paths(args, cfg: RunConfig) -> dict:
    ledger, labels = _inputs(args)
    out = _out_dir(args)
    all_paths = []
    graphs = {}
    for r in labels:
        ps = build_path_set(ledger, r.address, cfg.timeline.as_of(r.first_seen_time, cfg.horizon), cfg.trace)
        all_paths.extend(ps.backward + ps.forward)
        graphs[r.address] = {d: build_path_graph(getattr(ps, d), d).to_json() for d in ("backward", "forward")}
    dump_paths(all_paths, out / "paths.jsonl")
    (out / "graphs.json").write_text(json.dumps(graphs, sort_keys=True), encoding="utf-8")
    outputs = {"paths": out / "paths.jsonl", "graphs": out / "graphs.json"}
    write_manifest(out, "paths", cfg, outputs, {"addresses": len(labels), "paths": len(all_paths)})
    return outputs


def cmd_features(args, cfg: RunConfig) -> dict:
    ledger, labels = _inputs(args)
    out = _out_dir(args)
    addr_rows, path_rows = [], []
    for r in labels:
        ps = None
        for t in range(1, cfg.horizon + 1):
            as_of = cfg.timeline.as_of(r.first_seen_time, t)
            addr_rows.append((r.address, t, address_features(ledger, r.address, as_of)))
            ps = build_path_set(ledger, r.address, as_of, cfg.trace) if ps is None else extend_path_set(ps, ledger, as_of)
        for n, p in enumerate(ps.backward + ps.forward):
            for pos, row in enumerate(uniform_path(ledger, p, cfg.lu)):
                path_rows.append((f"{r.address}/{p.direction}/{n}", pos, row))
    outputs = {"address_features": out / "address_features.csv", "path_features": out / "path_features.csv"}
    dump_feature_rows(addr_rows, ADDRESS_FEATURES, outputs["address_features"])
    dump_feature_rows(path_rows, TX_FEATURES, outputs["path_features"])
    write_manifest(out, "features", cfg, outputs)
    return outputs


def _per_step_chart(report, path: Path) -> None:
    line_chart(path, {"F1": [r[3] for r in report.per_step]}, "timestep", "F1", "Per-timestep F1")


def cmd_train(args, cfg: RunConfig) -> dict:
    ledger, labels = _inputs(args)
    out = _out_dir(args)
    model_cfg = cfg.model
    samples = build_samples(ledger, labels, model_cfg, cfg.trace, cfg.timeline)
    result = train(samples, model_cfg, cfg.training)
    test = [samples[i] for i in result.split[2]]
    report = evaluate(result.params, model_cfg, test)
    outputs = {
        "checkpoint": out / "checkpoint.json",
        "train_log": out / "train_log.csv",
        "test_metrics": out / "test_metrics.csv",
    }
    split = {name: [samples[i].address for i in idx] for name, idx in zip(("train", "val", "test"), result.split)}
    val_rates = predict_rates(result.params, model_cfg, [samples[i] for i in result.split[1]])
    tau = calibrate_tau(val_rates, [samples[i].label for i in result.split[1]])
    save_checkpoint(result, model_cfg, cfg.training, outputs["checkpoint"], {"split": split, "calibrated_tau": tau, "trace": asdict(cfg.trace)})
    write_history(result.history, outputs["train_log"])
    dump_report(report, outputs["test_metrics"])
    if args.plot:
        outputs["plot"] = out / "test_f1.svg"
        _per_step_chart(report, outputs["plot"])
    write_manifest(out, "train", cfg, outputs, {
        "parameters": count_params(result.params),
        "best_epoch": result.best_epoch,
        "calibrated_tau": tau,
        "test": {"final_f1": report.final_f1, "f1_early": report.f1_early, "f1_consistent": report.f1_consistent},
    })
    return outputs


def _checkpoint_inputs(args, cfg: RunConfig):
    params, model_cfg, scalers, meta = load_checkpoint(args.checkpoint)
    ledger, labels = _inputs(args)
    if args.split != "all":
        keep = set(meta.get("split", {}).get(args.split, []))
        if not keep:
            raise LedgerError(f"checkpoint has no '{args.split}' split")
        labels = [r for r in labels if r.address in keep]
    if not labels:
        raise LedgerError("no labelled addresses to score")
    return params, model_cfg, scalers, meta, ledger, labels


def cmd_eval(args, cfg: RunConfig) -> dict:
    params, model_cfg, scalers, meta, ledger, labels = _checkpoint_inputs(args, cfg)
    out = _out_dir(args)
    samples = build_samples(ledger, labels, model_cfg, cfg.trace, cfg.timeline)
    scalers.apply(samples)
    report = evaluate_scores(survival_scores(predict_rates(params, model_cfg, samples)), [s.label for s in samples])
    outputs = {"metrics": out / "metrics.csv"}
    dump_report(report, outputs["metrics"])
    if args.plot:
        outputs["plot"] = out / "f1.svg"
        _per_step_chart(report, outputs["plot"])
    write_manifest(out, "eval", cfg, outputs, {"checkpoint": str(args.checkpoint), "addresses": len(samples)})
    return outputs


def _tau(cfg: RunConfig, args, meta: dict) -> float:
    if args.calibrated_tau:
        if "calibrated_tau" not in meta:
            raise LedgerError("checkpoint carries no calibrated tau")
        return float(meta["calibrated_tau"])
    return cfg.tau


def cmd_monitor(args, cfg: RunConfig) -> dict:
    params, model_cfg, scalers, meta, ledger, labels = _checkpoint_inputs(args, cfg)
    out = _out_dir(args)
    tau = _tau(cfg, args, meta)
    wl = open_watchlist(params, model_cfg, scalers, [], tau, cfg.trace, cfg.timeline)
    arrivals = sorted(labels, key=lambda r: (r.first_seen_time, r.address))
    origin = arrivals[0].first_seen_time
    join = {r.address: int((r.first_seen_time - origin) // wl.timeline.interval) if args.stagger else 0 for r in arrivals}
    last = max(join.values()) + cfg.horizon
    reports = []
    for t in range(1, last + 1):
        for r in arrivals:
            if join[r.address] == t - 1:
                wl.add_address(r.address, r.first_seen_time)
        reports.extend(replay(wl, ledger, 1))
    outputs = {"replay": out / "replay.jsonl"}
    with open(outputs["replay"], "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    preds = horizon_predictions(wl)
    truth = {r.address: r.label for r in labels}
    tp = sum(preds[a] == 1 and truth[a] == 1 for a in preds)
    pos = sum(truth.values())
    if args.plot:
        outputs["plot"] = out / "skip_ratio.svg"
        line_chart(outputs["plot"], {f"tau={tau:g}": [r.skip_ratio for r in reports]}, "timestep", "skip ratio", "Skip ratio")
    write_manifest(out, "monitor", cfg, outputs, {
        "tau": tau if math.isfinite(tau) else "inf",
        "status": wl.status_counts(),
        "horizon_recall": tp / pos if pos else None,
        "timings": wl.timings,
    })
    return outputs


def bench_paths(ledger, labels, cfg: RunConfig) -> dict[str, float]:
    """Wall-clock of 24-step path preparation: rebuilding every step vs extending."""
    timings = {}
    start = time.perf_counter()
    for r in labels:
        for t in range(1, cfg.horizon + 1):
            build_path_set(ledger, r.address, cfg.timeline.as_of(r.first_seen_time, t), cfg.trace)
    timings["batch"] = time.perf_counter() - start
    start = time.perf_counter()
    for r in labels:
        ps: PathSet | None = None
        for t in range(1, cfg.horizon + 1):
            as_of = cfg.timeline.as_of(r.first_seen_time, t)
            ps = build_path_set(ledger, r.address, as_of, cfg.trace) if ps is None else extend_path_set(ps, ledger, as_of)
    timings["incremental"] = time.perf_counter() - start
    return timings


def cmd_bench(args, cfg: RunConfig) -> dict:
    ledger, labels = _inputs(args)
    out = _out_dir(args)
    rows = [("paths", k, v, len(labels)) for k, v in bench_paths(ledger, labels, cfg).items()]
    if args.checkpoint:
        params, model_cfg, scalers, _ = load_checkpoint(args.checkpoint)
        wl = open_watchlist(params, model_cfg, scalers, [(r.address, r.first_seen_time) for r in labels], math.inf, cfg.trace, cfg.timeline)
        replay(wl, ledger, cfg.horizon)
        rows += [("monitor", "path_extension", wl.timings["paths"], len(labels)), ("monitor", "model_step", wl.timings["model"], len(labels))]
    outputs = {"timing": out / "bench.csv"}
    with open(outputs["timing"], "w", encoding="utf-8") as fh:
        fh.write("phase,method,seconds,addresses\n")
        for phase, method, secs, n in rows:
            fh.write(f"{phase},{method},{secs:.6f},{n}\n")
    write_manifest(out, "bench", cfg, outputs)
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "paths": cmd_paths,
    "features": cmd_features,
    "train": cmd_train,
    "monitor": cmd_monitor,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--plot", action="store_true", help="also write SVG charts")
    for name in ("theta", "gamma", "tau", "interval-hours", "lr"):
        common.add_argument(f"--{name}", type=float, default=None)
    for name in ("tspan", "lu", "hidden", "heads", "horizon", "seed", "epochs", "patience", "path-cap", "batch-size", "addresses"):
        common.add_argument(f"--{name}", type=int, default=None)
    common.add_argument("--malicious-fraction", type=float, default=None)
    common.add_argument("--variant", choices=("af", "paths", "full"), default=None)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--ledger", required=True)
    data.add_argument("--labels", required=True)
    data.add_argument("--address", action="append", help="restrict to this address (repeatable)")
    data.add_argument("--external-refs", action="store_true", help="allow inputs spending transactions outside the file")

    scored = argparse.ArgumentParser(add_help=False)
    scored.add_argument("--checkpoint", required=True)
    scored.add_argument("--split", choices=("all", "train", "val", "test"), default="all")

    parser = _Parser(prog="pathtracer", description="Early detection of malicious ledger addresses.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a labelled synthetic ledger")
    sub.add_parser("paths", parents=[common, data], help="dump asset-transfer paths and path graphs")
    sub.add_parser("features", parents=[common, data], help="dump address and path feature CSVs")
    sub.add_parser("train", parents=[common, data], help="train a model; writes checkpoint and log")
    mon = sub.add_parser("monitor", parents=[common, data, scored], help="replay the ledger over a watchlist")
    mon.add_argument("--calibrated-tau", action="store_true", help="use the threshold stored in the checkpoint")
    mon.add_argument("--stagger", action="store_true", help="addresses join at their first-seen hour")
    sub.add_parser("eval", parents=[common, data, scored], help="score labelled addresses with a checkpoint")
    bench = sub.add_parser("bench", parents=[common, data], help="time path preparation and model steps")
    bench.add_argument("--checkpoint", help="also time a monitor replay with this model")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(vars(args), args.config)
    except UsageError as exc:
        print(f"pathtracer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"pathtracer: cannot read config: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        outputs = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"pathtracer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LedgerError, ShapeError, ValueError, OSError) as exc:
        print(f"pathtracer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"pathtracer: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    for name, path in outputs.items():
        print(f"{name}: {path}")
    return EXIT_OK
