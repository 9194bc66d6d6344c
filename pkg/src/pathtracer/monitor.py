"""Step-by-step replay of a ledger over a watchlist of addresses.

Each address runs on its own clock: at global step ``t`` an address that
joined at step ``j`` is at local step ``k = t - j`` and sees the ledger up
to ``first_seen + k * interval``. Path sets are extended rather than rebuilt,
and path graphs are rebuilt only when an address's path list changed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import address_features
from .graphs import PathGraph, build_path_graph, component_features
from .ledger import Ledger
from .model import ModelConfig, ModelState, forward_step, stack_states, unstack_states
from .numerics import Tensor
from .pathfind import PathSet, TraceParams, build_path_set, extend_path_set
from .samples import BranchRecord, PathBank, Scalers, StepRecord, Timeline, cap_paths, collate_records

ACTIVE = "active"
REMOVED = "removed_benevolent"
FLAGGED = "flagged_malicious"
FLAG_STREAK = 2
DEFAULT_TAU = 2.5


@dataclass
class _Branch:
    """Path list of one direction and its graph, kept until the list changes."""

    paths: tuple = ()
    bank_idx: np.ndarray | None = None
    comp: np.ndarray | None = None
    graph: PathGraph | None = None


@dataclass
class Entry:
    address: str
    first_seen: int
    join_step: int
    state: ModelState
    bank: PathBank
    paths: PathSet | None = None
    rates: list[np.ndarray] = field(default_factory=list)
    status: str = ACTIVE
    streak: int = 0
    branches: dict = field(default_factory=lambda: {"backward": _Branch(), "forward": _Branch()})

    @property
    def cumulative(self) -> float:
        return float(np.sum(self.rates)) if self.rates else 0.0

    @property
    def survival(self) -> float:
        return math.exp(-max(self.cumulative, 0.0))


@dataclass
class StepReport:
    t: int
    active: int
    removed: list[str]
    flagged: list[str]
    skip_ratio: float
    scores: dict[str, float]

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "active": self.active,
            "removed": self.removed,
            "flagged": self.flagged,
            "skip_ratio": self.skip_ratio,
            "scores": self.scores,
        }


@dataclass
class Watchlist:
    params: dict[str, Tensor]
    cfg: ModelConfig
    scalers: Scalers
    tau: float
    trace: TraceParams
    timeline: Timeline
    entries: dict[str, Entry] = field(default_factory=dict)
    t: int = 0
    timings: dict[str, float] = field(default_factory=lambda: {"paths": 0.0, "model": 0.0})

    def add_address(self, address: str, first_seen: int) -> None:
        """Start monitoring ``address`` from the current step with zero state."""
        if address in self.entries:
            raise ValueError(f"address {address} already monitored")
        self.entries[address] = Entry(address, first_seen, self.t, ModelState.zeros(self.cfg), PathBank(None, self.cfg.l_u))

    def status_counts(self) -> dict[str, int]:
        out = {ACTIVE: 0, REMOVED: 0, FLAGGED: 0}
        for e in self.entries.values():
            out[e.status] += 1
        return out


def open_watchlist(
    params: dict[str, Tensor], cfg: ModelConfig, scalers: Scalers, addresses, tau: float = DEFAULT_TAU,
    trace: TraceParams = TraceParams(), timeline: Timeline = Timeline(),
) -> Watchlist:
    """``addresses`` holds ``(address, first_seen)`` pairs; ``tau=inf`` disables removal."""
    if not (tau > 0):
        raise ValueError("tau must be positive (or infinite to disable early stop)")
    wl = Watchlist(params, cfg, scalers, tau, trace, timeline)
    for address, first_seen in addresses:
        wl.add_address(address, first_seen)
    return wl


def _branch_record(wl: Watchlist, e: Entry, ledger: Ledger, side: str, as_of: int) -> BranchRecord:
    paths = cap_paths(getattr(e.paths, side), wl.cfg.path_cap)
    cached = e.branches[side]
    if cached.bank_idx is None or paths is not cached.paths:
        cached = e.branches[side] = _Branch(paths, np.zeros(0, dtype=int), np.zeros(0, dtype=int))
        if paths:
            cached.graph = build_path_graph(paths, side)
            cached.bank_idx = np.array([e.bank.add(p) for p in paths], dtype=int)
            cached.comp = np.array(cached.graph.component_of(), dtype=int)
    if cached.graph is None:
        return BranchRecord(np.zeros((0, wl.cfg.l_u, wl.cfg.d_tx)), cached.comp, np.zeros((0, wl.cfg.d_n)))
    comp_raw = component_features(cached.graph, ledger, as_of)
    bank = wl.scalers.tx.transform(np.stack([e.bank.rows[i] for i in cached.bank_idx]))
    return BranchRecord(bank, cached.comp, wl.scalers.address.transform(comp_raw))


def advance(wl: Watchlist, ledger: Ledger, t: int) -> StepReport:
    """Score every monitored address that is still within its horizon."""
    if t != wl.t + 1:
        raise ValueError(f"timestep gap: watchlist at {wl.t}, asked for {t}")
    wl.t = t
    live = []
    start = time.perf_counter()
    records = []
    for address in sorted(wl.entries):
        e = wl.entries[address]
        k = t - e.join_step
        if e.status == REMOVED or not 1 <= k <= wl.timeline.horizon:
            continue
        as_of = wl.timeline.as_of(e.first_seen, k)
        e.bank.ledger = ledger
        e.paths = build_path_set(ledger, address, as_of, wl.trace) if e.paths is None else extend_path_set(e.paths, ledger, as_of)
        records.append(
            StepRecord(
                wl.scalers.address.transform(address_features(ledger, address, as_of)),
                _branch_record(wl, e, ledger, "backward", as_of),
                _branch_record(wl, e, ledger, "forward", as_of),
            )
        )
        live.append(e)
    wl.timings["paths"] += time.perf_counter() - start

    start = time.perf_counter()
    removed, flagged, scores = [], [], {}
    if live:
        hidden, cells = stack_states([e.state for e in live])
        hidden, cells, lam = forward_step(wl.params, wl.cfg, hidden, cells, collate_records(records, wl.cfg))
        for e, state, rates in zip(live, unstack_states(hidden, cells, 0), lam.value):
            state.t = e.state.t + 1
            e.state = state
            e.rates.append(rates)
            scores[e.address] = e.survival
            e.streak = e.streak + 1 if e.survival >= 0.5 else 0
            if e.status == ACTIVE and e.streak >= FLAG_STREAK:
                e.status = FLAGGED
                flagged.append(e.address)
            elif e.status == ACTIVE and e.cumulative >= wl.tau:
                e.status = REMOVED
                removed.append(e.address)
    wl.timings["model"] += time.perf_counter() - start
    return StepReport(t, len(live), removed, flagged, skip_ratio(wl), scores)


def skip_ratio(wl: Watchlist) -> float:
    if not wl.entries:
        return 0.0
    return sum(e.status == REMOVED for e in wl.entries.values()) / len(wl.entries)


def replay(wl: Watchlist, ledger: Ledger, steps: int, out: str | Path | None = None) -> list[StepReport]:
    """Advance ``steps`` times; optionally write one JSON line per step."""
    reports = [advance(wl, ledger, wl.t + 1) for _ in range(steps)]
    if out is not None:
        with open(out, "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return reports


def horizon_predictions(wl: Watchlist) -> dict[str, int]:
    """Final hard label per address: removed addresses count as benign."""
    out = {}
    for a, e in wl.entries.items():
        out[a] = 0 if e.status == REMOVED or not e.rates else int(e.survival >= 0.5)
    return out


def calibrate_tau(rates: np.ndarray, labels, margin: float = 0.25, floor: float = 0.5) -> float:
    """Smallest threshold no positive sample's running total ever reaches, plus ``margin``.

    ``rates`` is ``(samples, T, 5)``; the result is at least ``floor``.
    """
    labels = np.asarray(labels, dtype=int)
    cum = np.cumsum(np.asarray(rates).sum(axis=-1), axis=-1)
    pos = cum[labels == 1]
    peak = float(pos.max()) if pos.size else floor
    return max(floor, peak + margin)
