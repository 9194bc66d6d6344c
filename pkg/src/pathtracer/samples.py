"""Per-address training samples: time-stepped features, path banks and batching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import (
    ADDRESS_HEAVY,
    D_ADDR,
    D_TX,
    TX_HEAVY,
    FeatureScaler,
    address_features,
    uniform_path,
)
from .graphs import build_path_graph, component_features
from .ledger import LabelRecord, Ledger
from .model import BranchInputs, ModelConfig, StepInputs
from .pathfind import AssetTransferPath, PathSet, TraceParams, build_path_set, extend_path_set


@dataclass(frozen=True)
class Timeline:
    """Maps address-relative steps to ledger times: step ``t`` sees ``first_seen + t * interval``."""

    interval: int = 3600
    horizon: int = 24

    def __post_init__(self):
        if self.interval <= 0 or self.horizon <= 0:
            raise ValueError("interval and horizon must be positive")

    def as_of(self, first_seen: int, t: int) -> int:
        return first_seen + t * self.interval


@dataclass
class BranchStep:
    bank_idx: np.ndarray  # indices into the sample's path bank
    comp: np.ndarray  # component index of every path
    comp_feat: np.ndarray  # (C, d_n) raw binding-address features


@dataclass
class Sample:
    address: str
    label: int
    first_seen: int
    addr_feat: np.ndarray  # (T, d_n) raw
    bank: np.ndarray  # (P, L_u, d_tx) raw uniform paths
    backward: list[BranchStep]
    forward: list[BranchStep]
    scaled: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return self.addr_feat.shape[0]

    def path_counts(self) -> tuple[int, int]:
        return (max(len(b.bank_idx) for b in self.backward), max(len(f.bank_idx) for f in self.forward))


def cap_paths(paths: tuple[AssetTransferPath, ...], cap: int) -> tuple[AssetTransferPath, ...]:
    """Keep at most ``cap`` paths, preferring higher terminal scores; order is preserved."""
    if len(paths) <= cap:
        return paths
    ranked = sorted(range(len(paths)), key=lambda i: (-paths[i].terminal_score, i))[:cap]
    return tuple(paths[i] for i in sorted(ranked))


class PathBank:
    def __init__(self, ledger: Ledger, l_u: int):
        self.ledger, self.l_u = ledger, l_u
        self.index: dict[tuple, int] = {}
        self.rows: list[np.ndarray] = []

    def add(self, p: AssetTransferPath) -> int:
        key = (p.direction, p.anchor_tx, p.tx_ids)
        k = self.index.get(key)
        if k is None:
            k = self.index[key] = len(self.rows)
            self.rows.append(uniform_path(self.ledger, p, self.l_u))
        return k

    def array(self) -> np.ndarray:
        return np.stack(self.rows) if self.rows else np.zeros((0, self.l_u, D_TX))


def branch_step(ledger: Ledger, bank: PathBank, paths, direction: str, t_abs: int) -> BranchStep:
    if not paths:
        return BranchStep(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, D_ADDR)))
    graph = build_path_graph(paths, direction)
    return BranchStep(
        np.array([bank.add(p) for p in paths], dtype=int),
        np.array(graph.component_of(), dtype=int),
        component_features(graph, ledger, t_abs),
    )


def build_sample(
    ledger: Ledger, record: LabelRecord, cfg: ModelConfig, trace: TraceParams = TraceParams(),
    timeline: Timeline = Timeline(),
) -> Sample:
    """Trace one address step by step, reusing its path set between steps."""
    bank = PathBank(ledger, cfg.l_u)
    feats, bks, fws = [], [], []
    pset: PathSet | None = None
    for t in range(1, timeline.horizon + 1):
        as_of = timeline.as_of(record.first_seen_time, t)
        pset = build_path_set(ledger, record.address, as_of, trace) if pset is None else extend_path_set(pset, ledger, as_of)
        feats.append(address_features(ledger, record.address, as_of))
        bks.append(branch_step(ledger, bank, cap_paths(pset.backward, cfg.path_cap), "backward", as_of))
        fws.append(branch_step(ledger, bank, cap_paths(pset.forward, cfg.path_cap), "forward", as_of))
    return Sample(record.address, record.label, record.first_seen_time, np.stack(feats), bank.array(), bks, fws)


def build_samples(ledger: Ledger, records, cfg: ModelConfig, trace: TraceParams = TraceParams(), timeline: Timeline = Timeline()) -> list[Sample]:
    return [build_sample(ledger, r, cfg, trace, timeline) for r in records]


@dataclass
class Scalers:
    address: FeatureScaler
    tx: FeatureScaler

    @classmethod
    def fit(cls, samples: list[Sample]) -> "Scalers":
        addr_rows = np.concatenate([s.addr_feat for s in samples])
        comp_rows = [b.comp_feat for s in samples for b in (*s.backward, *s.forward) if len(b.comp_feat)]
        if comp_rows:
            addr_rows = np.concatenate([addr_rows, *comp_rows])
        tx_rows = [s.bank.reshape(-1, D_TX) for s in samples if len(s.bank)]
        tx = np.concatenate(tx_rows) if tx_rows else np.zeros((1, D_TX))
        return cls(FeatureScaler.fit(addr_rows, ADDRESS_HEAVY), FeatureScaler.fit(tx, TX_HEAVY))

    def apply(self, samples: list[Sample]) -> None:
        """Cache scaled copies on every sample (raw arrays stay untouched)."""
        for s in samples:
            s.scaled = {
                "addr": self.address.transform(s.addr_feat),
                "bank": self.tx.transform(s.bank) if len(s.bank) else s.bank,
                "backward": [self.address.transform(b.comp_feat) if len(b.comp_feat) else b.comp_feat for b in s.backward],
                "forward": [self.address.transform(b.comp_feat) if len(b.comp_feat) else b.comp_feat for b in s.forward],
            }

    def to_json(self) -> dict:
        return {"address": self.address.to_json(), "tx": self.tx.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "Scalers":
        return cls(FeatureScaler.from_json(obj["address"]), FeatureScaler.from_json(obj["tx"]))


@dataclass
class BranchRecord:
    """Scaled inputs of one direction for one address at one step."""

    paths: np.ndarray  # (k, L_u, d_tx)
    comp: np.ndarray  # (k,)
    comp_feat: np.ndarray  # (C, d_n)


@dataclass
class StepRecord:
    address: np.ndarray  # (d_n,)
    backward: BranchRecord
    forward: BranchRecord


def sample_record(s: Sample, t: int) -> StepRecord:
    """Scaled inputs of sample ``s`` at zero-based step ``t``."""
    def branch(side: str) -> BranchRecord:
        step = getattr(s, side)[t]
        return BranchRecord(s.scaled["bank"][step.bank_idx], step.comp, s.scaled[side][t])

    return StepRecord(s.scaled["addr"][t], branch("backward"), branch("forward"))


def _collate_branch(records: list[BranchRecord], cfg: ModelConfig) -> BranchInputs:
    batch = len(records)
    n = max([1] + [len(r.comp) for r in records])
    c = max([1] + [len(r.comp_feat) for r in records])
    out = BranchInputs(
        np.zeros((batch, n, cfg.l_u, cfg.d_tx)),
        np.zeros((batch, n)),
        np.zeros((batch, n, c)),
        np.zeros((batch, c)),
        np.zeros((batch, c, cfg.d_n)),
    )
    for b, r in enumerate(records):
        k = len(r.comp)
        if k == 0:
            continue
        n_comp = len(r.comp_feat)
        out.paths[b, :k] = r.paths
        out.mask[b, :k] = 1.0
        out.members[b, np.arange(k), r.comp] = 1.0
        out.comp_size[b, :n_comp] = np.bincount(r.comp, minlength=n_comp)
        out.comp_feat[b, :n_comp] = r.comp_feat
    return out


def collate_records(records: list[StepRecord], cfg: ModelConfig) -> StepInputs:
    address = np.stack([r.address for r in records])
    if not cfg.use_paths:
        empty = BranchInputs.empty(len(records), cfg)
        return StepInputs(address, empty, empty)
    return StepInputs(
        address,
        _collate_branch([r.backward for r in records], cfg),
        _collate_branch([r.forward for r in records], cfg),
    )


def collate(samples: list[Sample], cfg: ModelConfig) -> list[StepInputs]:
    """Padded per-timestep inputs for a batch of scaled samples."""
    if any(not s.scaled for s in samples):
        raise ValueError("samples must be scaled before collation")
    return [collate_records([sample_record(s, t) for s in samples], cfg) for t in range(samples[0].horizon)]


def bucket_batches(samples: list[Sample], indices: list[int], batch_size: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Split ``indices`` into batches of similar path counts to limit padding.

    With ``rng`` the indices are shuffled first (ties in path count then fall
    in random order) and the batch order is shuffled too.
    """
    order = list(indices)
    if rng is not None:
        rng.shuffle(order)
    order.sort(key=lambda i: sum(samples[i].path_counts()))
    batches = [order[k : k + batch_size] for k in range(0, len(order), batch_size)]
    if rng is not None:
        rng.shuffle(batches)
    return batches
