"""Address and transaction feature vectors, and uniform path resampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ledger import Ledger, txs_of_address
from .pathfind import AssetTransferPath

ADDRESS_FEATURES = (
    "balance",
    "n_receive",
    "n_spend",
    "receive_ratio",
    "spend_ratio",
    "max_receive_amount",
    "max_spend_amount",
    "life_span_hours",
    "active_rate",
)

TX_FEATURES = (
    "hop_to_terminal",
    "score",
    "prev_input_amount",
    "fee",
    "recv_total",
    "recv_max",
    "recv_min",
    "recv_avg",
    "recv_var",
    "spend_total",
    "spend_max",
    "spend_min",
    "spend_avg",
    "spend_var",
    "n_receive",
    "n_spend",
)

D_ADDR = len(ADDRESS_FEATURES)
D_TX = len(TX_FEATURES)

# columns holding amounts or counts; these are log-compressed before z-scoring
ADDRESS_HEAVY = (0, 1, 2, 5, 6, 7)
TX_HEAVY = (0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15)


def _received(ledger: Ledger, tx_id: str, addr: str) -> int:
    return sum(o.amount for o in ledger[tx_id].outputs if o.addr == addr)


def _spent(ledger: Ledger, tx_id: str, addr: str) -> int:
    return sum(i.amount for i in ledger[tx_id].inputs if i.addr == addr)


def address_features(ledger: Ledger, addr: str, t: int) -> np.ndarray:
    """Feature vector of ``addr`` over its transactions with time <= ``t``.

    Active rate is the number of distinct one-hour buckets (counted from the
    first transaction) holding a transaction, divided by the life span in
    hours floored at one, capped at 1.
    """
    spend, receive = txs_of_address(ledger, addr, t)
    n_r, n_s = len(receive), len(spend)
    if n_r + n_s == 0:
        return np.zeros(D_ADDR)
    recv = [_received(ledger, x, addr) for x in receive]
    sent = [_spent(ledger, x, addr) for x in spend]
    times = [ledger.time_of(x) for x in receive] + [ledger.time_of(x) for x in spend]
    first = min(times)
    life = (t - first) / 3600.0
    buckets = {(x - first) // 3600 for x in times}
    active = min(1.0, len(buckets) / max(1.0, life))
    n = n_r + n_s
    return np.array(
        [
            sum(recv) - sum(sent),
            n_r,
            n_s,
            n_r / n,
            n_s / n,
            max(recv, default=0),
            max(sent, default=0),
            life,
            active,
        ],
        dtype=float,
    )


def _stats(values: list[int]) -> list[float]:
    if not values:
        return [0.0] * 5
    a = np.asarray(values, dtype=float)
    return [a.sum(), a.max(), a.min(), a.mean(), a.var()]


def _tx_static(ledger: Ledger, tx_id: str) -> np.ndarray:
    """Position-independent part of the transaction features (columns 3..15)."""
    cache = ledger.__dict__.setdefault("_txfeat_cache", {})
    row = cache.get(tx_id)
    if row is None:
        tx = ledger[tx_id]
        ins = [s.amount for s in tx.inputs]
        outs = [s.amount for s in tx.outputs]
        row = np.array([tx.fee, *_stats(ins), *_stats(outs), len(ins), len(outs)], dtype=float)
        cache[tx_id] = row
    return row


def tx_features(ledger: Ledger, path: AssetTransferPath, node_index: int, t: int | None = None) -> np.ndarray:
    """Feature vector of one node of ``path``.

    Receive amounts are the transaction's input slot amounts, spend amounts
    its output slot amounts. The previous transaction is the node preceding
    this one in the path's node order (zero for the first node). The values
    do not depend on ``t`` because a transaction never changes once mined.
    """
    n = len(path.nodes)
    if not 0 <= node_index < n:
        raise IndexError(f"node index {node_index} out of range for path of length {n}")
    tx_id, score = path.nodes[node_index]
    hop = node_index if path.direction == "backward" else n - 1 - node_index
    prev_in = ledger[path.nodes[node_index - 1][0]].total_input if node_index > 0 else 0
    return np.concatenate([[hop, score, prev_in], _tx_static(ledger, tx_id)])


def path_features(ledger: Ledger, path: AssetTransferPath, t: int | None = None) -> np.ndarray:
    """``(len(path), D_TX)`` matrix of node features in path order."""
    return np.stack([tx_features(ledger, path, i, t) for i in range(len(path.nodes))])


def resample_windows(l_ori: int, l_u: int) -> list[tuple[int, int]]:
    """Half-open source index windows for each of the ``l_u`` output nodes."""
    if l_ori < 1 or l_u < 1:
        raise ValueError("path lengths must be positive")
    # floor(i * l_ori / l_u) .. ceil((i + 1) * l_ori / l_u) - 1, in integer arithmetic
    return [((i * l_ori) // l_u, -((-(i + 1) * l_ori) // l_u)) for i in range(l_u)]


def uniform_resample(seq: np.ndarray, l_u: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("expected a non-empty (length, features) sequence")
    return np.stack([seq[a:b].mean(axis=0) for a, b in resample_windows(seq.shape[0], l_u)])


def uniform_path(ledger: Ledger, path: AssetTransferPath, l_u: int) -> np.ndarray:
    return uniform_resample(path_features(ledger, path), l_u)


@dataclass
class FeatureScaler:
    """Signed-log compression of heavy-tailed columns followed by a z-score."""

    mean: np.ndarray
    std: np.ndarray
    heavy: tuple[int, ...]

    @classmethod
    def fit(cls, rows: np.ndarray, heavy: tuple[int, ...]) -> "FeatureScaler":
        rows = np.asarray(rows, dtype=float)
        z = _compress(rows, heavy)
        std = z.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(z.mean(axis=0), std, tuple(heavy))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (_compress(np.asarray(x, dtype=float), self.heavy) - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "heavy": list(self.heavy)}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureScaler":
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["std"], dtype=float), tuple(obj["heavy"]))


def _compress(x: np.ndarray, heavy: tuple[int, ...]) -> np.ndarray:
    x = x.copy()
    cols = list(heavy)
    x[..., cols] = np.sign(x[..., cols]) * np.log1p(np.abs(x[..., cols]))
    return x


def dump_feature_rows(rows: list[tuple[str, int, np.ndarray]], names: tuple[str, ...], path: str | Path) -> None:
    """Write ``(key, timestep, vector)`` rows as CSV with the fixed feature order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", "t", *names])
        for key, t, vec in rows:
            writer.writerow([key, t, *(repr(float(v)) for v in vec)])
