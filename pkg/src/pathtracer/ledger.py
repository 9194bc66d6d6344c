"""Immutable UTXO-style transaction ledger: loading, validation and indexes."""

from __future__ import annotations

import bisect
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator


class LedgerError(ValueError):
    """Raised when a ledger file or record violates a ledger invariant."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class InputSlot:
    src_tx: str
    addr: str
    amount: int


@dataclass(frozen=True)
class OutputSlot:
    addr: str
    amount: int


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    time: int
    inputs: tuple[InputSlot, ...]
    outputs: tuple[OutputSlot, ...]
    fee: int = 0

    @property
    def is_coinbase(self) -> bool:
        return not self.inputs

    @property
    def total_input(self) -> int:
        return sum(s.amount for s in self.inputs)

    @property
    def total_output(self) -> int:
        return sum(s.amount for s in self.outputs)

    def to_json(self) -> dict:
        return {
            "tx": self.tx_id,
            "time": self.time,
            "inputs": [{"src": s.src_tx, "addr": s.addr, "amount": s.amount} for s in self.inputs],
            "outputs": [{"addr": s.addr, "amount": s.amount} for s in self.outputs],
            "fee": self.fee,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Transaction":
        try:
            inputs = tuple(
                InputSlot(str(i["src"]), str(i["addr"]), _as_int(i["amount"])) for i in obj.get("inputs", [])
            )
            outputs = tuple(OutputSlot(str(o["addr"]), _as_int(o["amount"])) for o in obj["outputs"])
            return cls(str(obj["tx"]), _as_int(obj["time"]), inputs, outputs, _as_int(obj.get("fee", 0)))
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed transaction record: {exc!r}") from exc


def _as_int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise LedgerError(f"expected integer, got {value!r}")
    return value


def check_transaction(tx: Transaction) -> None:
    """Check the record-local invariants of a single transaction."""
    if not tx.outputs:
        raise LedgerError(f"{tx.tx_id}: transaction has no outputs")
    for slot in (*tx.inputs, *tx.outputs):
        if slot.amount <= 0:
            raise LedgerError(f"{tx.tx_id}: non-positive slot amount {slot.amount}")
    if tx.is_coinbase:
        if tx.fee != 0:
            raise LedgerError(f"{tx.tx_id}: coinbase-like transaction must have fee 0")
        return
    if tx.fee < 0:
        raise LedgerError(f"{tx.tx_id}: negative fee")
    if tx.total_input != tx.total_output + tx.fee:
        raise LedgerError(
            f"{tx.tx_id}: conservation violated, inputs {tx.total_input} != outputs {tx.total_output} + fee {tx.fee}"
        )


@dataclass
class Ledger:
    """Time-ordered transactions plus address and spender indexes.

    Transactions are ordered by ``(time, tx_id)``. ``by_address`` maps an
    address to ``(spend_ids, receive_ids)``; ``spenders`` maps a transaction to
    the later transactions consuming its outputs.
    """

    transactions: dict[str, Transaction]
    order: list[str] = field(repr=False)
    by_address: dict[str, tuple[list[str], list[str]]] = field(repr=False)
    spenders: dict[str, list[str]] = field(repr=False)
    times: list[int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[Transaction]:
        return (self.transactions[t] for t in self.order)

    def __contains__(self, tx_id: object) -> bool:
        return tx_id in self.transactions

    def __getitem__(self, tx_id: str) -> Transaction:
        return self.transactions[tx_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ledger):
            return NotImplemented
        return self.order == other.order and self.transactions == other.transactions

    @classmethod
    def from_transactions(cls, txs: Iterable[Transaction], external_refs: bool = False) -> "Ledger":
        """Validate and index transactions.

        With ``external_refs`` an input may name a transaction absent from the
        ledger (history before the slice); tracing stops at such inputs.
        """
        transactions: dict[str, Transaction] = {}
        for tx in txs:
            if tx.tx_id in transactions:
                raise LedgerError(f"duplicate transaction id {tx.tx_id}")
            check_transaction(tx)
            transactions[tx.tx_id] = tx
        order = sorted(transactions, key=lambda t: (transactions[t].time, t))

        spent_from: dict[str, int] = {}
        spenders: dict[str, list[str]] = {}
        by_address: dict[str, tuple[list[str], list[str]]] = {}
        for tx_id in order:
            tx = transactions[tx_id]
            seen_src: set[str] = set()
            for slot in tx.inputs:
                src = transactions.get(slot.src_tx)
                if src is None:
                    if not external_refs:
                        raise LedgerError(f"{tx_id}: dangling input reference {slot.src_tx}")
                    continue
                if src.time >= tx.time:
                    raise LedgerError(f"{tx_id}: input {slot.src_tx} is not strictly earlier")
                spent_from[slot.src_tx] = spent_from.get(slot.src_tx, 0) + slot.amount
                if slot.src_tx not in seen_src:
                    seen_src.add(slot.src_tx)
                    spenders.setdefault(slot.src_tx, []).append(tx_id)
            for addr in dict.fromkeys(s.addr for s in tx.inputs):
                by_address.setdefault(addr, ([], []))[0].append(tx_id)
            for addr in dict.fromkeys(s.addr for s in tx.outputs):
                by_address.setdefault(addr, ([], []))[1].append(tx_id)
        for src, amount in spent_from.items():
            if amount > transactions[src].total_output:
                raise LedgerError(f"{src}: outputs overspent ({amount} > {transactions[src].total_output})")
        times = [transactions[t].time for t in order]
        return cls(transactions, order, by_address, spenders, times)

    def time_of(self, tx_id: str) -> int:
        return self.transactions[tx_id].time

    def addresses(self) -> list[str]:
        return sorted(self.by_address)


def txs_of_address(ledger: Ledger, addr: str, until_time: int) -> tuple[list[str], list[str]]:
    """Spend and receive transaction ids of ``addr`` with time <= ``until_time``."""
    spend, receive = ledger.by_address.get(addr, ([], []))
    return _until(ledger, spend, until_time), _until(ledger, receive, until_time)


def _until(ledger: Ledger, tx_ids: list[str], until_time: int) -> list[str]:
    k = bisect.bisect_right(tx_ids, until_time, key=ledger.time_of)
    return tx_ids[:k]


def tx_window(ledger: Ledger, from_time: int, to_time: int) -> list[str]:
    """Transactions with ``from_time <= time < to_time`` in ledger order."""
    if from_time > to_time:
        raise ValueError(f"inverted window [{from_time}, {to_time})")
    lo = bisect.bisect_left(ledger.times, from_time)
    hi = bisect.bisect_left(ledger.times, to_time)
    return ledger.order[lo:hi]


def spenders_between(ledger: Ledger, tx_id: str, after: int, until: int) -> list[str]:
    """Transactions spending ``tx_id`` with ``after < time <= until``."""
    ids = ledger.spenders.get(tx_id, [])
    lo = bisect.bisect_right(ids, after, key=ledger.time_of)
    hi = bisect.bisect_right(ids, until, key=ledger.time_of)
    return ids[lo:hi]


def load_ledger(path: str | Path, external_refs: bool = False) -> Ledger:
    """Load a JSON Lines ledger file, one transaction per line."""
    txs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                txs.append(Transaction.from_json(obj))
            except json.JSONDecodeError as exc:
                raise LedgerError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            except LedgerError as exc:
                raise LedgerError(str(exc), line=lineno) from exc
    return Ledger.from_transactions(txs, external_refs=external_refs)


def dump_ledger(ledger: Ledger, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tx in ledger:
            fh.write(json.dumps(tx.to_json(), separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class LabelRecord:
    address: str
    label: int
    first_seen_time: int


def load_labels(path: str | Path) -> list[LabelRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            label = int(row["label"])
            if label not in (0, 1):
                raise LedgerError(f"label must be 0 or 1, got {label} for {row['address']}")
            records.append(LabelRecord(row["address"], label, int(row["first_seen_time"])))
    return records


def dump_labels(records: Iterable[LabelRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["address", "label", "first_seen_time"])
        for r in records:
            writer.writerow([r.address, r.label, r.first_seen_time])
