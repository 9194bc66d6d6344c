import json

import numpy as np
import pytest

from ledgers import random_ledger, tx
from pathtracer.ledger import (
    LabelRecord, Ledger, LedgerError, dump_labels, dump_ledger, load_labels, load_ledger, tx_window, txs_of_address,
)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_conserving_transaction_loads(tmp_path):
    f = tmp_path / "l.jsonl"
    write_lines(f, [
        {"tx": "t0", "time": 0, "inputs": [], "outputs": [{"addr": "a1", "amount": 100}], "fee": 0},
        {"tx": "t1", "time": 5, "inputs": [{"src": "t0", "addr": "a1", "amount": 100}], "outputs": [{"addr": "a2", "amount": 90}], "fee": 10},
    ])
    assert len(load_ledger(f)) == 2


def test_single_transaction_with_external_source(tmp_path):
    f = tmp_path / "l.jsonl"
    write_lines(f, [{"tx": "t1", "time": 1610000000, "inputs": [{"src": "t0", "addr": "a1", "amount": 100}],
                     "outputs": [{"addr": "a2", "amount": 90}], "fee": 10}])
    assert len(load_ledger(f, external_refs=True)) == 1
    with pytest.raises(LedgerError, match="dangling"):
        load_ledger(f)


def test_conservation_violation_rejected(tmp_path):
    f = tmp_path / "l.jsonl"
    write_lines(f, [{"tx": "t1", "time": 1, "inputs": [{"src": "t0", "addr": "a1", "amount": 100}],
                     "outputs": [{"addr": "a2", "amount": 95}], "fee": 10}])
    with pytest.raises(LedgerError):
        load_ledger(f, external_refs=True)


def test_parse_error_reports_line(tmp_path):
    f = tmp_path / "l.jsonl"
    f.write_text('{"tx": "t0", "time": 0, "outputs": [{"addr": "a", "amount": 1}]}\n{not json\n')
    with pytest.raises(LedgerError, match="line 2"):
        load_ledger(f)


def test_provenance_must_be_strictly_earlier():
    with pytest.raises(LedgerError, match="earlier"):
        Ledger.from_transactions([tx("t0", 5, (), [("a", 10)]), tx("t1", 5, [("t0", "a", 10)], [("b", 10)])])


def test_overspend_rejected():
    with pytest.raises(LedgerError, match="overspent"):
        Ledger.from_transactions([
            tx("t0", 0, (), [("a", 10)]),
            tx("t1", 1, [("t0", "a", 10)], [("b", 10)]),
            tx("t2", 2, [("t0", "a", 10)], [("c", 10)]),
        ])


def test_coinbase_needs_zero_fee():
    with pytest.raises(LedgerError):
        Ledger.from_transactions([tx("t0", 0, (), [("a", 10)], fee=3)])


def test_txs_of_address_cases():
    ledger = Ledger.from_transactions([tx("t1", 10, (), [("a", 50)]), tx("t2", 20, [("t1", "a", 50)], [("b", 50)])])
    assert txs_of_address(ledger, "zz", 100) == ([], [])
    assert txs_of_address(ledger, "b", 100) == ([], ["t2"])
    assert txs_of_address(ledger, "a", 15) == ([], ["t1"])
    assert txs_of_address(ledger, "a", 20) == (["t2"], ["t1"])


def test_tx_window_half_open():
    ledger = Ledger.from_transactions([tx(f"t{i}", 10 * i, (), [("a", 1)]) for i in range(3)])
    assert tx_window(ledger, 5, 5) == []
    assert tx_window(ledger, 0, 100) == ["t0", "t1", "t2"]
    assert tx_window(ledger, 0, 20) == ["t0", "t1"]
    with pytest.raises(ValueError):
        tx_window(ledger, 3, 1)


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(tmp_path, seed):
    ledger = random_ledger(np.random.default_rng(seed), 40)
    dump_ledger(ledger, tmp_path / "l.jsonl")
    assert load_ledger(tmp_path / "l.jsonl") == ledger


@pytest.mark.parametrize("seed", range(5))
def test_address_index_matches_scan(seed):
    ledger = random_ledger(np.random.default_rng(seed), 200)
    for addr in ledger.addresses():
        spend = [t.tx_id for t in ledger if any(i.addr == addr for i in t.inputs)]
        receive = [t.tx_id for t in ledger if any(o.addr == addr for o in t.outputs)]
        assert txs_of_address(ledger, addr, 10**12) == (spend, receive)


def test_labels_round_trip(tmp_path):
    records = [LabelRecord("a", 1, 100), LabelRecord("b", 0, 50)]
    dump_labels(records, tmp_path / "labels.csv")
    assert load_labels(tmp_path / "labels.csv") == records
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "address,label,first_seen_time"
