"""Independent reference implementations used to freeze expected values.

The path oracle works on raw transaction records with exact rationals and
brute-force scans (no indexes); the GCN oracle builds the dense per-channel
normalized adjacency explicitly.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def _raw(ledger):
    return {t.tx_id: t for t in ledger}


def oracle_backward(ledger, anchor: str, theta: Fraction, t_span: int) -> set[tuple]:
    """Every maximal ancestor chain whose running share product stays >= theta."""
    txs = _raw(ledger)
    earliest = txs[anchor].time - t_span
    found = set()

    def walk(chain: list[tuple[str, Fraction]]):
        cur, score = chain[-1]
        total = sum(i.amount for i in txs[cur].inputs)
        grown = False
        for src in sorted({i.src_tx for i in txs[cur].inputs}):
            if src not in txs or any(src == c for c, _ in chain):
                continue
            share = Fraction(sum(i.amount for i in txs[cur].inputs if i.src_tx == src), total)
            if score * share >= theta and txs[src].time >= earliest:
                grown = True
                walk(chain + [(src, score * share)])
        if not grown:
            found.add(tuple((t, float(s)) for t, s in reversed(chain)))

    walk([(anchor, Fraction(1))])
    return found


def oracle_forward(ledger, anchor: str, theta: Fraction, t_span: int, as_of: int | None = None) -> set[tuple]:
    """Every maximal descendant chain with shares >= theta, seen up to ``as_of``."""
    txs = _raw(ledger)
    until = txs[anchor].time + t_span if as_of is None else min(as_of, txs[anchor].time + t_span)
    found = set()

    def walk(chain):
        cur, score = chain[-1]
        total = sum(o.amount for o in txs[cur].outputs)
        grown = False
        for sp in sorted(txs):
            amount = sum(i.amount for i in txs[sp].inputs if i.src_tx == cur)
            if amount == 0 or txs[sp].time > until or any(sp == c for c, _ in chain):
                continue
            s = score * Fraction(amount, total)
            if s >= theta:
                grown = True
                walk(chain + [(sp, s)])
        if not grown:
            found.add(tuple((t, float(s)) for t, s in chain))

    walk([(anchor, Fraction(1))])
    return found


def oracle_path_set(ledger, owner: str, as_of: int, theta: Fraction, t_span: int) -> tuple[set, set]:
    """Backward and forward chains over all of ``owner``'s transactions up to ``as_of``."""
    bk, fw = set(), set()
    for t in ledger:
        if t.time > as_of:
            continue
        if any(o.addr == owner for o in t.outputs):
            bk |= {(t.tx_id, c) for c in oracle_backward(ledger, t.tx_id, theta, t_span)}
        if any(i.addr == owner for i in t.inputs):
            fw |= {(t.tx_id, c) for c in oracle_forward(ledger, t.tx_id, theta, t_span, as_of)}
    return bk, fw


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def dense_gcn(Wg, We, vectors, context, components, comp_feat):
    """Per-channel normalized propagation over the explicit clique adjacency.

    ``components[i]`` is path i's component id; edges join paths with equal ids
    and carry that component's feature row.
    """
    n = len(vectors)
    ctx = np.asarray(context)
    proj = np.einsum("abk,k->ab", Wg, ctx)  # (d, d)
    edge_proj = np.einsum("abk,k->ab", We, ctx)  # (d, d_n)
    x = np.asarray(vectors) @ proj  # (n, d)
    d = x.shape[1]
    out = np.zeros((n, d))
    for ch in range(d):
        a = np.eye(n)
        for i in range(n):
            for j in range(n):
                if i != j and components[i] == components[j]:
                    a[i, j] = _sigmoid(edge_proj[ch] @ comp_feat[components[i]])
        deg = a.sum(axis=1)
        norm = a / np.sqrt(np.outer(deg, deg))
        out[:, ch] = norm @ x[:, ch]
    return np.maximum(out, 0.0)
