"""Influence/trust transaction pairs and asset-transfer path extraction.

Backward paths follow influence pairs from a receive transaction towards the
sources of its funds; forward paths follow trust pairs from a spend
transaction towards the destinations. A hop is kept while the cumulative
(multiplicative) share stays at or above the activation threshold and the
traced transaction lies within ``t_span`` seconds of the anchor.

Shares are tracked as exact rationals so that threshold decisions do not
depend on the order of floating point products. Since the shares leaving any
node sum to at most one, an anchor has at most ``1 / theta`` maximal paths.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Literal

from .ledger import Ledger, spenders_between, txs_of_address

log = logging.getLogger(__name__)

Direction = Literal["backward", "forward"]

DEFAULT_THETA = 0.01
DEFAULT_T_SPAN = 24 * 3600
DEFAULT_PATH_CAP = 256


@dataclass(frozen=True)
class TxPair:
    from_tx: str
    to_tx: str
    kind: Literal["influence", "trust"]
    proportion: float


@dataclass(frozen=True)
class AssetTransferPath:
    """A chain of transactions with cumulative scores.

    Backward nodes run terminal (source) -> anchor, forward nodes run
    anchor -> terminal (destination).
    """

    direction: Direction
    anchor_tx: str
    nodes: tuple[tuple[str, float], ...]

    @property
    def terminal_tx(self) -> str:
        return self.nodes[0][0] if self.direction == "backward" else self.nodes[-1][0]

    @property
    def terminal_score(self) -> float:
        return self.nodes[0][1] if self.direction == "backward" else self.nodes[-1][1]

    @property
    def tx_ids(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "anchor": self.anchor_tx,
            "nodes": [[t, s] for t, s in self.nodes],
        }


def as_fraction(theta: float | Fraction) -> Fraction:
    if isinstance(theta, Fraction):
        return theta
    return Fraction(str(theta))


def _check_theta(theta: Fraction) -> None:
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")


def influence_shares(ledger: Ledger, tx_id: str) -> list[tuple[str, Fraction]]:
    """Exact share of ``tx_id``'s input total contributed by each source tx."""
    cache = ledger.__dict__.setdefault("_influence_cache", {})
    shares = cache.get(tx_id)
    if shares is None:
        tx = ledger[tx_id]
        total = tx.total_input
        amounts: dict[str, int] = {}
        for slot in tx.inputs:
            amounts[slot.src_tx] = amounts.get(slot.src_tx, 0) + slot.amount
        shares = [(src, Fraction(amt, total)) for src, amt in amounts.items()]
        cache[tx_id] = shares
    return shares


def trust_share(ledger: Ledger, tx_id: str, spender: str) -> Fraction:
    """Exact share of ``tx_id``'s output total carried into ``spender``."""
    cache = ledger.__dict__.setdefault("_trust_cache", {})
    key = (tx_id, spender)
    share = cache.get(key)
    if share is None:
        amount = sum(s.amount for s in ledger[spender].inputs if s.src_tx == tx_id)
        share = Fraction(amount, ledger[tx_id].total_output)
        cache[key] = share
    return share


def influence_pairs(ledger: Ledger, tx_id: str, theta: float = DEFAULT_THETA) -> list[TxPair]:
    if tx_id not in ledger:
        raise KeyError(f"unknown transaction {tx_id}")
    th = as_fraction(theta)
    _check_theta(th)
    return [TxPair(src, tx_id, "influence", float(p)) for src, p in influence_shares(ledger, tx_id) if p >= th]


def trust_pairs(ledger: Ledger, tx_id: str, theta: float = DEFAULT_THETA) -> list[TxPair]:
    if tx_id not in ledger:
        raise KeyError(f"unknown transaction {tx_id}")
    th = as_fraction(theta)
    _check_theta(th)
    pairs = []
    for spender in ledger.spenders.get(tx_id, []):
        p = trust_share(ledger, tx_id, spender)
        if p >= th:
            pairs.append(TxPair(tx_id, spender, "trust", float(p)))
    return pairs


@dataclass(frozen=True, slots=True)
class TraceNode:
    """Node of a trace tree rooted at an anchor transaction."""

    tx: str
    score: Fraction
    children: tuple["TraceNode", ...] = ()


def _expand_backward(ledger: Ledger, tx: str, score: Fraction, on_path: frozenset, th: Fraction, earliest: int) -> TraceNode:
    children = []
    for src, share in influence_shares(ledger, tx):
        if src not in ledger or src in on_path:
            continue
        s = share * score
        if s >= th and ledger.time_of(src) >= earliest:
            children.append(_expand_backward(ledger, src, s, on_path | {src}, th, earliest))
    return TraceNode(tx, score, tuple(children))


def _expand_forward(
    ledger: Ledger, tx: str, score: Fraction, on_path: frozenset, th: Fraction, after: int, until: int
) -> TraceNode:
    """Expand ``tx``'s spenders with time in ``(after, until]``."""
    children = []
    for sp in spenders_between(ledger, tx, after, until):
        if sp in on_path:
            continue
        s = trust_share(ledger, tx, sp) * score
        if s >= th:
            children.append(_expand_forward(ledger, sp, s, on_path | {sp}, th, after, until))
    return TraceNode(tx, score, tuple(children))


def backward_tree(ledger: Ledger, anchor: str, theta: float | Fraction, t_span: int) -> TraceNode:
    th = as_fraction(theta)
    _check_theta(th)
    if anchor not in ledger:
        raise KeyError(f"unknown anchor {anchor}")
    if t_span <= 0:
        raise ValueError("t_span must be positive")
    earliest = ledger.time_of(anchor) - t_span
    return _expand_backward(ledger, anchor, Fraction(1), frozenset([anchor]), th, earliest)


def forward_tree(
    ledger: Ledger, anchor: str, theta: float | Fraction, t_span: int, as_of: int | None = None
) -> TraceNode:
    th = as_fraction(theta)
    _check_theta(th)
    if anchor not in ledger:
        raise KeyError(f"unknown anchor {anchor}")
    if t_span <= 0:
        raise ValueError("t_span must be positive")
    horizon = ledger.time_of(anchor) + t_span
    until = horizon if as_of is None else min(as_of, horizon)
    return _expand_forward(ledger, anchor, Fraction(1), frozenset([anchor]), th, -(2**63), until)


def extend_forward_tree(
    ledger: Ledger, node: TraceNode, anchor_time: int, th: Fraction, t_span: int, prev_until: int, new_until: int,
    on_path: frozenset | None = None,
) -> TraceNode:
    """Grow a forward tree built up to ``prev_until`` so it matches ``new_until``.

    Returns ``node`` itself when nothing changed below it.
    """
    horizon = anchor_time + t_span
    lo, hi = min(prev_until, horizon), min(new_until, horizon)
    if hi <= lo:
        return node
    return _extend(ledger, node, on_path or frozenset([node.tx]), th, lo, hi)


def _extend(ledger: Ledger, node: TraceNode, on_path: frozenset, th: Fraction, lo: int, hi: int) -> TraceNode:
    changed = False
    children = []
    for child in node.children:
        new = _extend(ledger, child, on_path | {child.tx}, th, lo, hi)
        changed |= new is not child
        children.append(new)
    for sp in spenders_between(ledger, node.tx, lo, hi):
        if sp in on_path:
            continue
        s = trust_share(ledger, node.tx, sp) * node.score
        if s >= th:
            children.append(_expand_forward(ledger, sp, s, on_path | {sp}, th, -(2**63), hi))
            changed = True
    if not changed:
        return node
    return TraceNode(node.tx, node.score, tuple(children))


def _chains(root: TraceNode) -> list[list[TraceNode]]:
    out: list[list[TraceNode]] = []
    stack: list[tuple[TraceNode, list[TraceNode]]] = [(root, [root])]
    while stack:
        node, chain = stack.pop()
        if not node.children:
            out.append(chain)
        for child in node.children:
            stack.append((child, chain + [child]))
    return out


def paths_from_tree(
    ledger: Ledger, root: TraceNode, direction: Direction, cap: int | None = DEFAULT_PATH_CAP
) -> list[AssetTransferPath]:
    """Materialize one path per root-to-leaf chain, in deterministic order."""
    paths = []
    for chain in _chains(root):
        nodes = tuple((n.tx, float(n.score)) for n in chain)
        if direction == "backward":
            nodes = nodes[::-1]
        paths.append(AssetTransferPath(direction, root.tx, nodes))
    if cap is not None and len(paths) > cap:
        log.warning("anchor %s: %d %s paths exceed cap %d, truncating", root.tx, len(paths), direction, cap)
        paths.sort(key=lambda p: (-p.terminal_score, ledger.time_of(p.terminal_tx), p.terminal_tx, len(p), p.tx_ids))
        paths = paths[:cap]
    paths.sort(key=lambda p: (p.terminal_tx, len(p), p.tx_ids))
    return paths


def backward_paths(
    ledger: Ledger, anchor_tx: str, theta: float = DEFAULT_THETA, t_span: int = DEFAULT_T_SPAN,
    cap: int | None = DEFAULT_PATH_CAP,
) -> list[AssetTransferPath]:
    """All maximal backward paths ending at ``anchor_tx``."""
    return paths_from_tree(ledger, backward_tree(ledger, anchor_tx, theta, t_span), "backward", cap)


def forward_paths(
    ledger: Ledger, anchor_tx: str, theta: float = DEFAULT_THETA, t_span: int = DEFAULT_T_SPAN,
    cap: int | None = DEFAULT_PATH_CAP, as_of: int | None = None,
) -> list[AssetTransferPath]:
    """All maximal forward paths starting at ``anchor_tx``, seen as of ``as_of``."""
    return paths_from_tree(ledger, forward_tree(ledger, anchor_tx, theta, t_span, as_of), "forward", cap)


@dataclass(frozen=True)
class TraceParams:
    theta: float = DEFAULT_THETA
    t_span: int = DEFAULT_T_SPAN
    cap: int | None = DEFAULT_PATH_CAP

    def __post_init__(self):
        _check_theta(as_fraction(self.theta))
        if self.t_span <= 0:
            raise ValueError("t_span must be positive")
        if self.cap is not None and self.cap < 1:
            raise ValueError("path cap must be at least 1")


@dataclass(frozen=True)
class PathSet:
    """Backward and forward paths of one address as of a point in time.

    Equality compares the owner, time and the path lists only; the per-anchor
    trees are kept to support incremental extension.
    """

    owner: str
    as_of_time: int
    backward: tuple[AssetTransferPath, ...]
    forward: tuple[AssetTransferPath, ...]
    params: TraceParams = field(default=TraceParams(), compare=False)
    receive_anchors: tuple[str, ...] = field(default=(), compare=False, repr=False)
    spend_anchors: tuple[str, ...] = field(default=(), compare=False, repr=False)
    backward_by_anchor: dict = field(default_factory=dict, compare=False, repr=False)
    forward_trees: dict = field(default_factory=dict, compare=False, repr=False)
    forward_by_anchor: dict = field(default_factory=dict, compare=False, repr=False)


def build_path_set(ledger: Ledger, owner: str, as_of: int, params: TraceParams = TraceParams()) -> PathSet:
    """Construct an address's path set from scratch."""
    th = as_fraction(params.theta)
    spend, receive = txs_of_address(ledger, owner, as_of)
    bk = {}
    for r in receive:
        bk[r] = tuple(paths_from_tree(ledger, backward_tree(ledger, r, th, params.t_span), "backward", params.cap))
    trees, fw = {}, {}
    for s in spend:
        trees[s] = forward_tree(ledger, s, th, params.t_span, as_of)
        fw[s] = tuple(paths_from_tree(ledger, trees[s], "forward", params.cap))
    return PathSet(
        owner, as_of,
        tuple(p for r in receive for p in bk[r]),
        tuple(p for s in spend for p in fw[s]),
        params, tuple(receive), tuple(spend), bk, trees, fw,
    )


def extend_path_set(prev: PathSet, ledger: Ledger, new_as_of: int) -> PathSet:
    """Advance ``prev`` to ``new_as_of``, reusing untouched paths.

    New receive/spend transactions spawn new paths and existing forward trees
    grow wherever their transactions gained qualifying spenders.
    """
    if new_as_of < prev.as_of_time:
        raise ValueError(f"time regression: {new_as_of} < {prev.as_of_time}")
    if new_as_of == prev.as_of_time:
        return prev
    params = prev.params
    th = as_fraction(params.theta)
    spend, receive = txs_of_address(ledger, prev.owner, new_as_of)

    bk = dict(prev.backward_by_anchor)
    for r in receive[len(prev.receive_anchors):]:
        bk[r] = tuple(paths_from_tree(ledger, backward_tree(ledger, r, th, params.t_span), "backward", params.cap))

    trees, fw = dict(prev.forward_trees), dict(prev.forward_by_anchor)
    for s in spend[: len(prev.spend_anchors)]:
        old = trees[s]
        new = extend_forward_tree(ledger, old, ledger.time_of(s), th, params.t_span, prev.as_of_time, new_as_of)
        if new is not old:
            trees[s] = new
            fw[s] = tuple(paths_from_tree(ledger, new, "forward", params.cap))
    for s in spend[len(prev.spend_anchors):]:
        trees[s] = forward_tree(ledger, s, th, params.t_span, new_as_of)
        fw[s] = tuple(paths_from_tree(ledger, trees[s], "forward", params.cap))

    backward = prev.backward if len(receive) == len(prev.receive_anchors) else tuple(p for r in receive for p in bk[r])
    forward = tuple(p for s in spend for p in fw[s])
    if forward == prev.forward:
        forward = prev.forward
    return replace(
        prev, as_of_time=new_as_of, backward=backward, forward=forward,
        receive_anchors=tuple(receive), spend_anchors=tuple(spend),
        backward_by_anchor=bk, forward_trees=trees, forward_by_anchor=fw,
    )


def dump_paths(paths: Iterable[AssetTransferPath], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in paths:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_paths(path: str | Path) -> list[AssetTransferPath]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                nodes = tuple((str(t), float(s)) for t, s in obj["nodes"])
                out.append(AssetTransferPath(obj["direction"], obj["anchor"], nodes))
    return out
