"""Path graphs: paths sharing a terminal transaction form a clique."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import address_features
from .ledger import Ledger
from .pathfind import AssetTransferPath


@dataclass(frozen=True)
class PathGraph:
    direction: str
    n_nodes: int
    edges: tuple[tuple[int, int, str], ...]
    components: tuple[tuple[int, ...], ...]
    terminals: tuple[str, ...]

    def component_of(self) -> list[int]:
        """Component index of every node."""
        comp = [0] * self.n_nodes
        for c, members in enumerate(self.components):
            for i in members:
                comp[i] = c
        return comp

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, _ in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def has_edge(self, i: int, j: int) -> bool:
        return i != j and self.terminals[i] == self.terminals[j]

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "n_nodes": self.n_nodes,
            "components": [list(c) for c in self.components],
            "terminals": list(self.terminals),
            "edges": [list(e) for e in self.edges],
        }


def build_path_graph(paths: Sequence[AssetTransferPath], direction: str, ledger: Ledger | None = None, t: int | None = None) -> PathGraph:
    """Group ``paths`` by terminal transaction; each group is a clique.

    Components are listed in order of first appearance; node indices follow
    the order of ``paths``.
    """
    for p in paths:
        if p.direction != direction:
            raise ValueError(f"path anchored at {p.anchor_tx} is {p.direction}, expected {direction}")
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(paths):
        groups.setdefault(p.terminal_tx, []).append(i)
    edges = []
    for term, members in groups.items():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                edges.append((members[a], members[b], term))
    edges.sort()
    return PathGraph(
        direction,
        len(paths),
        tuple(edges),
        tuple(tuple(m) for m in groups.values()),
        tuple(p.terminal_tx for p in paths),
    )


def binding_address(ledger: Ledger, tx_id: str) -> str:
    """Output address receiving the largest amount of ``tx_id`` (ties: smallest id)."""
    totals: dict[str, int] = {}
    for o in ledger[tx_id].outputs:
        totals[o.addr] = totals.get(o.addr, 0) + o.amount
    return min(totals, key=lambda a: (-totals[a], a))


def component_features(graph: PathGraph, ledger: Ledger, t: int) -> np.ndarray:
    """Binding-address feature vector of each component's shared terminal."""
    rows = []
    for members in graph.components:
        term = graph.terminals[members[0]]
        rows.append(address_features(ledger, binding_address(ledger, term), t))
    return np.stack(rows) if rows else np.zeros((0, 9))


def edge_features(graph: PathGraph, ledger: Ledger, t: int) -> dict[tuple[int, int], np.ndarray]:
    """Feature vector for every edge, keyed by both ``(i, j)`` and ``(j, i)``."""
    cache: dict[str, np.ndarray] = {}
    out = {}
    for i, j, term in graph.edges:
        if term not in cache:
            cache[term] = address_features(ledger, binding_address(ledger, term), t)
        out[(i, j)] = out[(j, i)] = cache[term]
    return out


def dump_graph(graph: PathGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json(), fh)
