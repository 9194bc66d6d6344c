"""Labeled synthetic ledgers with planted laundering patterns.

Every monitored address gets its own episode inside a 24 hour horizon that
starts at its first transaction. Three malicious patterns are planted:

* hack: one large inflow, then a fan-out into shadow chains of mixed length
  that all merge at a single sink transaction;
* ransomware: many medium inflows whose funding traces back to a couple of
  shared payout transactions;
* darknet: a few inflows that arrive through long relay chains.

Each pattern has a benign look-alike drawn from the same amount and timing
distributions: whales whose shadow chains end at separate merge
transactions, merchants paid from distinct payout transactions, and
addresses fed through short chains. Address features therefore cannot tell
a pattern from its look-alike; path shape exposes darknet-like addresses and
only the path graph (shared terminals) exposes hack- and ransomware-like
ones. Remaining benign addresses are ordinary users.

Funding starts at coinbase outputs minted long before the window, so
backward tracing stops at the first transaction that spends them.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ledger import InputSlot, LabelRecord, Ledger, OutputSlot, Transaction, dump_labels, dump_ledger
from .pathfind import TraceParams, build_path_set

PATTERNS = ("hack", "ransomware", "darknet")
LOOKALIKES = {"hack": "whale", "ransomware": "merchant", "darknet": "shortpath"}

MINUTE = 60
HOUR = 3600
DAY = 86400
EPOCH = 1_600_000_000


@dataclass(frozen=True)
class SynthConfig:
    addresses: int = 1000
    malicious_fraction: float = 0.1
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # hack, ransomware, darknet
    lookalike_ratio: float = 2.0  # benign look-alikes per malicious address of each pattern
    background_rate: float = 2.0  # mean extra transactions per address after the pattern
    shadow_hops: tuple[int, int] = (0, 3)  # relays in each hack shadow chain
    fan_in: tuple[int, int] = (3, 5)  # shadow chains merging at a hack sink
    darknet_hops: tuple[int, int] = (6, 9)
    horizon_hours: int = 24
    median_amount: int = 1_000_000
    seed: int = 7

    def __post_init__(self):
        if self.addresses < 0:
            raise ValueError("address count must be non-negative")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError("malicious_fraction must lie in [0, 1]")
        if len(self.mix) != 3 or min(self.mix) < 0 or sum(self.mix) <= 0:
            raise ValueError("mix needs three non-negative weights")
        if self.lookalike_ratio < 0 or self.background_rate < 0:
            raise ValueError("rates must be non-negative")
        if self.horizon_hours < 1:
            raise ValueError("horizon must be at least one hour")
        for lo, hi in (self.shadow_hops, self.fan_in, self.darknet_hops):
            if lo < 0 or hi < lo:
                raise ValueError("ranges must satisfy 0 <= low <= high")
        if self.fan_in[0] < 2:
            raise ValueError("a sink needs at least two merging chains")
        if self.fan_in[1] > max(self.addresses, 0):
            raise ValueError("fan-in exceeds the address count")


def class_counts(cfg: SynthConfig) -> dict[str, int]:
    """Number of addresses per episode kind (patterns, look-alikes, users)."""
    n_mal = int(round(cfg.addresses * cfg.malicious_fraction))
    weights = np.asarray(cfg.mix, dtype=float) / sum(cfg.mix)
    raw = weights * n_mal
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n_mal - counts.sum()]:
        counts[k] += 1
    out = {p: int(c) for p, c in zip(PATTERNS, counts)}
    free = cfg.addresses - n_mal
    for p in PATTERNS:
        n = min(int(round(cfg.lookalike_ratio * out[p])), free)
        out[LOOKALIKES[p]] = n
        free -= n
    out["user"] = free
    return out


@dataclass
class _Coin:
    tx: str
    addr: str
    amount: int
    time: int


@dataclass
class _Builder:
    rng: np.random.Generator
    median: int
    txs: list[Transaction] = field(default_factory=list)
    n_tx: int = 0
    n_addr: int = 0

    def address(self, prefix: str = "h") -> str:
        self.n_addr += 1
        return f"{prefix}{self.n_addr:06d}"

    def _tx_id(self) -> str:
        self.n_tx += 1
        return f"t{self.n_tx:07d}"

    def amount(self, scale: float = 1.0) -> int:
        return max(10_000, int(self.rng.lognormal(np.log(self.median * scale), 0.5)))

    def fee(self) -> int:
        return int(self.rng.integers(200, 2000))

    def mint(self, addr: str, amount: int) -> _Coin:
        """Coinbase output far before any monitored window."""
        tx = Transaction(self._tx_id(), EPOCH, (), (OutputSlot(addr, amount),), 0)
        self.txs.append(tx)
        return _Coin(tx.tx_id, addr, amount, EPOCH)

    def pay(self, coins: list[_Coin], outputs: list[tuple[str, int]], time: int) -> list[_Coin]:
        """Spend ``coins`` fully; the last output absorbs rounding so amounts balance."""
        if any(c.time >= time for c in coins):
            raise AssertionError("coin spent before it exists")
        total = sum(c.amount for c in coins)
        fee = min(self.fee(), total // 100)
        budget = total - fee
        declared = sum(a for _, a in outputs)
        if declared > budget:
            outputs = [(a, max(1, v * budget // declared)) for a, v in outputs]
        remainder = budget - sum(v for _, v in outputs[:-1])
        outputs = [*outputs[:-1], (outputs[-1][0], remainder)]
        if min(v for _, v in outputs) <= 0:
            raise AssertionError("non-positive output")
        tx = Transaction(
            self._tx_id(),
            time,
            tuple(InputSlot(c.tx, c.addr, c.amount) for c in coins),
            tuple(OutputSlot(a, v) for a, v in outputs),
            fee,
        )
        self.txs.append(tx)
        return [_Coin(tx.tx_id, a, v, time) for a, v in outputs]

    def source(self, outputs: list[tuple[str, int]], time: int, extra_outputs: int = 0) -> list[_Coin]:
        """A payout funded from an old coinbase; optional unrelated outputs widen the fan-out."""
        pad = [(self.address(), self.amount()) for _ in range(extra_outputs)]
        total = sum(v for _, v in outputs) + sum(v for _, v in pad)
        coin = self.mint(self.address("m"), total + total // 50 + 5000)
        out = self.pay([coin], [*outputs, *pad, (self.address(), total // 50 + 1)], time)
        return out[: len(outputs)]

    def relay(self, coin: _Coin, hops: int, start: int, gap: tuple[int, int]) -> _Coin:
        """Pass ``coin`` through ``hops`` fresh addresses, one transaction each."""
        t = start
        for _ in range(hops):
            t = max(t, coin.time + 1)
            coin = self.pay([coin], [(self.address(), coin.amount)], t)[0]
            t += int(self.rng.integers(*gap))
        return coin


def _chain_inflow(b: _Builder, target: str, amount: int, arrive: int, hops: int, gap=(MINUTE, 4 * MINUTE)) -> _Coin:
    """Deliver ``amount`` to ``target`` at ``arrive`` after ``hops`` relays from a payout."""
    span = hops * gap[1] + 5 * MINUTE
    start = arrive - span
    payer = b.address()
    coin = b.source([(payer, amount + 50_000)], start, extra_outputs=int(b.rng.integers(0, 3)))[0]
    coin = b.relay(coin, hops, start + MINUTE, gap)
    return b.pay([coin], [(target, coin.amount)], max(arrive, coin.time + 1))[0]


def _cash_out(b: _Builder, coins: list[_Coin], start: int, end: int) -> None:
    """Spend held coins to fresh addresses that relay 0-2 hops."""
    t = start
    for coin in coins:
        t = max(t, coin.time + 1)
        if t >= end:
            break
        outs = b.pay([coin], [(b.address(), coin.amount)], t)
        b.relay(outs[0], int(b.rng.integers(0, 3)), t + int(b.rng.integers(5, 60)) * MINUTE, (5 * MINUTE, 30 * MINUTE))
        t += int(b.rng.integers(20, 240)) * MINUTE


def _background(b: _Builder, addr: str, first: int, horizon: int, rate: float, held: list[_Coin]) -> None:
    """Later ordinary activity inside the horizon: extra receives and spends."""
    n = int(b.rng.poisson(rate))
    for _ in range(n):
        at = first + int(b.rng.integers(HOUR, horizon))
        if b.rng.random() < 0.5 or not held:
            held.append(_chain_inflow(b, addr, b.amount(), at, int(b.rng.integers(0, 3)), (5 * MINUTE, 20 * MINUTE)))
        else:
            coin = held.pop(0)
            _cash_out(b, [coin], max(at, coin.time + 1), first + horizon)


def _user(b: _Builder, cfg: SynthConfig, addr: str, first: int) -> None:
    horizon = cfg.horizon_hours * HOUR
    held = [_chain_inflow(b, addr, b.amount(), first, int(b.rng.integers(0, 3)), (5 * MINUTE, 20 * MINUTE))]
    for _ in range(int(b.rng.integers(0, 3))):
        at = first + int(b.rng.integers(10 * MINUTE, horizon))
        held.append(_chain_inflow(b, addr, b.amount(), at, int(b.rng.integers(0, 3)), (5 * MINUTE, 20 * MINUTE)))
    held.sort(key=lambda c: c.time)
    n_spend = int(b.rng.integers(0, len(held) + 1))
    _cash_out(b, held[:n_spend], held[0].time + int(b.rng.integers(10, 600)) * MINUTE, first + horizon)
    _background(b, addr, first, horizon, cfg.background_rate / 2, held[n_spend:])


def _fan_out(b: _Builder, cfg: SynthConfig, addr: str, first: int, converge: bool) -> list[str]:
    """Large inflow, split into shadow chains; returns the terminal tx ids."""
    horizon = cfg.horizon_hours * HOUR
    inflow = _chain_inflow(b, addr, b.amount(10.0), first, int(b.rng.integers(0, 2)), (2 * MINUTE, 6 * MINUTE))
    m = int(b.rng.integers(cfg.fan_in[0], cfg.fan_in[1] + 1))
    split_at = first + int(b.rng.integers(2, 8)) * MINUTE
    shares = b.rng.dirichlet(np.full(m, 4.0)) * inflow.amount
    shadows = b.pay([inflow], [(b.address("s"), max(1, int(v))) for v in shares], split_at)
    hops = b.rng.integers(cfg.shadow_hops[0], cfg.shadow_hops[1] + 1, size=m)
    if m >= 2 and cfg.shadow_hops[1] > cfg.shadow_hops[0]:
        hops[0], hops[1] = cfg.shadow_hops  # always mix short and long chains
    ends = [b.relay(c, int(h), split_at + 2 * MINUTE, (2 * MINUTE, 6 * MINUTE)) for c, h in zip(shadows, hops)]
    merge_at = max(e.time for e in ends) + int(b.rng.integers(3, 10)) * MINUTE
    if converge:
        total = sum(e.amount for e in ends)
        sink = b.pay(ends, [(b.address("k"), total)], merge_at)
        terminals = [sink[0].tx]
    else:
        terminals = []
        for e in ends:
            others = [b.source([(e.addr, max(20_000, e.amount // (m - 1) + int(b.rng.integers(-1000, 1000))))], merge_at - 20 * MINUTE)[0] for _ in range(m - 1)]
            merged = b.pay([e, *others], [(b.address("k"), sum(c.amount for c in [e, *others]))], merge_at + int(b.rng.integers(0, 3)) * MINUTE)
            terminals.append(merged[0].tx)
    _background(b, addr, first, horizon, cfg.background_rate, [])
    return terminals


def _inflows(b: _Builder, cfg: SynthConfig, addr: str, first: int, shared: bool) -> list[str]:
    """Many medium inflows; ``shared`` routes them through two common payouts."""
    horizon = cfg.horizon_hours * HOUR
    n = int(b.rng.integers(5, 9))
    arrive = np.sort(b.rng.integers(1, 50, size=n)) * MINUTE + first
    arrive[0] = first
    hops = b.rng.integers(0, 3, size=n)
    victims = [b.address("v") for _ in range(n)]
    amounts = [b.amount(3.0) for _ in range(n)]
    payout_time = first - int(b.rng.integers(30, 120)) * MINUTE
    if shared:
        groups = np.arange(n) % 2
        b.rng.shuffle(groups)
        funded: list[_Coin | None] = [None] * n
        for g in (0, 1):
            members = [i for i in range(n) if groups[i] == g]
            coins = b.source([(victims[i], amounts[i] + 20_000) for i in members], payout_time + g * MINUTE, extra_outputs=int(b.rng.integers(0, 3)))
            for i, c in zip(members, coins):
                funded[i] = c
    else:
        funded = [
            b.source([(victims[i], amounts[i] + 20_000)], payout_time + int(b.rng.integers(0, 20)) * MINUTE, extra_outputs=int(b.rng.integers(n // 2 - 1, n // 2 + 2)))[0]
            for i in range(n)
        ]
    held, sources = [], []
    for i in range(n):
        coin = b.relay(funded[i], int(hops[i]), payout_time + 25 * MINUTE, (MINUTE, 3 * MINUTE))
        held.append(b.pay([coin], [(addr, coin.amount)], max(int(arrive[i]), coin.time + 1))[0])
        sources.append(funded[i].tx)
    held.sort(key=lambda c: c.time)
    n_spend = int(b.rng.integers(1, 3))
    _cash_out(b, held[:n_spend], first + int(b.rng.integers(60, 300)) * MINUTE, first + horizon)
    _background(b, addr, first, horizon, cfg.background_rate / 2, [])
    return sorted(set(sources))


def _relayed(b: _Builder, cfg: SynthConfig, addr: str, first: int, long_chains: bool) -> list[int]:
    """A few inflows through long (darknet) or short (look-alike) relay chains."""
    horizon = cfg.horizon_hours * HOUR
    n = int(b.rng.integers(2, 5))
    arrive = np.sort(b.rng.integers(1, 50, size=n)) * MINUTE + first
    arrive[0] = first
    lo, hi = cfg.darknet_hops if long_chains else (0, 2)
    hops = [int(b.rng.integers(lo, hi + 1)) for _ in range(n)]
    held = [_chain_inflow(b, addr, b.amount(), int(a), h, (MINUTE, 4 * MINUTE)) for a, h in zip(arrive, hops)]
    held.sort(key=lambda c: c.time)
    n_spend = int(b.rng.integers(1, len(held) + 1))
    _cash_out(b, held[:n_spend], first + int(b.rng.integers(60, 300)) * MINUTE, first + horizon)
    _background(b, addr, first, horizon, cfg.background_rate / 2, [])
    return hops


@dataclass
class SynthResult:
    ledger: Ledger
    labels: list[LabelRecord]
    kinds: dict[str, str]  # address -> episode kind
    planted: dict[str, list]  # address -> pattern terminals or relay hop counts
    config: SynthConfig


def generate(cfg: SynthConfig = SynthConfig()) -> SynthResult:
    """Build the ledger and labels; identical configs give identical output."""
    rng = np.random.default_rng(cfg.seed)
    b = _Builder(rng, cfg.median_amount)
    counts = class_counts(cfg)
    kinds = [k for k, n in counts.items() for _ in range(n)]
    rng.shuffle(kinds)
    window_start = EPOCH + 2 * DAY
    labels, kind_of, planted = [], {}, {}
    for idx, kind in enumerate(kinds):
        addr = f"a{idx:05d}"
        first = window_start + int(rng.integers(0, 2 * DAY))
        if kind in ("hack", "whale"):
            planted[addr] = _fan_out(b, cfg, addr, first, converge=kind == "hack")
        elif kind in ("ransomware", "merchant"):
            planted[addr] = _inflows(b, cfg, addr, first, shared=kind == "ransomware")
        elif kind in ("darknet", "shortpath"):
            planted[addr] = _relayed(b, cfg, addr, first, long_chains=kind == "darknet")
        else:
            _user(b, cfg, addr, first)
            planted[addr] = []
        labels.append(LabelRecord(addr, int(kind in PATTERNS), first))
        kind_of[addr] = kind
    ledger = Ledger.from_transactions(b.txs)
    labels = [LabelRecord(r.address, r.label, _first_seen(ledger, r.address)) for r in labels]
    return SynthResult(ledger, labels, kind_of, planted, cfg)


def _first_seen(ledger: Ledger, addr: str) -> int:
    spend, receive = ledger.by_address[addr]
    return min(ledger.time_of(t) for t in (*spend, *receive))


def write(result: SynthResult, out_dir: str | Path) -> dict[str, Path]:
    """Write ``ledger.jsonl``, ``labels.csv`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ledger": out / "ledger.jsonl", "labels": out / "labels.csv", "manifest": out / "manifest.json"}
    dump_ledger(result.ledger, paths["ledger"])
    dump_labels(result.labels, paths["labels"])
    manifest = {
        "config": asdict(result.config),
        "counts": class_counts(result.config),
        "transactions": len(result.ledger),
        "kinds": result.kinds,
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def describe(ledger: Ledger, labels: list[LabelRecord], trace: TraceParams = TraceParams(), horizon_hours: int = 24) -> dict:
    """Per-class counts, P/N ratio and path length/count distributions at the horizon."""
    counts = Counter(r.label for r in labels)
    stats: dict = {"counts": {str(k): counts.get(k, 0) for k in (0, 1)}}
    stats["pn_ratio"] = counts.get(1, 0) / counts[0] if counts.get(0) else float("inf")
    for lab in (0, 1):
        bk_len, fw_len, bk_n, fw_n = Counter(), Counter(), [], []
        for r in labels:
            if r.label != lab:
                continue
            ps = build_path_set(ledger, r.address, r.first_seen_time + horizon_hours * HOUR, trace)
            bk_len.update(len(p) for p in ps.backward)
            fw_len.update(len(p) for p in ps.forward)
            bk_n.append(len(ps.backward))
            fw_n.append(len(ps.forward))
        stats[f"class_{lab}"] = {
            "backward_length": dict(sorted(bk_len.items())),
            "forward_length": dict(sorted(fw_len.items())),
            "mean_backward_paths": float(np.mean(bk_n)) if bk_n else 0.0,
            "mean_forward_paths": float(np.mean(fw_n)) if fw_n else 0.0,
        }
    return stats
