"""Evolving path/graph encoder with a five-branch hazard head.

Per timestep and address:

1. T-1 LSTM consumes the address features.
2. The backward path encoder (E-1) gets its LSTM weights generated from
   ``[h_T1(t) || h_T2(t-1)]``, encodes every resampled path, and multi-head
   attention pools the path vectors into the input of T-2.
3. The backward graph encoder mixes path vectors inside each path graph
   component with weights generated from ``[h_T1(t) || h_T3(t-1)]``; pooled
   output feeds T-3.
4. The forward branch repeats 2-3 with E-2, T-4 and T-5.
5. Each T-j hidden state yields a rate ``tanh(w_j . h_j)``.

Everything is batched over addresses: path tensors are padded to the
largest path count in the batch and masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import Tensor

VARIANTS = ("af", "paths", "full")
BRANCH_LSTMS = {"bk_path": 2, "bk_graph": 3, "fw_path": 4, "fw_graph": 5}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_n: int = 9
    d_tx: int = 16
    l_u: int = 6
    heads: int = 4
    path_cap: int = 256
    horizon: int = 24
    variant: str = "full"

    def __post_init__(self):
        if min(self.d, self.d_n, self.d_tx, self.l_u, self.heads, self.path_cap, self.horizon) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.d % self.heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def use_paths(self) -> bool:
        return self.variant in ("paths", "full")

    @property
    def use_graphs(self) -> bool:
        return self.variant == "full"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of all learnable tensors.

    LSTM matrices act on ``[x || h || 1]`` so the last column is the bias.
    A path-encoder generator ``e*.G`` has shape ``(4d, d_tx + d + 1, 2d + 1)``:
    contracting its last axis with ``[context || 1]`` yields the encoder's
    gate matrix, so the final slices hold context-independent weights/biases.
    """
    d, m = cfg.d, cfg.heads
    shapes: dict[str, tuple[int, ...]] = {"t1.W": (4 * d, cfg.d_n + d + 1)}
    for k in (2, 3, 4, 5):
        shapes[f"t{k}.W"] = (4 * d, 2 * d + 1)
    for k in (1, 2):
        shapes[f"e{k}.G"] = (4 * d, cfg.d_tx + d + 1, 2 * d + 1)
    for branch in BRANCH_LSTMS:
        shapes[f"att.{branch}.Wpu"] = (m, d // m, 2 * d)
        shapes[f"att.{branch}.Wa"] = (m, d // m)
    for side in ("bk", "fw"):
        shapes[f"gcn.{side}.Wg"] = (d, d, 2 * d)
        shapes[f"gcn.{side}.We"] = (d, cfg.d_n, 2 * d)
    shapes["hz.W"] = (5, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform init in +-1/sqrt(fan_in); LSTM forget-gate bias starts at +1."""
    rng = np.random.default_rng(seed)
    d = cfg.d
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".G"):
            fan_in = shape[1] * shape[2]
        elif name.startswith("gcn."):
            fan_in = shape[1] * shape[2]
        else:
            fan_in = shape[-1]
        value = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
        if name.startswith("t") and name.endswith(".W"):
            value[:, -1] = 0.0
            value[d : 2 * d, -1] = 1.0
        elif name.endswith(".G"):
            value[:, :, -1] = rng.uniform(-1.0, 1.0, size=shape[:2]) / np.sqrt(shape[1])
            value[:, -1, -1] = 0.0
            value[d : 2 * d, -1, -1] = 1.0
        params[name] = Tensor(value, requires_grad=True)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# --------------------------------------------------------------------- inputs


@dataclass
class BranchInputs:
    """One direction's padded path data for a batch at one timestep.

    ``members[b, n, c]`` is 1 when path ``n`` of address ``b`` belongs to
    component ``c``; ``comp_feat`` holds each component's binding-address
    features and ``comp_size`` its path count.
    """

    paths: np.ndarray  # (B, N, L_u, d_tx)
    mask: np.ndarray  # (B, N)
    members: np.ndarray  # (B, N, C)
    comp_size: np.ndarray  # (B, C)
    comp_feat: np.ndarray  # (B, C, d_n)

    @classmethod
    def empty(cls, batch: int, cfg: ModelConfig) -> "BranchInputs":
        return cls(
            np.zeros((batch, 1, cfg.l_u, cfg.d_tx)),
            np.zeros((batch, 1)),
            np.zeros((batch, 1, 1)),
            np.zeros((batch, 1)),
            np.zeros((batch, 1, cfg.d_n)),
        )


@dataclass
class StepInputs:
    address: np.ndarray  # (B, d_n)
    backward: BranchInputs
    forward: BranchInputs


def branch_inputs(
    paths: list[np.ndarray], components: list[np.ndarray], comp_feats: list[np.ndarray], cfg: ModelConfig
) -> BranchInputs:
    """Pad per-address ``(n_b, L_u, d_tx)`` path arrays into a batch.

    ``components[b]`` gives the component index of each path of address
    ``b`` and ``comp_feats[b]`` the ``(C_b, d_n)`` component features.
    """
    batch = len(paths)
    n = max([1] + [len(p) for p in paths])
    c = max([1] + [len(f) for f in comp_feats])
    out = BranchInputs(
        np.zeros((batch, n, cfg.l_u, cfg.d_tx)),
        np.zeros((batch, n)),
        np.zeros((batch, n, c)),
        np.zeros((batch, c)),
        np.zeros((batch, c, cfg.d_n)),
    )
    for b, (p, comp, feat) in enumerate(zip(paths, components, comp_feats)):
        k = len(p)
        if k == 0:
            continue
        out.paths[b, :k] = p
        out.mask[b, :k] = 1.0
        out.members[b, np.arange(k), comp] = 1.0
        out.comp_size[b, : len(feat)] = np.bincount(comp, minlength=len(feat))
        out.comp_feat[b, : len(feat)] = feat
    return out


# ----------------------------------------------------------------- components


def _with_ones(x: Tensor) -> Tensor:
    return nx.concat([x, Tensor(np.ones(x.shape[:-1] + (1,)))], axis=-1)


def _lstm(W: Tensor, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    d = h.shape[-1]
    z = nx.matmul(_with_ones(nx.concat([x, h], axis=-1)), nx.transpose(W, (1, 0)))
    hc = nx.lstm_cell(z, c)
    return hc[..., :d], hc[..., d:]


def encode_paths(G: Tensor, context: Tensor, paths: np.ndarray) -> Tensor:
    """Encode ``(B, N, L_u, d_tx)`` paths with context-generated LSTM weights.

    Returns the final hidden state of every path, shape ``(B, N, d)``.
    """
    four_d, k1, c1 = G.shape
    d = four_d // 4
    batch, n = paths.shape[:2]
    flat = nx.reshape(G, (four_d * k1, c1))
    gen = nx.matmul(_with_ones(context), nx.transpose(flat, (1, 0)))
    Wt = nx.transpose(nx.reshape(gen, (batch, four_d, k1)), (0, 2, 1))  # (B, K+1, 4d)
    h = Tensor(np.zeros((batch, n, d)))
    c = Tensor(np.zeros((batch, n, d)))
    ones = np.ones((batch, n, 1))
    for j in range(paths.shape[2]):
        xh = nx.concat([Tensor(paths[:, :, j, :]), h, Tensor(ones)], axis=-1)
        hc = nx.lstm_cell(nx.matmul(xh, Wt), c)
        h, c = hc[..., :d], hc[..., d:]
    return h


def attend(Wpu: Tensor, Wa: Tensor, vectors: Tensor, h1: Tensor, mask: np.ndarray) -> Tensor:
    """Multi-head attention pooling of ``(B, N, d)`` vectors to ``(B, d)``.

    Head ``m`` projects every ``[f || h1]`` to ``u = Wpu[m] [f || h1]`` (length
    ``d/M``), scores it with ``Wa[m] . tanh(u)`` and returns the softmax-weighted
    sum of the projections. Masked (padding) entries get zero weight; an
    all-masked row pools to zero.
    """
    m, k, two_d = Wpu.shape
    batch, n, d = vectors.shape
    hb = nx.broadcast_to(nx.reshape(h1, (batch, 1, d)), (batch, n, d))
    fh = nx.reshape(nx.concat([vectors, hb], axis=-1), (batch * n, two_d))
    u = nx.reshape(nx.matmul(fh, nx.transpose(nx.reshape(Wpu, (m * k, two_d)), (1, 0))), (batch, n, m, k))
    scores = nx.einsum("bnmk,mk->bnm", nx.tanh(u), Wa)
    mask3 = np.repeat(mask[:, :, None], m, axis=2)
    alpha = nx.softmax(scores + Tensor((mask3 - 1.0) * 1e9), axis=1) * Tensor(mask3)
    pooled = nx.einsum("bnm,bnmk->bmk", alpha, u)
    return nx.reshape(pooled, (batch, m * k))


def graph_mix(Wg: Tensor, We: Tensor, vectors: Tensor, context: Tensor, branch: BranchInputs) -> Tensor:
    """Evolving graph convolution over clique components.

    The context generates a ``d x d`` node projection and a ``d x d_n`` edge
    projector; the edge weight of a component (all its edges share the same
    binding address) is ``sigmoid(projector @ S)`` per channel. With self
    loops, every node of a component with ``n`` members and weight ``s`` has
    degree ``1 + (n - 1) s``, so the symmetric normalized propagation reduces
    to ``(x_i + s * (sum_component(x) - x_i)) / (1 + (n - 1) s)`` followed by
    relu. Singleton components pass ``relu(x_i)`` through.
    """
    d = Wg.shape[0]
    d_n = We.shape[1]
    batch, n, _ = vectors.shape
    proj = nx.reshape(nx.matmul(context, nx.transpose(nx.reshape(Wg, (d * d, 2 * d)), (1, 0))), (batch, d, d))
    x = nx.matmul(vectors, proj)
    edge = nx.reshape(nx.matmul(context, nx.transpose(nx.reshape(We, (d * d_n, 2 * d)), (1, 0))), (batch, d, d_n))
    s = nx.sigmoid(nx.matmul(Tensor(branch.comp_feat), nx.transpose(edge, (0, 2, 1))))  # (B, C, d)
    members = Tensor(branch.members)
    s_node = nx.matmul(members, s)
    comp_sum = nx.matmul(Tensor(np.swapaxes(branch.members, 1, 2)), x)
    sum_node = nx.matmul(members, comp_sum)
    n_node = np.einsum("bnc,bc->bn", branch.members, branch.comp_size)
    n_minus = np.repeat(n_node[:, :, None] - 1.0, d, axis=2)
    n_minus[n_minus < 0] = 0.0
    num = x + s_node * (sum_node - x)
    den = s_node * Tensor(n_minus) + 1.0
    return nx.relu(num / den)


def hazard_rates(Wz: Tensor, hidden: list[Tensor]) -> Tensor:
    """``tanh(w_j . h_j)`` for the five temporal LSTMs, shape ``(B, 5)``."""
    return nx.tanh(nx.einsum("bjd,jd->bj", nx.stack(hidden, axis=1), Wz))


# ---------------------------------------------------------------- state/steps


@dataclass
class ModelState:
    """Per-address hidden/cell states of T-1..T-5 (rows 0..4)."""

    h: np.ndarray
    c: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelState":
        return cls(np.zeros((5, cfg.d)), np.zeros((5, cfg.d)), 0)


def stack_states(states: list[ModelState]) -> tuple[list[Tensor], list[Tensor]]:
    h = np.stack([s.h for s in states])
    c = np.stack([s.c for s in states])
    return [Tensor(h[:, k]) for k in range(5)], [Tensor(c[:, k]) for k in range(5)]


def unstack_states(hidden: list[Tensor], cells: list[Tensor], t: int) -> list[ModelState]:
    h = np.stack([x.value for x in hidden], axis=1)
    c = np.stack([x.value for x in cells], axis=1)
    return [ModelState(h[b].copy(), c[b].copy(), t) for b in range(h.shape[0])]


def forward_step(
    params: dict[str, Tensor], cfg: ModelConfig, hidden: list[Tensor], cells: list[Tensor], x: StepInputs
) -> tuple[list[Tensor], list[Tensor], Tensor]:
    """One timestep for a batch; returns new hidden/cell lists and ``(B, 5)`` rates."""
    hidden, cells = list(hidden), list(cells)
    h1, c1 = _lstm(params["t1.W"], Tensor(x.address), hidden[0], cells[0])
    prev = list(hidden)
    hidden[0], cells[0] = h1, c1
    if cfg.use_paths:
        for side, branch, e in (("bk", x.backward, "e1"), ("fw", x.forward, "e2")):
            k_path = BRANCH_LSTMS[f"{side}_path"] - 1
            k_graph = BRANCH_LSTMS[f"{side}_graph"] - 1
            ctx = nx.concat([h1, prev[k_path]], axis=-1)
            vectors = encode_paths(params[f"{e}.G"], ctx, branch.paths)
            pooled = attend(params[f"att.{side}_path.Wpu"], params[f"att.{side}_path.Wa"], vectors, h1, branch.mask)
            hidden[k_path], cells[k_path] = _lstm(params[f"t{k_path + 1}.W"], pooled, prev[k_path], cells[k_path])
            if cfg.use_graphs:
                gctx = nx.concat([h1, prev[k_graph]], axis=-1)
                mixed = graph_mix(params[f"gcn.{side}.Wg"], params[f"gcn.{side}.We"], vectors, gctx, branch)
                pooled_g = attend(
                    params[f"att.{side}_graph.Wpu"], params[f"att.{side}_graph.Wa"], mixed, h1, branch.mask
                )
                hidden[k_graph], cells[k_graph] = _lstm(
                    params[f"t{k_graph + 1}.W"], pooled_g, prev[k_graph], cells[k_graph]
                )
    return hidden, cells, hazard_rates(params["hz.W"], hidden)


def run_sequence(
    params: dict[str, Tensor], cfg: ModelConfig, steps: list[StepInputs], states: list[ModelState] | None = None
) -> Tensor:
    """Run consecutive timesteps; returns rates of shape ``(B, T, 5)``."""
    batch = steps[0].address.shape[0]
    if states is None:
        states = [ModelState.zeros(cfg) for _ in range(batch)]
    hidden, cells = stack_states(states)
    rates = []
    for x in steps:
        hidden, cells, lam = forward_step(params, cfg, hidden, cells, x)
        rates.append(lam)
    return nx.stack(rates, axis=1)


# --------------------------------------------------------------- hazard trace


@dataclass
class HazardTrace:
    """Per-timestep rates ``(T, 5)`` with cumulative sums and survival values."""

    rates: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    @property
    def totals(self) -> np.ndarray:
        return self.rates.sum(axis=1)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.totals)

    @property
    def survival(self) -> np.ndarray:
        return np.exp(-np.maximum(self.cumulative, 0.0))

    def append(self, lam: np.ndarray) -> "HazardTrace":
        return HazardTrace(np.vstack([self.rates, np.asarray(lam, dtype=float).reshape(1, 5)]))

    def __len__(self) -> int:
        return self.rates.shape[0]


def survival(rates: np.ndarray) -> float:
    """Survival value after the given ``(t, 5)`` rate history: ``exp(-relu(sum))``."""
    rates = np.asarray(rates, dtype=float)
    if rates.size == 0:
        raise ValueError("survival needs at least one timestep")
    return float(np.exp(-max(float(rates.sum()), 0.0)))


# -------------------------------------------------- single-address interface


def _row(v: np.ndarray) -> Tensor:
    return Tensor(np.asarray(v, dtype=float)[None, :])


def encode_address_step(params: dict[str, Tensor], state: ModelState, address_features: np.ndarray) -> ModelState:
    """Advance T-1 with one address feature vector."""
    f = np.asarray(address_features, dtype=float)
    if f.shape != (params["t1.W"].shape[1] - params["t1.W"].shape[0] // 4 - 1,):
        raise nx.ShapeError(f"address feature shape {f.shape} does not match T-1 input")
    h, c = _lstm(params["t1.W"], _row(f), _row(state.h[0]), _row(state.c[0]))
    new = ModelState(state.h.copy(), state.c.copy(), state.t)
    new.h[0], new.c[0] = h.value[0], c.value[0]
    return new


def evolve_path_encode(params: dict[str, Tensor], context: np.ndarray, path: np.ndarray, side: str = "bk") -> np.ndarray:
    """Encode one ``(L_u, d_tx)`` uniform path under a ``2d`` context."""
    G = params["e1.G" if side == "bk" else "e2.G"]
    d = G.shape[0] // 4
    context = np.asarray(context, dtype=float)
    if context.shape != (2 * d,):
        raise nx.ShapeError(f"context must have length {2 * d}")
    return encode_paths(G, _row(context), np.asarray(path, dtype=float)[None, None]).value[0, 0]


def attention_aggregate(
    params: dict[str, Tensor], vectors: np.ndarray, h1: np.ndarray, branch: str = "bk_path"
) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("attention needs at least one path vector")
    out = attend(
        params[f"att.{branch}.Wpu"], params[f"att.{branch}.Wa"], Tensor(vectors[None]), _row(h1),
        np.ones((1, vectors.shape[0])),
    )
    return out.value[0]


def evolve_gcn(
    params: dict[str, Tensor], vectors: np.ndarray, components: np.ndarray, comp_feats: np.ndarray,
    context: np.ndarray, side: str = "bk",
) -> np.ndarray:
    """Graph mixing for one address; ``components[i]`` is path ``i``'s component index."""
    vectors = np.asarray(vectors, dtype=float)
    components = np.asarray(components, dtype=int)
    if len(components) != len(vectors):
        raise ValueError("graph/path index mismatch")
    cfg = ModelConfig(d=vectors.shape[1], d_n=np.shape(comp_feats)[1], heads=1)
    b = branch_inputs([np.zeros((len(vectors), cfg.l_u, cfg.d_tx))], [components], [np.asarray(comp_feats, float)], cfg)
    out = graph_mix(params[f"gcn.{side}.Wg"], params[f"gcn.{side}.We"], Tensor(vectors[None]), _row(context), b)
    return out.value[0]


def hazards(params: dict[str, Tensor], hidden: np.ndarray) -> np.ndarray:
    """Rates for a ``(5, d)`` stack of hidden states."""
    hidden = np.asarray(hidden, dtype=float)
    return hazard_rates(params["hz.W"], [Tensor(hidden[None, k]) for k in range(5)]).value[0]


def step_address(
    params: dict[str, Tensor], cfg: ModelConfig, state: ModelState, x: StepInputs, t: int | None = None
) -> tuple[ModelState, np.ndarray]:
    """Single-address step; ``x`` carries a batch of one."""
    if t is not None and t != state.t + 1:
        raise ValueError(f"timestep gap: state at {state.t}, inputs for {t}")
    hidden, cells = stack_states([state])
    hidden, cells, lam = forward_step(params, cfg, hidden, cells, x)
    return unstack_states(hidden, cells, state.t + 1)[0], lam.value[0]


def with_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    return replace(cfg, variant=variant)
