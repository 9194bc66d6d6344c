import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_gcn
from pathtracer import model as M
from pathtracer.numerics import ShapeError, Tensor
from pathtracer.samples import BranchRecord, StepRecord, collate_records

SMALL = M.ModelConfig(d=8, d_n=9, d_tx=16, l_u=3, heads=2)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def numpy_lstm(W, xs, d):
    """Reference LSTM over rows of ``xs`` with ``W`` acting on ``[x || h || 1]``."""
    h, c = np.zeros(d), np.zeros(d)
    for x in xs:
        z = W @ np.concatenate([x, h, [1.0]])
        i, f, g, o = _sig(z[:d]), _sig(z[d : 2 * d]), np.tanh(z[2 * d : 3 * d]), _sig(z[3 * d :])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def numpy_attention(Wpu, Wa, vectors, h1):
    heads = []
    for m in range(Wpu.shape[0]):
        u = np.array([Wpu[m] @ np.concatenate([v, h1]) for v in vectors])
        scores = np.tanh(u) @ Wa[m]
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        heads.append(alpha @ u)
    return np.concatenate(heads)


def random_record(rng, cfg, n_back, n_fwd):
    def branch(k):
        if k == 0:
            return BranchRecord(np.zeros((0, cfg.l_u, cfg.d_tx)), np.zeros(0, dtype=int), np.zeros((0, cfg.d_n)))
        comp = rng.integers(0, 2, size=k)
        comp = np.unique(comp, return_inverse=True)[1]
        return BranchRecord(rng.normal(size=(k, cfg.l_u, cfg.d_tx)), comp, rng.normal(size=(comp.max() + 1, cfg.d_n)))

    return StepRecord(rng.normal(size=cfg.d_n), branch(n_back), branch(n_fwd))


# ----------------------------------------------------------------- parameters


def test_init_is_deterministic_per_seed():
    a, b, c = M.init_params(SMALL, 3), M.init_params(SMALL, 3), M.init_params(SMALL, 4)
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)
    assert any(not np.array_equal(a[k].value, c[k].value) for k in a)


def test_param_count_matches_shapes():
    cfg = M.ModelConfig()
    d, m = cfg.d, cfg.heads
    expected = (
        4 * d * (cfg.d_n + d + 1)
        + 4 * 4 * d * (2 * d + 1)
        + 2 * 4 * d * (cfg.d_tx + d + 1) * (2 * d + 1)
        + 4 * (m * (d // m) * 2 * d + m * (d // m))
        + 2 * (d * d * 2 * d + d * cfg.d_n * 2 * d)
        + 5 * d
    )
    assert M.count_params(M.init_params(cfg)) == expected


def test_forget_gate_bias_starts_at_one():
    p = M.init_params(SMALL)
    d = SMALL.d
    for k in range(1, 6):
        bias = p[f"t{k}.W"].value[:, -1]
        assert np.all(bias[d : 2 * d] == 1.0)
        assert np.all(bias[:d] == 0.0)


@pytest.mark.parametrize("kwargs", [{"d": 0}, {"d": 6, "heads": 4}, {"variant": "gnn"}])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        M.ModelConfig(**kwargs)


# -------------------------------------------------------------------- encoder


def test_encoder_with_zero_generator_outputs_zero():
    p = M.init_params(SMALL)
    p["e1.G"] = Tensor(np.zeros(p["e1.G"].shape))
    rng = np.random.default_rng(0)
    out = M.evolve_path_encode(p, rng.normal(size=2 * SMALL.d), rng.normal(size=(SMALL.l_u, SMALL.d_tx)))
    assert np.array_equal(out, np.zeros(SMALL.d))


def test_encoder_with_zero_context_and_zero_bias_slice_outputs_zero():
    p = M.init_params(SMALL)
    G = p["e1.G"].value.copy()
    G[:, :, -1] = 0.0  # context-free slice, which includes the generated bias
    p["e1.G"] = Tensor(G)
    path = np.random.default_rng(1).normal(size=(SMALL.l_u, SMALL.d_tx))
    assert np.array_equal(M.evolve_path_encode(p, np.zeros(2 * SMALL.d), path), np.zeros(SMALL.d))


@given(st.integers(0, 10_000))
def test_encoder_matches_reference_lstm(seed):
    rng = np.random.default_rng(seed)
    p = M.init_params(SMALL, seed % 7)
    ctx = rng.normal(size=2 * SMALL.d)
    path = rng.normal(size=(SMALL.l_u, SMALL.d_tx))
    W = np.einsum("abk,k->ab", p["e2.G"].value, np.append(ctx, 1.0))
    expected = numpy_lstm(W, path, SMALL.d)
    np.testing.assert_allclose(M.evolve_path_encode(p, ctx, path, side="fw"), expected, atol=1e-12)


def test_encoder_weights_depend_on_context():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(2)
    path = rng.normal(size=(SMALL.l_u, SMALL.d_tx))
    a = M.evolve_path_encode(p, rng.normal(size=2 * SMALL.d), path)
    b = M.evolve_path_encode(p, rng.normal(size=2 * SMALL.d), path)
    assert not np.allclose(a, b)


def test_encoder_rejects_wrong_context_length():
    with pytest.raises(ShapeError):
        M.evolve_path_encode(M.init_params(SMALL), np.zeros(3), np.zeros((SMALL.l_u, SMALL.d_tx)))


# ------------------------------------------------------------------ attention


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_attention_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    p = M.init_params(SMALL, seed % 5)
    vectors, h1 = rng.normal(size=(n, SMALL.d)), rng.normal(size=SMALL.d)
    expected = numpy_attention(p["att.bk_path.Wpu"].value, p["att.bk_path.Wa"].value, vectors, h1)
    np.testing.assert_allclose(M.attention_aggregate(p, vectors, h1), expected, atol=1e-12)


def test_attention_single_path_is_its_projection():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(3)
    v, h1 = rng.normal(size=SMALL.d), rng.normal(size=SMALL.d)
    Wpu = p["att.fw_graph.Wpu"].value
    expected = np.concatenate([Wpu[m] @ np.concatenate([v, h1]) for m in range(SMALL.heads)])
    np.testing.assert_allclose(M.attention_aggregate(p, v[None], h1, "fw_graph"), expected, atol=1e-12)


def test_attention_identical_paths_equal_single_path():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(4)
    v, h1 = rng.normal(size=SMALL.d), rng.normal(size=SMALL.d)
    one = M.attention_aggregate(p, v[None], h1)
    np.testing.assert_allclose(M.attention_aggregate(p, np.tile(v, (5, 1)), h1), one, atol=1e-12)


@given(st.integers(0, 10_000))
def test_attention_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = M.init_params(SMALL)
    vectors, h1 = rng.normal(size=(5, SMALL.d)), rng.normal(size=SMALL.d)
    a = M.attention_aggregate(p, vectors, h1)
    b = M.attention_aggregate(p, vectors[rng.permutation(5)], h1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_rejects_empty_input():
    with pytest.raises(ValueError):
        M.attention_aggregate(M.init_params(SMALL), np.zeros((0, SMALL.d)), np.zeros(SMALL.d))


def test_masked_padding_does_not_change_attention():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(5)
    vectors, h1 = rng.normal(size=(3, SMALL.d)), rng.normal(size=SMALL.d)
    padded = np.vstack([vectors, rng.normal(size=(2, SMALL.d))])
    mask = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
    out = M.attend(p["att.bk_path.Wpu"], p["att.bk_path.Wa"], Tensor(padded[None]), Tensor(h1[None]), mask)
    np.testing.assert_allclose(out.value[0], M.attention_aggregate(p, vectors, h1), atol=1e-12)


# ------------------------------------------------------------------------ GCN


@given(st.integers(0, 10_000), st.lists(st.integers(0, 3), min_size=1, max_size=7))
def test_gcn_matches_dense_normalized_adjacency(seed, raw_components):
    rng = np.random.default_rng(seed)
    components = np.unique(raw_components, return_inverse=True)[1]
    p = M.init_params(SMALL, seed % 3)
    vectors = rng.normal(size=(len(components), SMALL.d))
    ctx = rng.normal(size=2 * SMALL.d)
    feats = rng.normal(size=(components.max() + 1, SMALL.d_n))
    got = M.evolve_gcn(p, vectors, components, feats, ctx)
    Wg, We = p["gcn.bk.Wg"].value, p["gcn.bk.We"].value
    np.testing.assert_allclose(got, dense_gcn(Wg, We, vectors, ctx, components, feats), atol=1e-12)


def test_gcn_on_singletons_is_projected_relu():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(6)
    vectors, ctx = rng.normal(size=(4, SMALL.d)), rng.normal(size=2 * SMALL.d)
    proj = np.einsum("abk,k->ab", p["gcn.fw.Wg"].value, ctx)
    got = M.evolve_gcn(p, vectors, np.arange(4), rng.normal(size=(4, SMALL.d_n)), ctx, side="fw")
    np.testing.assert_allclose(got, np.maximum(vectors @ proj, 0.0), atol=1e-12)


def test_gcn_output_depends_only_on_own_component():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(7)
    vectors, ctx = rng.normal(size=(5, SMALL.d)), rng.normal(size=2 * SMALL.d)
    comps, feats = np.array([0, 0, 1, 1, 1]), rng.normal(size=(2, SMALL.d_n))
    base = M.evolve_gcn(p, vectors, comps, feats, ctx)
    changed = vectors.copy()
    changed[3] += 10.0
    feats2 = feats.copy()
    feats2[1] -= 3.0
    after = M.evolve_gcn(p, changed, comps, feats2, ctx)
    np.testing.assert_allclose(after[:2], base[:2], atol=1e-12)
    assert not np.allclose(after[2:], base[2:])


def test_gcn_rejects_index_mismatch():
    with pytest.raises(ValueError):
        M.evolve_gcn(M.init_params(SMALL), np.zeros((3, SMALL.d)), np.array([0, 1]), np.zeros((2, SMALL.d_n)), np.zeros(2 * SMALL.d))


# -------------------------------------------------------------------- hazards


def test_zero_hidden_states_give_zero_rates():
    assert np.array_equal(M.hazards(M.init_params(SMALL), np.zeros((5, SMALL.d))), np.zeros(5))


@given(st.integers(0, 10_000))
def test_rates_are_bounded_tanh_of_projection(seed):
    rng = np.random.default_rng(seed)
    p = M.init_params(SMALL)
    hidden = rng.normal(size=(5, SMALL.d)) * 5
    rates = M.hazards(p, hidden)
    np.testing.assert_allclose(rates, np.tanh(np.sum(p["hz.W"].value * hidden, axis=1)), atol=1e-12)
    assert np.all(np.abs(rates) <= 1.0)


def test_survival_clamps_negative_totals():
    assert M.survival(np.full((3, 5), -0.1)) == 1.0
    assert M.survival(np.full((2, 5), 0.1)) == pytest.approx(np.exp(-1.0), abs=1e-15)
    with pytest.raises(ValueError):
        M.survival(np.zeros((0, 5)))


def test_hazard_trace_accumulates():
    trace = M.HazardTrace()
    for lam in ([0.1] * 5, [-0.2] * 5, [0.3] * 5):
        trace = trace.append(np.array(lam))
    np.testing.assert_allclose(trace.cumulative, [0.5, -0.5, 1.0], atol=1e-15)
    np.testing.assert_allclose(trace.survival, [np.exp(-0.5), 1.0, np.exp(-1.0)], atol=1e-15)
    assert len(trace) == 3


# ---------------------------------------------------------------------- steps


def test_step_address_runs_full_horizon_and_rejects_gaps():
    p = M.init_params(SMALL)
    rng = np.random.default_rng(8)
    state = M.ModelState.zeros(SMALL)
    for t in range(1, SMALL.horizon + 1):
        x = collate_records([random_record(rng, SMALL, 3, 2)], SMALL)
        state, rates = M.step_address(p, SMALL, state, x, t)
        assert rates.shape == (5,)
        assert np.all(np.isfinite(rates))
    assert state.t == SMALL.horizon
    with pytest.raises(ValueError, match="gap"):
        M.step_address(p, SMALL, state, x, SMALL.horizon + 2)


def test_address_step_rejects_wrong_feature_length():
    with pytest.raises(ShapeError):
        M.encode_address_step(M.init_params(SMALL), M.ModelState.zeros(SMALL), np.zeros(4))


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_batched_step_equals_per_address_steps(variant):
    cfg = M.with_variant(SMALL, variant)
    p = M.init_params(cfg, 1)
    rng = np.random.default_rng(9)
    records = [random_record(rng, cfg, nb, nf) for nb, nf in ((4, 1), (0, 2), (1, 0), (3, 3))]
    batched = M.run_sequence(p, cfg, [collate_records(records, cfg)] * 3).value
    for b, rec in enumerate(records):
        alone = M.run_sequence(p, cfg, [collate_records([rec], cfg)] * 3).value[0]
        np.testing.assert_allclose(batched[b], alone, atol=1e-12)


def test_variants_use_only_their_branches():
    rng = np.random.default_rng(10)
    rec = random_record(rng, SMALL, 3, 3)
    rates = {}
    for variant in M.VARIANTS:
        cfg = M.with_variant(SMALL, variant)
        rates[variant] = M.run_sequence(M.init_params(cfg, 2), cfg, [collate_records([rec], cfg)] * 2).value[0]
    # branches that are switched off keep zero hidden state, hence zero rate
    assert np.all(rates["af"][:, 1:] == 0.0)
    assert np.all(rates["paths"][:, [2, 4]] == 0.0)
    assert np.all(rates["paths"][:, [1, 3]] != 0.0)
    assert np.all(rates["full"] != 0.0)
    np.testing.assert_allclose(rates["af"][:, 0], rates["full"][:, 0], atol=1e-12)


def test_state_stack_round_trip():
    rng = np.random.default_rng(11)
    states = [M.ModelState(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), 2) for _ in range(3)]
    h, c = M.stack_states(states)
    back = M.unstack_states(h, c, 2)
    for a, b in zip(states, back):
        assert np.array_equal(a.h, b.h) and np.array_equal(a.c, b.c) and b.t == 2
