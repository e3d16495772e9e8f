import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardneg_tgnn import autodiff as ad
from hardneg_tgnn.graph import TemporalGraph, generate_synthetic
from hardneg_tgnn.model import (
    ModelConfig,
    ModelError,
    aggregate,
    compute_message,
    effective_memory,
    embed,
    embed_nodes,
    embedding_expr,
    init_for_graph,
    layer_zero,
    load_checkpoint,
    memory_update,
    message_expr,
    save_checkpoint,
    time_encode,
    time_encoding_expr,
)


def small_graph(seed=0, n_events=80, dim=4):
    return generate_synthetic(6, 4, n_events, recurrence_prob=0.7, feature_dim=dim, seed=seed, time_scale=0.05)


def cfg(variant="tgn", **kw):
    base = dict(embed_dim=4, time_dim=3, neighbor_limit=3)
    base.update(kw)
    return ModelConfig(variant=variant, **base)


def random_params(params, seed=0, scale=0.7):
    # a generic point: the default init has frequencies down to 1e-9, whose
    # gradients fall below what central differences resolve at step 1e-5
    rng = np.random.default_rng(seed)
    return {k: rng.normal(scale=scale, size=np.shape(v)) for k, v in params.items()}


def warmed_state(graph, config, upto=40, seed=0):
    st_ = init_for_graph(config, graph, seed)
    for s in range(0, upto, 10):
        memory_update(st_, graph, np.arange(s, s + 10))
    return st_


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    assert ModelConfig("tgn").layers == 1 and ModelConfig("tgn").use_memory
    assert ModelConfig("tgat").layers == 2 and not ModelConfig("tgat").use_memory
    assert ModelConfig().embed_dim == ModelConfig().time_dim == 100
    with pytest.raises(ModelError):
        ModelConfig("tgn", use_memory=False)
    with pytest.raises(ModelError):
        ModelConfig("tgat", layers=0)
    with pytest.raises(ModelError):
        ModelConfig("gcn")


# ---------------------------------------------------------------- time encoding


def test_time_encoding_at_zero_with_zero_phase_is_ones():
    g = small_graph()
    s = init_for_graph(cfg(), g)
    s.params["time.b"][:] = 0.0
    np.testing.assert_array_equal(time_encode(0.0, s), np.ones(3))


def test_time_encoding_default_frequencies_and_determinism():
    g = small_graph()
    s = init_for_graph(cfg(time_dim=10), g)
    np.testing.assert_allclose(s.params["time.w"][0], 1 / 10 ** np.linspace(0, 9, 10))
    assert time_encode(2.5, s).tobytes() == time_encode(2.5, s).tobytes()
    with pytest.raises(ModelError):
        time_encode(-1.0, s)


def test_time_encoding_gradient():
    rng = np.random.default_rng(0)
    e = ad.sum(time_encoding_expr([0.0, 0.7, 3.1]) * ad.const(rng.normal(size=(3, 4))))
    bind = {"time.w": rng.normal(size=(1, 4)), "time.b": rng.normal(size=4)}
    assert ad.finite_difference_check(e, bind, ["time.w", "time.b"]) < 1e-4


# ---------------------------------------------------------------- layer zero


def test_layer_zero_without_memory_is_the_feature():
    g = small_graph()
    g = g.with_columns(node_features=np.random.default_rng(1).normal(size=(g.num_nodes, 4)))
    s = init_for_graph(cfg("tgat"), g)
    np.testing.assert_array_equal(layer_zero(3, 5.0, s, g), g.node_features[3])


def test_layer_zero_fresh_node_is_zero():
    g = small_graph()
    s = init_for_graph(cfg(), g)
    np.testing.assert_array_equal(layer_zero(0, 0.0, s, g), np.zeros(4))


def test_layer_zero_adds_memory_to_feature():
    g = small_graph()
    x = np.random.default_rng(2).normal(size=(g.num_nodes, 4))
    g = g.with_columns(node_features=x)
    s = init_for_graph(cfg(), g)
    m = np.array([0.5, -1.0, 2.0, 0.25])
    s.memory[2] = m
    np.testing.assert_allclose(layer_zero(2, 1.0, s, g), x[2] + m, atol=1e-15)
    with pytest.raises(ModelError):
        layer_zero(99, 1.0, s, g)


def test_feature_projection_when_dims_differ():
    g = small_graph(dim=3)
    s = init_for_graph(cfg(), g)
    assert s.params["feat.W"].shape == (3, 4)


# ---------------------------------------------------------------- messages and aggregation


def test_zero_parameters_give_tanh_zero_message():
    g = small_graph()
    s = init_for_graph(cfg(), g)
    s.params["msg1.W"][:] = 0.0
    s.params["msg1.b"][:] = 0.0
    out = compute_message(s, g, 0, g.times[0] + 1.0, 1, np.zeros(4), np.zeros(4), int(g.sources[0]))
    np.testing.assert_array_equal(out, np.zeros(4))


def test_message_depends_only_on_elapsed_time():
    g = small_graph()
    s = init_for_graph(cfg(), g, seed=3)
    rng = np.random.default_rng(3)
    h_n, h_s = rng.normal(size=4), rng.normal(size=4)
    u = int(g.sources[5])
    a = compute_message(s, g, 5, g.times[5] + 0.3, 1, h_n, h_s, u)
    shifted = g.with_columns(times=g.times + 7.0)
    b = compute_message(s, shifted, 5, g.times[5] + 7.3, 1, h_n, h_s, u)
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ModelError):
        compute_message(s, g, 5, g.times[5], 1, h_n, h_s, u)


def test_message_gradient_on_random_inputs():
    g = small_graph()
    s = init_for_graph(cfg(), g, seed=4)
    rng = np.random.default_rng(4)
    n = 3
    e = message_expr(
        1,
        ad.param("hs"),
        ad.param("hn"),
        time_encoding_expr(rng.uniform(0, 2, n)),
        ad.const(rng.normal(size=(n, 4))),
        ad.const(rng.normal(size=(n, 4))),
        ad.const(rng.normal(size=(n, 4))),
        n,
    )
    bind = dict(random_params(s.params, 4), hs=rng.normal(size=(n, 4)), hn=rng.normal(size=(n, 4)))
    assert ad.finite_difference_check(ad.sum(e * ad.const(rng.normal(size=(n, 4)))), bind, ["msg1.W", "msg1.b", "time.w", "hs", "hn"]) < 1e-4


def _combine(s, h_self, agg):
    return np.tanh(np.concatenate([h_self, agg]) @ s.params["comb1.W"] + s.params["comb1.b"])


def test_attention_single_message_passes_through():
    g = small_graph()
    s = init_for_graph(cfg("tgat", layers=1), g, seed=5)
    rng = np.random.default_rng(5)
    h, m = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(aggregate(s, 1, [m], h), _combine(s, h, m), atol=1e-12)


def test_sum_aggregation_uses_message_sum():
    g = small_graph()
    s = init_for_graph(cfg(), g, seed=6)
    rng = np.random.default_rng(6)
    h, m1, m2 = rng.normal(size=(3, 4))
    np.testing.assert_allclose(aggregate(s, 1, [m1, m2], h), _combine(s, h, m1 + m2), atol=1e-12)
    np.testing.assert_allclose(aggregate(s, 1, [], h), _combine(s, h, np.zeros(4)), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["tgn", "tgat"]), st.integers(1, 5), st.randoms(use_true_random=False))
def test_aggregation_is_permutation_invariant(variant, k, rnd):
    g = small_graph()
    s = init_for_graph(cfg(variant, layers=1), g, seed=7)
    rng = np.random.default_rng(k)
    msgs = rng.normal(size=(k, 4))
    h = rng.normal(size=4)
    perm = list(range(k))
    rnd.shuffle(perm)
    np.testing.assert_allclose(aggregate(s, 1, msgs, h), aggregate(s, 1, msgs[perm], h), atol=1e-12)


# ---------------------------------------------------------------- embeddings


def test_isolated_node_depends_on_layer_zero_only():
    g = small_graph()
    s = warmed_state(g, cfg(), upto=40)
    lonely = TemporalGraph(g.sources, g.targets, g.times, g.edge_features, np.zeros((g.num_nodes + 1, 4)), None)
    s2 = init_for_graph(cfg(), lonely)
    s2.params = s.params
    node = g.num_nodes  # never appears in any event
    h0 = layer_zero(node, 10.0, s2, lonely)
    expect = _combine(s2, h0, np.zeros(4)) @ s2.params["out.W"] + s2.params["out.b"]
    np.testing.assert_allclose(embed(node, 10.0, s2, lonely).vector, expect, atol=1e-12)


def test_identical_nodes_get_identical_embeddings():
    # two nodes that each talk once to the same partner with identical features
    edge = np.ones((2, 3))
    g = TemporalGraph([0, 1], [2, 2], [1.0, 1.0], edge, np.zeros((3, 3)))
    s = init_for_graph(cfg("tgat", embed_dim=3), g, seed=8)
    h = embed_nodes(s, g, [0, 1], [5.0, 5.0], precision="exact")
    np.testing.assert_array_equal(h[0], h[1])


@pytest.mark.parametrize("variant", ["tgn", "tgat"])
def test_future_events_do_not_change_embeddings(variant):
    g = small_graph(n_events=60)
    config = cfg(variant)
    s = warmed_state(g, config, upto=30) if variant == "tgn" else init_for_graph(config, g)
    t = float(g.times[30])
    before = embed_nodes(s, g, np.arange(g.num_nodes), t, cutoff=30, precision="exact")
    rng = np.random.default_rng(9)
    mutated = g.with_columns(
        targets=np.concatenate([g.targets[:30], rng.integers(6, 10, size=30)]),
        edge_features=np.concatenate([g.edge_features[:30], rng.normal(size=(30, 4)) * 5]),
    )
    after = embed_nodes(s, mutated, np.arange(g.num_nodes), t, cutoff=30, precision="exact")
    np.testing.assert_array_equal(before, after)


def test_embed_rejects_bad_queries():
    g = small_graph()
    s = init_for_graph(cfg(), g)
    with pytest.raises(ModelError):
        embed(0, -1.0, s, g)
    with pytest.raises(ModelError):
        embed(100, 1.0, s, g)


# ---------------------------------------------------------------- memory


def test_empty_batch_leaves_state_unchanged():
    g = small_graph()
    s = warmed_state(g, cfg(), upto=20)
    before = s.copy()
    memory_update(s, g, np.array([], dtype=int))
    for f in ("memory", "pending_raw", "pending_time", "has_pending", "last_update"):
        np.testing.assert_array_equal(getattr(s, f), getattr(before, f))


def test_absent_node_memory_is_unchanged():
    g = small_graph()
    s = warmed_state(g, cfg(), upto=20)
    batch = np.arange(20, 30)
    touched = set(g.sources[batch]) | set(g.targets[batch])
    others = [n for n in range(g.num_nodes) if n not in touched]
    before = effective_memory(s, others)
    memory_update(s, g, batch)
    np.testing.assert_array_equal(effective_memory(s, others), before)


def test_memory_update_is_deterministic_and_ordered():
    g = small_graph()
    a = warmed_state(g, cfg(), upto=30)
    b = warmed_state(g, cfg(), upto=30)
    np.testing.assert_array_equal(a.memory, b.memory)
    np.testing.assert_array_equal(a.pending_raw, b.pending_raw)
    with pytest.raises(ModelError):
        memory_update(a, g, np.arange(0, 5))


def test_batch_events_are_pending_until_read():
    g = small_graph()
    s = init_for_graph(cfg(), g, seed=1)
    memory_update(s, g, np.arange(0, 10))
    u = int(g.sources[0])
    # committed memory still zero; the pending event shows up only through the GRU on read
    np.testing.assert_array_equal(s.memory[u], 0.0)
    assert s.has_pending[u]
    assert np.any(effective_memory(s, [u]) != 0.0)


# ---------------------------------------------------------------- gradients and checkpoints


@pytest.mark.parametrize("variant,score_mode", [("tgn", "dot"), ("tgat", "dot"), ("tgn", "mlp-concat")])
def test_full_loss_expression_gradient(variant, score_mode):
    from hardneg_tgnn.training import batch_loss_expr

    g = small_graph(n_events=60)
    config = cfg(variant, score_mode=score_mode)
    s = warmed_state(g, config, upto=40, seed=2) if variant == "tgn" else init_for_graph(config, g, 2)
    ords = np.arange(40, 46)
    negs = np.array([[(int(g.targets[o]) + 1) % g.num_nodes] for o in ords])
    loss = batch_loss_expr(s, g, ords, negs, 40)
    bind = random_params(s.params, 2)
    grads = ad.gradient(loss, bind, list(bind), "exact")
    rng = np.random.default_rng(0)
    h = 1e-5
    for name, grad in grads.items():
        flat = bind[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = float(ad.evaluate(loss, bind, "exact"))
            flat[i] = orig - h
            down = float(ad.evaluate(loss, bind, "exact"))
            flat[i] = orig
            # some GRU entries have gradients near 1e-9, where round-off of order 1e-10 dominates
            assert grad.reshape(-1)[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8), name


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = small_graph()
    s = warmed_state(g, cfg(score_mode="mlp-concat"), upto=30)
    save_checkpoint(s, tmp_path / "c.npz")
    r = load_checkpoint(tmp_path / "c.npz")
    assert r.config == s.config and r.clock == s.clock
    assert set(r.params) == set(s.params)
    for k in s.params:
        assert r.params[k].tobytes() == s.params[k].tobytes()
    for f in ("memory", "last_update", "pending_raw", "pending_time", "has_pending"):
        assert getattr(r, f).tobytes() == getattr(s, f).tobytes()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")


def test_embedding_expr_matches_single_query_path():
    g = small_graph()
    s = warmed_state(g, cfg("tgat"), upto=0)
    nodes = np.arange(g.num_nodes)
    batch = ad.evaluate(embedding_expr(s, g, nodes, 3.0), s.params, "exact")
    for n in nodes:
        np.testing.assert_allclose(embed(int(n), 3.0, s, g).vector, batch[n], atol=1e-12)
