import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridpredict.errors import ConfigError, DimensionMismatch, IncompatibleModel, InsufficientData
from gridpredict.grid import PowerGraph, default_network, normalized_adjacency
from gridpredict.koopman import load_model_dict
from gridpredict.simulator import default_params, generate_scenarios, simulate_scenarios
from gridpredict.stgcn import (
    StgcnConfig,
    StgcnModel,
    WindowIndex,
    incremental_predict,
    init_params,
    network_forward,
    st_block_forward,
    stgcn_forward,
    stream_predict,
    train_stgcn,
)

G9 = default_network()
SMALL = dict(blocks=((1, 4, 8), (8, 4, 8)), optimizer="adam")


def random_model(M=16, Kt=3, seed=0, g=G9, scale=0.3):
    cfg = StgcnConfig(M=M, Kt=Kt, seed=seed, **SMALL)
    rng = np.random.default_rng(seed + 99)
    params = {k: v + scale * rng.normal(size=v.shape) for k, v in init_params(cfg).items()}
    return StgcnModel(cfg, g, params, mean=60.0, std=0.01)


def history(T, n=9, seed=0):
    rng = np.random.default_rng(seed)
    return 60.0 + 0.01 * np.cumsum(rng.normal(size=(T, n)), axis=0) / np.sqrt(T)


def test_default_config():
    cfg = StgcnConfig()
    assert (cfg.M, cfg.Kt, cfg.batch_size, cfg.optimizer) == (200, 3, 16, "sgd")
    assert cfg.blocks == ((1, 32, 64), (64, 32, 64))
    assert cfg.time_lengths() == [200, 196, 192, 1]


@pytest.mark.parametrize("bad", [dict(Kt=1), dict(M=8, Kt=3), dict(blocks=((1, 2, 2),)),
                                 dict(blocks=((1, 2, 4), (3, 2, 2))), dict(optimizer="rmsprop")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        StgcnConfig(**bad)


@given(st.integers(2, 6), st.integers(1, 30))
@settings(max_examples=30)
def test_shrink_bookkeeping(Kt, extra):
    M = 4 * (Kt - 1) + extra
    cfg = StgcnConfig(M=M, Kt=Kt, blocks=((1, 2, 3), (3, 2, 2)))
    p = init_params(cfg)
    A = normalized_adjacency(G9)
    trace = []
    y = network_forward(np.random.default_rng(Kt).normal(size=(2, M, 9)), p, A, trace=trace)
    lengths = [t.shape[1] for t in trace]
    # inputs of: block1 conv1, block1 conv2, block2 conv1, block2 conv2, output conv
    assert lengths == [M, M - (Kt - 1), M - 2 * (Kt - 1), M - 3 * (Kt - 1), M - 4 * (Kt - 1)]
    assert cfg.time_lengths() == [M, M - 2 * (Kt - 1), M - 4 * (Kt - 1), 1]
    assert y.shape == (2, 9)


def test_st_block_lengths_default_setting():
    cfg = StgcnConfig()
    p = init_params(cfg)
    A = normalized_adjacency(G9)
    h = st_block_forward(np.zeros((1, 200, 9, 1)), p, A, "b1")
    assert h.shape == (1, 196, 9, 64)
    assert st_block_forward(h, p, A, "b2").shape == (1, 192, 9, 64)


def test_single_node_graph_is_pure_temporal():
    g = PowerGraph.from_lists([(1, "G")], [])
    m = random_model(g=g)
    np.testing.assert_array_equal(m.Ahat, [[1.0]])
    x = history(16, n=1)
    # with Ahat = [[1]] the graph conv is the channel map theta alone
    p = m.params
    xa = ((x - 60.0) / 0.01)[None, :, :, None]
    from gridpredict import neural as nn

    h = xa
    for b in ("b1", "b2"):
        h = nn.causal_temporal_conv(h, p[f"{b}_t1_W"], p[f"{b}_t1_b"])
        h = np.maximum(h @ p[f"{b}_gc"], 0.0)
        h = nn.causal_temporal_conv(h, p[f"{b}_t2_W"], p[f"{b}_t2_b"])
    h = nn.causal_temporal_conv(h, p["out_t_W"], p["out_t_b"])
    y = (h @ p["out_fc_W"] + p["out_fc_b"])[0, 0, :, 0] * 0.01 + 60.0
    np.testing.assert_allclose(m.forward(x), y, atol=1e-12)


def test_zero_weights_constant_output():
    m = random_model()
    m.params = {k: np.zeros_like(v) if "_W" in k or k.endswith("_gc") else v for k, v in m.params.items()}
    a = m.forward(history(16, seed=1))
    b = m.forward(history(16, seed=2))
    np.testing.assert_array_equal(a, b)
    assert np.all(a == a[0])


def test_forward_shape_errors():
    m = random_model()
    with pytest.raises(DimensionMismatch):
        m.forward(np.zeros((15, 9)))
    with pytest.raises(DimensionMismatch):
        m.forward(np.zeros((16, 8)))


def test_constant_series_predicts_constant():
    rng = np.random.default_rng(0)
    noise = 1e-5
    C = 60.0 + rng.normal(scale=noise, size=(300, 9))
    m = train_stgcn([C], StgcnConfig(M=24, epochs=20, batches_per_epoch=10, **SMALL), G9)
    assert np.max(np.abs(m.forward(C[-24:]) - 60.0)) <= 3 * noise


@pytest.fixture(scope="module")
def tiny_scenario():
    g = G9
    sc = generate_scenarios(g, 2, "High", 1, seed=0)
    return simulate_scenarios(g, default_params(g), sc, 5.0)[0].frequencies[:250]


def test_overfit_tiny_scenario(tiny_scenario):
    cfg = StgcnConfig(M=24, epochs=200, batches_per_epoch=4, learning_rate=3e-3, **SMALL)
    m = train_stgcn([tiny_scenario], cfg, G9)
    meta = m.training_meta
    assert meta["initial_loss"] / meta["final_loss"] >= 10.0
    assert len(meta["loss_history"]) == 200


def test_training_deterministic(tiny_scenario):
    cfg = StgcnConfig(M=24, epochs=3, batches_per_epoch=3, **SMALL)
    a = train_stgcn([tiny_scenario], cfg, G9)
    b = train_stgcn([tiny_scenario], cfg, G9)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.to_json() == b.to_json()


def test_training_input_errors(tiny_scenario):
    cfg = StgcnConfig(M=24, epochs=1, **SMALL)
    with pytest.raises(InsufficientData):
        train_stgcn([], cfg, G9)
    with pytest.raises(InsufficientData):
        train_stgcn([tiny_scenario[:20]], cfg, G9)
    with pytest.raises(DimensionMismatch):
        train_stgcn([tiny_scenario[:, :8]], cfg, G9)


def test_window_index_alignment():
    X = np.arange(30.0).reshape(10, 3)
    w = WindowIndex([X], 4, first_target=0)
    assert len(w) == 10 - 4
    b = w.batch(np.arange(len(w)))
    for x, y in zip(b.inputs, b.targets):
        np.testing.assert_array_equal(y, x[-1] + 3.0)  # next row
    assert len(WindowIndex([X], 4, first_target=7)) == 10 - 1 - 6


def test_incremental_examples():
    m = random_model()
    w = history(16)
    np.testing.assert_array_equal(incremental_predict(m, w, 1)[0], stgcn_forward(m, w))
    assert incremental_predict(m, w, 0).shape == (0, 9)
    # manual chaining with hand-shifted windows
    y1 = stgcn_forward(m, w)
    w1 = np.vstack([w[1:], y1])
    y2 = stgcn_forward(m, w1)
    w2 = np.vstack([w1[1:], y2])
    y3 = stgcn_forward(m, w2)
    np.testing.assert_array_equal(incremental_predict(m, w, 3), np.stack([y1, y2, y3]))


@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 1000))
@settings(max_examples=20)
def test_window_algebra(a, b, seed):
    m = random_model(seed=seed % 3)
    w = history(16, seed=seed)
    full = incremental_predict(m, w, a + b)
    head = incremental_predict(m, w, a)
    advanced = np.vstack([w, head])[a:]
    tail = incremental_predict(m, advanced, b)
    np.testing.assert_array_equal(full, np.vstack([head, tail]))


def test_batched_and_streaming_match_exact():
    m = random_model(M=20)
    W = np.stack([history(20, seed=s) for s in range(3)])
    exact = incremental_predict(m, W, 12)
    for i in range(3):
        np.testing.assert_array_equal(exact[:, i], incremental_predict(m, W[i], 12))
    np.testing.assert_allclose(stream_predict(m, W, 12), exact, rtol=0, atol=1e-12)
    assert stream_predict(m, W[0], 0).shape == (0, 9)


def test_node_permutation_equivariance():
    m = random_model(seed=4)
    order = [7, 3, 9, 1, 5, 2, 8, 4, 6]
    gp = G9.permuted(order)
    perm = [G9.index(b) for b in order]
    mp = StgcnModel(m.config, gp, m.params, m.mean, m.std)
    w = history(16, seed=5)
    np.testing.assert_allclose(incremental_predict(mp, w[:, perm], 5), incremental_predict(m, w, 5)[:, perm],
                               atol=1e-12)


def test_json_roundtrip():
    m = random_model(seed=2)
    d = json.loads(m.to_json())
    assert d["type"] == "stgcn" and d["graph_fingerprint"] == G9.fingerprint()
    m2 = load_model_dict(d)
    w = history(16)
    np.testing.assert_array_equal(m2.forward(w), m.forward(w))
    d["graph_fingerprint"] = "0" * 64
    with pytest.raises(IncompatibleModel):
        StgcnModel.from_dict(d)
