import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from iam import cell as iam
from iam import numerics as nx
from iam import training as tr
from iam.numerics import ContractError, NonFiniteError, Tensor


def params64(cfg, seed=0, scale=1.0):
    store = iam.init_params(cfg, nx.Rng(seed), np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, p in store.items():
        # non-zero biases and norm params so every term is exercised
        if name.endswith(".b") or ".norm." in name:
            store[name] = p + 0.1 * rng.normal(size=p.shape)
        else:
            store[name] = p * scale
    return store


def as_dict(store):
    return {n: np.asarray(p, dtype=np.float64) for n, p in store.items()}


SMALL = iam.CellConfig(d=16, C=5, F=8, S=3, heads=2)


# ------------------------------------------------------------------- config

@pytest.mark.parametrize("kwargs", [dict(d=18), dict(S=0), dict(heads=3), dict(dropout=1.0),
                                    dict(query="hidden"), dict(gate="matrix")])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ContractError):
        iam.CellConfig(**kwargs)


def test_config_roundtrip_and_dims():
    cfg = iam.CellConfig(d=32, C=7, F=5, S=9, heads=4, dropout=0.25, query="frame")
    assert (cfg.key_dim, cfg.head_dim, cfg.value_head_dim) == (8, 2, 8)
    assert iam.CellConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg


def test_param_shapes():
    cfg = iam.CellConfig(d=16, C=5, F=8, S=3, heads=2)
    P = iam.init_params(cfg, nx.Rng(0))
    assert P["E_x.W"].shape == (8, 16)
    assert P["E_Q.W"].shape == (5, 4)
    assert P["E_K.W"].shape == (5, 4)
    assert P["mha.q.W"].shape == (4, 4)
    assert P["mha.v.W"].shape == (16, 16)
    assert P["mha.o.W"].shape == (16, 16)
    assert P["ffn.fc1.W"].shape == (16, 64)
    assert P["gate.w1.W"].shape == (32, 8)
    assert P["gate.w2.W"].shape == (8, 16)
    assert P["cls.W"].shape == (16, 5)
    assert P.dtype == np.float32
    scalar = iam.init_params(iam.CellConfig(d=16, C=5, F=8, S=3, heads=2, gate="scalar"), nx.Rng(0))
    assert scalar["gate.w2.W"].shape == (8, 1)
    frame = iam.init_params(iam.CellConfig(d=16, C=5, F=8, S=3, heads=2, query="frame"), nx.Rng(0))
    assert "E_Q.W" not in frame and frame["E_Qx.W"].shape == (8, 4)


def test_init_deterministic_and_bounded():
    a = iam.init_params(SMALL, nx.Rng(3))
    b = iam.init_params(SMALL, nx.Rng(3))
    for (n, x), (_, y) in zip(a.items(), b.items()):
        assert x.tobytes() == y.tobytes(), n
    W = a["ffn.fc2.W"]
    assert np.abs(W).max() <= 1 / math.sqrt(64)
    assert np.all(a["ffn.fc2.b"] == 0) and np.all(a["ffn.norm.gain"] == 1)


def test_decay_exempt():
    assert iam.decay_exempt("cls.b") and iam.decay_exempt("ffn.norm.gain")
    assert not iam.decay_exempt("cls.W")


# ------------------------------------------------------------------- memory

def push_ids(mem, ids):
    for i in ids:
        mem.push(Tensor(np.full((1, 2), float(i))), Tensor(np.full((1, 8), float(i))))


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 12), st.integers(0, 60))
def test_memory_fifo_property(S, n):
    mem = iam.IndexedMemory(S)
    push_ids(mem, range(n))
    assert len(mem) == min(n, S)
    kept = [int(e.key.data[0, 0]) for e in mem]
    assert kept == list(range(max(0, n - S), n))
    assert [int(e.value.data[0, 0]) for e in mem] == kept


def test_memory_eviction_is_exactly_oldest():
    mem = iam.IndexedMemory(3)
    push_ids(mem, [10, 11, 12])
    push_ids(mem, [13])
    assert [int(e.key.data[0, 0]) for e in mem] == [11, 12, 13]


def test_memory_copy_is_independent():
    mem = iam.IndexedMemory(2)
    push_ids(mem, [1])
    other = mem.copy()
    push_ids(other, [2, 3])
    assert len(mem) == 1 and len(other) == 2


def test_memory_capacity_contract():
    with pytest.raises(ContractError):
        iam.IndexedMemory(0)


def test_memory_footprint():
    assert iam.memory_footprint_bytes(d=2048, S=30, element_bytes=4) == 307_200
    assert iam.memory_footprint_bytes(d=64, S=10, element_bytes=4) == 3_200
    assert iam.memory_footprint_bytes(d=64, S=0) == 0
    cfg = iam.CellConfig(d=64, S=10)
    assert iam.memory_footprint_bytes(cfg, 8) == 6_400


def test_full_memory_nbytes_matches_footprint():
    cfg = iam.CellConfig(d=32, C=4, F=6, S=5, heads=2)
    P = iam.init_params(cfg, nx.Rng(1))
    state = iam.IamState.initial(cfg)
    X = np.random.default_rng(0).normal(size=(9, 6)).astype(np.float32)
    for x in X:
        _, _, state, _ = iam.step(state, x, P, cfg)
    assert state.memory.nbytes == iam.memory_footprint_bytes(cfg, 4)


# ------------------------------------------------------------------- mha

def test_mha_single_slot():
    P = as_dict(params64(SMALL, 1))
    rng = np.random.default_rng(2)
    q, K, V = rng.normal(size=4), rng.normal(size=(1, 4)), rng.normal(size=(1, 16))
    out, w = iam.mha(q, K, V, P, 2)
    np.testing.assert_array_equal(w, np.ones((2, 1)))
    expected = (V[0] @ P["mha.v.W"] + P["mha.v.b"]) @ P["mha.o.W"] + P["mha.o.b"]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_mha_duplicate_keys_split_evenly():
    P = as_dict(params64(SMALL, 1))
    rng = np.random.default_rng(3)
    k = rng.normal(size=4)
    for _ in range(5):
        _, w = iam.mha(rng.normal(size=4) * 5, np.stack([k, k]), rng.normal(size=(2, 16)), P, 2)
        np.testing.assert_allclose(w, np.full((2, 2), 0.5), atol=1e-15)


def test_mha_matches_direct_formula():
    P = as_dict(params64(SMALL, 4))
    rng = np.random.default_rng(4)
    q, K, V = rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=(4, 16))
    out, w = iam.mha(q, K, V, P, 2)
    ref_out, ref_w = ref.mha(q, K, V, P, 2)
    np.testing.assert_allclose(out.data, ref_out, rtol=0, atol=1e-10)
    np.testing.assert_allclose(w, ref_w, rtol=0, atol=1e-10)


def test_mha_batched_equals_rows():
    P = as_dict(params64(SMALL, 5))
    rng = np.random.default_rng(5)
    q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 16))
    out, w = iam.mha(q, K, V, P, 2)
    for b in range(3):
        o, wb = ref.mha(q[b], K[b], V[b], P, 2)
        np.testing.assert_allclose(out.data[b], o, atol=1e-10)
        np.testing.assert_allclose(w[b], wb, atol=1e-10)


def test_mha_empty_memory_rejected():
    P = as_dict(params64(SMALL))
    with pytest.raises(ContractError):
        iam.mha(np.zeros(4), np.zeros((0, 4)), np.zeros((0, 16)), P, 2)


# ------------------------------------------------------------------- ffn

def test_ffn_zero_inner_weights_passthrough():
    P = as_dict(params64(SMALL, 6))
    for n in ("ffn.fc1.W", "ffn.fc1.b", "ffn.fc2.W", "ffn.fc2.b"):
        P[n] = np.zeros_like(P[n])
    x = np.random.default_rng(6).normal(size=16)
    np.testing.assert_array_equal(iam.ffn(x, P).data, x)


def test_ffn_branch_recomputed():
    P = as_dict(params64(SMALL, 7))
    x = np.random.default_rng(7).normal(size=16)
    out = iam.ffn(x, P).data
    assert out.shape == (16,)
    np.testing.assert_allclose(out - x, ref.ffn(x, P) - x, rtol=0, atol=1e-10)


# --------------------------------------------------------- inductive attention

def memory_from(keys, values):
    mem = iam.IndexedMemory(len(keys))
    for k, v in zip(keys, values):
        mem.push(Tensor(k[None]), Tensor(v[None]))
    return mem


def test_inductive_attention_single_entry():
    P = as_dict(params64(SMALL, 8))
    rng = np.random.default_rng(8)
    mem = memory_from(rng.normal(size=(1, 4)), rng.normal(size=(1, 16)))
    _, w = iam.inductive_attention(nx.softmax(rng.normal(size=(1, 5))), mem, P, SMALL)
    np.testing.assert_array_equal(w, np.ones((1, 2, 1)))


def test_inductive_attention_identical_keys():
    P = as_dict(params64(SMALL, 9))
    rng = np.random.default_rng(9)
    k = rng.normal(size=4)
    mem = memory_from(np.stack([k, k]), rng.normal(size=(2, 16)))
    _, w = iam.inductive_attention(nx.softmax(rng.normal(size=(1, 5))), mem, P, SMALL)
    np.testing.assert_allclose(w, np.full((1, 2, 2), 0.5), atol=1e-15)


def test_inductive_attention_compositional_oracle():
    P = as_dict(params64(SMALL, 10))
    rng = np.random.default_rng(10)
    K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 16))
    y = ref.softmax(rng.normal(size=5))
    o, w = iam.inductive_attention(y[None], memory_from(K, V), P, SMALL)
    q = ref.relu(ref.dense(y, P, "E_Q"))
    a, ref_w = ref.mha(q, K, V, P, 2)
    np.testing.assert_allclose(o.data[0], ref.ffn(a, P), rtol=0, atol=1e-10)
    np.testing.assert_allclose(w[0], ref_w, atol=1e-10)


def test_inductive_attention_empty_rejected():
    with pytest.raises(ContractError):
        iam.inductive_attention(np.full((1, 5), 0.2), iam.IndexedMemory(3),
                                as_dict(params64(SMALL)), SMALL)


def test_permuting_identical_key_slots_leaves_output_unchanged():
    P = as_dict(params64(SMALL, 11))
    rng = np.random.default_rng(11)
    k = rng.normal(size=4)
    K = np.stack([k, rng.normal(size=4), k])
    V = rng.normal(size=(3, 16))
    y = nx.softmax(rng.normal(size=(1, 5)))
    o1, w1 = iam.inductive_attention(y, memory_from(K, V), P, SMALL)
    perm = [2, 1, 0]
    o2, w2 = iam.inductive_attention(y, memory_from(K[perm], V[perm]), P, SMALL)
    np.testing.assert_allclose(w2, w1[..., perm], atol=1e-15)
    # slots 0 and 2 share a key but not a value: weights are equal, so the sum is symmetric
    np.testing.assert_allclose(o2.data, o1.data, atol=1e-12)


def test_permuting_distinct_slots_permutes_weights():
    P = as_dict(params64(SMALL, 12))
    rng = np.random.default_rng(12)
    K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 16))
    y = nx.softmax(rng.normal(size=(1, 5)))
    o1, w1 = iam.inductive_attention(y, memory_from(K, V), P, SMALL)
    perm = [1, 2, 0]
    o2, w2 = iam.inductive_attention(y, memory_from(K[perm], V[perm]), P, SMALL)
    np.testing.assert_allclose(w2, w1[..., perm], atol=1e-15)
    np.testing.assert_allclose(o2.data, o1.data, atol=1e-12)


# ------------------------------------------------------------------- gate

def test_gate_zero_weights_is_half():
    P = as_dict(iam.zero_params(SMALL))
    rng = np.random.default_rng(13)
    g = iam.gate(rng.normal(size=16), rng.normal(size=16), P).data
    np.testing.assert_array_equal(g, np.full(16, 0.5))


def test_gate_direct_formula_and_range():
    P = as_dict(params64(SMALL, 14))
    rng = np.random.default_rng(14)
    for _ in range(20):
        o, e = rng.normal(size=16) * 3, rng.normal(size=16) * 3
        g = iam.gate(o, e, P).data
        direct = ref.sigmoid(ref.dense(ref.relu(ref.dense(np.concatenate([o, e]), P, "gate.w1")),
                                       P, "gate.w2"))
        np.testing.assert_allclose(g, direct, rtol=0, atol=1e-12)
        assert np.all((g > 0) & (g < 1))


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_gate_boundary_by_weight_scaling(sign):
    cfg = SMALL
    P = params64(cfg, 15)
    P["gate.w1.W"] = np.abs(P["gate.w1.W"])
    P["gate.w1.b"] = np.full_like(P["gate.w1.b"], 1.0)
    P["gate.w2.W"] = np.full_like(P["gate.w2.W"], 1.0)
    P["gate.w2.b"] = np.zeros_like(P["gate.w2.b"])
    X = np.abs(np.random.default_rng(15).normal(size=(3, cfg.F)))
    gaps = []
    for scale in (1e-3, 1e-2, 1e3):
        Q = P.copy()
        Q["gate.w2.W"] = P["gate.w2.W"] * sign * scale
        state = iam.IamState.initial(cfg)
        for x in X:
            _, h, state, trace = iam.step(state, x, Q, cfg)
        target = trace.o.data[0] if sign > 0 else trace.e.data[0]
        gaps.append(np.max(np.abs(h.data - target)))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-9


# ------------------------------------------------------------------- step

def test_step_zero_params_t0():
    P = iam.zero_params(SMALL)
    x = np.random.default_rng(16).normal(size=SMALL.F)
    y, h, state, trace = iam.step(iam.IamState.initial(SMALL), x, P, SMALL)
    np.testing.assert_array_equal(trace.e.data, 0)
    np.testing.assert_array_equal(trace.o.data, 0)
    np.testing.assert_array_equal(trace.gate, 0.5)
    np.testing.assert_array_equal(h.data, 0)
    np.testing.assert_allclose(y.data, np.full(SMALL.C, 1 / SMALL.C), atol=1e-15)
    assert trace.attention is None
    assert state.t == 1 and len(state.memory) == 1 and state.last_prediction is not None


def test_initial_state_invariants():
    s = iam.IamState.initial(SMALL)
    assert s.t == 0 and s.last_prediction is None and len(s.memory) == 0


def test_memory_length_over_steps():
    P = params64(SMALL, 17)
    state = iam.IamState.initial(SMALL)
    X = np.random.default_rng(17).normal(size=(SMALL.S + 3, SMALL.F))
    lengths = []
    for x in X:
        _, _, state, _ = iam.step(state, x, P, SMALL)
        lengths.append(len(state.memory))
    assert lengths[0] == 1
    assert lengths[-1] == SMALL.S
    assert lengths == [min(i + 1, SMALL.S) for i in range(len(X))]


def test_equal_o_and_e_gives_e():
    o = np.random.default_rng(18).normal(size=16)
    for g in (np.zeros(16), np.full(16, 0.3), np.ones(16)):
        h = nx.add(nx.mul(g, o), nx.mul(nx.sub(1.0, g), o)).data
        np.testing.assert_allclose(h, o, atol=1e-15)


@pytest.mark.parametrize("query", ["prediction", "frame"])
@pytest.mark.parametrize("gate_mode", ["vector", "scalar"])
def test_step_sequence_matches_reference(query, gate_mode):
    cfg = iam.CellConfig(d=16, C=5, F=8, S=3, heads=2, query=query, gate=gate_mode)
    P = params64(cfg, 19)
    X = np.random.default_rng(19).normal(size=(8, cfg.F))
    ref_y, ref_h, ref_g, ref_att = ref.run_sequence(as_dict(P), cfg, X)
    state = iam.IamState.initial(cfg)
    for t, x in enumerate(X):
        y, h, state, trace = iam.step(state, x, P, cfg)
        np.testing.assert_allclose(y.data, ref_y[t], rtol=0, atol=1e-10)
        np.testing.assert_allclose(h.data, ref_h[t], rtol=0, atol=1e-10)
        np.testing.assert_allclose(trace.gate[0], np.broadcast_to(ref_g[t], trace.gate[0].shape),
                                   atol=1e-10)
        if t:
            np.testing.assert_allclose(trace.attention[0], ref_att[t], atol=1e-10)


def test_batched_step_equals_single_streams():
    cfg = SMALL
    P = params64(cfg, 20)
    X = np.random.default_rng(20).normal(size=(3, 6, cfg.F))
    state = iam.IamState.initial(cfg)
    batched = []
    for t in range(6):
        y, _, state, _ = iam.step(state, X[:, t], P, cfg)
        batched.append(y.data)
    for b in range(3):
        ys, _, _, _ = ref.run_sequence(as_dict(P), cfg, X[b])
        for t in range(6):
            np.testing.assert_allclose(batched[t][b], ys[t], atol=1e-10)


def test_attention_normalized_and_t0_contract():
    cfg = iam.CellConfig(d=32, C=6, F=10, S=8, heads=4)
    P = iam.init_params(cfg, nx.Rng(21))
    X = np.random.default_rng(21).normal(size=(100, cfg.F)).astype(np.float32)
    state = iam.IamState.initial(cfg)
    for t, x in enumerate(X):
        y, h, state, trace = iam.step(state, x, P, cfg)
        assert abs(float(y.data.sum()) - 1) < 1e-5 and np.all(y.data >= 0)
        if t == 0:
            assert np.all(trace.o.data == 0)
            expected = (1 - trace.gate[0]) * trace.e.data[0]
            np.testing.assert_allclose(h.data, expected, atol=1e-6)
        else:
            np.testing.assert_allclose(trace.attention.sum(axis=-1), 1.0, atol=1e-5)
            assert trace.attention.shape == (1, 4, min(t, cfg.S))


def test_step_dimension_mismatch():
    with pytest.raises(ContractError):
        iam.step(iam.IamState.initial(SMALL), np.zeros(SMALL.F + 1), params64(SMALL), SMALL)


def test_step_non_finite_names_stage():
    P = params64(SMALL)
    x = np.zeros(SMALL.F)
    x[0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        iam.step(iam.IamState.initial(SMALL), x, P, SMALL)
    assert info.value.where == "encode"


def test_dropout_only_in_training():
    cfg = iam.CellConfig(d=16, C=5, F=8, S=3, heads=2, dropout=0.5)
    P = params64(cfg, 22)
    X = np.random.default_rng(22).normal(size=(4, cfg.F))

    def run(training, seed):
        state = iam.IamState.initial(cfg)
        rng = nx.Rng(seed)
        for x in X:
            y, _, state, _ = iam.step(state, x, P, cfg, rng, training)
        return y.data

    np.testing.assert_array_equal(run(False, 0), run(False, 1))
    np.testing.assert_array_equal(run(True, 0), run(True, 0))
    assert not np.array_equal(run(True, 0), run(True, 1))
    ys, _, _, _ = ref.run_sequence(as_dict(P), cfg, X)
    np.testing.assert_allclose(run(False, 0), ys[-1], atol=1e-10)


# ------------------------------------------------------------ stop-gradient

def sequence_setup(seed=23, T=6):
    cfg = iam.CellConfig(d=16, C=5, F=8, S=4, heads=2)
    store = params64(cfg, seed)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(T, cfg.F))
    labels = rng.integers(0, cfg.C, size=T)
    mask = np.ones(T, dtype=bool)
    return cfg, store, X, labels, mask


def grads_for(store, fn):
    nx.gradient_of(fn, store)
    return {n: g.copy() for n, g in store.grads()}


def test_stop_gradient_equivalence_bit_exact():
    cfg, store, X, labels, mask = sequence_setup()
    frozen = tr.unroll(store.leaves(False), cfg, X, labels, mask)
    sources = [p.data.copy() for p in frozen.predictions]
    real = grads_for(store, lambda P: tr.unroll(P, cfg, X, labels, mask).loss)
    const = grads_for(store, lambda P: tr.unroll(P, cfg, X, labels, mask,
                                                 key_sources=sources).loss)
    for name in real:
        assert real[name].tobytes() == const[name].tobytes(), name
    # E_K itself still learns through the keys
    assert np.any(real["E_K.W"] != 0)
    loose = grads_for(store, lambda P: tr.unroll(P, cfg, X, labels, mask,
                                                 detach_keys=False).loss)
    assert any(not np.array_equal(real[n], loose[n]) for n in real)


def test_sequence_loss_matches_reference():
    cfg, store, X, labels, _ = sequence_setup(24)
    labels[1] = tr.MASK
    mask = labels != tr.MASK
    weights = np.linspace(0.5, 1.5, cfg.C)
    loss = tr.unroll(store, cfg, X, labels, mask, weights, 0.1).loss
    expected = ref.sequence_loss(as_dict(store), cfg, X, labels, weights, 0.1)
    assert abs(float(loss.data) - expected) < 1e-10


def test_sequence_gradient_check():
    report = tr.check_sequence_gradients(seed=0, samples=15)
    assert report.passed, report
    assert report.worst_rel_err < 1e-5


def test_gradient_check_frame_query():
    cfg = iam.CellConfig(d=16, C=5, F=8, S=4, heads=2, query="frame", gate="scalar")
    store = params64(cfg, 25)
    rng = np.random.default_rng(25)
    X, labels = rng.normal(size=(5, cfg.F)), rng.integers(0, cfg.C, size=5)
    mask = np.ones(5, dtype=bool)
    frozen = tr.unroll(store.leaves(False), cfg, X, labels, mask)
    sources = [p.data for p in frozen.predictions]
    report = nx.grad_check(lambda P: tr.unroll(P, cfg, X, labels, mask).loss, store,
                           samples=8, rng=nx.Rng(1),
                           numeric_fn=lambda P: tr.unroll(P, cfg, X, labels, mask,
                                                          key_sources=sources).loss)
    assert report.passed, report


# --------------------------------------------------------- first-order control

def test_first_order_zero_params_uniform():
    cfg = iam.FirstOrderConfig(d=8, C=4, F=5)
    P = iam.init_first_order(cfg, nx.Rng(0), np.float64)
    for n, p in P.items():
        P[n] = np.zeros_like(p)
    state = iam.FirstOrderState()
    for _ in range(3):
        y, state = iam.first_order_baseline_step(state, np.ones(5), P, cfg)
        np.testing.assert_allclose(y.data, np.full(4, 0.25), atol=1e-15)


def test_first_order_gradient_check():
    cfg = iam.FirstOrderConfig(d=8, C=4, F=5)
    store = iam.init_first_order(cfg, nx.Rng(1), np.float64)
    rng = np.random.default_rng(1)
    X, labels = rng.normal(size=(5, 5)), rng.integers(0, 4, size=5)

    def loss(P):
        state, total = iam.FirstOrderState(), 0.0
        for x, lab in zip(X, labels):
            y, state = iam.first_order_baseline_step(state, x, P, cfg)
            total = nx.add(total, tr.smoothed_weighted_ce(y, int(lab)))
        return total

    report = nx.grad_check(loss, store, samples=None)
    assert report.passed, report
