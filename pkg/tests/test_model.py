import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thpn import numerics as nx
from thpn.corpus import KBTriple
from thpn.model import THPN, Hyperparams, Provenance, gate, memory_hop, param_specs
from thpn.numerics import Tensor

from support import make_example, tiny_setup, tiny_vocab


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


# ---------------------------------------------------------------- hops


def test_single_item_memory_hop():
    q = T([0.3, -0.2])
    read, write = T([[1.0, 2.0]]), T([[5.0, 6.0]])
    p, c, _ = memory_hop(q, read, write)
    assert p.data.tolist() == [1.0]
    np.testing.assert_array_equal(c.data, [5.0, 6.0])


def test_identical_items_split_attention():
    p, _, _ = memory_hop(T([1.0, 1.0]), T([[0.4, 0.1], [0.4, 0.1]]), T([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(p.data, [0.5, 0.5])


def test_single_hop_encoder_matches_hand_rolled():
    model, ex, _ = tiny_setup(hops=1)
    f = model.featurize(ex)
    C, q_final, q_init = model.encode(ex)
    M1, M2 = model.store["enc_M1"].data, model.store["enc_M2"].data
    mem1 = np.array([sum(M1[i] * w for i, w in zip(ri, rw)) for ri, rw in zip(f["ctx_idx"], f["ctx_w"])])
    mem2 = np.array([sum(M2[i] * w for i, w in zip(ri, rw)) for ri, rw in zip(f["ctx_idx"], f["ctx_w"])])
    q = np.mean([M1[model.vocab.index(t)] for t in ex.context.query], axis=0)
    p = softmax(mem1 @ q)
    c = p @ mem2
    np.testing.assert_allclose(q_init.data, q, atol=1e-12)
    np.testing.assert_allclose(C[0].data, c, atol=1e-12)
    np.testing.assert_allclose(q_final.data, q + c, atol=1e-12)


# ---------------------------------------------------------------- answer summary


def test_answer_summary_zero_inputs_give_zero():
    model, ex, _ = tiny_setup()
    model.store["emb"].data[...] = 0.0
    h_a = model.encode_answers(ex, T(np.zeros(8)))
    np.testing.assert_array_equal(h_a.data, 0.0)


def test_answer_summary_single_token_direct_formula():
    model, _, _ = tiny_setup()
    ex = make_example([("a",)], [], [("b",)], ("b",))
    # the flat retrieved memory holds "b" and the sentinel
    c = np.random.default_rng(0).normal(size=8)
    h_a = model.encode_answers(ex, T(c))
    E = model.store["emb"].data
    W1, W2 = model.store["ans_W1"].data, model.store["ans_W2"].data
    inner = sum(np.concatenate([c, E[model.vocab.index(t)]]) @ W1 for t in ("b", "$$$"))
    np.testing.assert_allclose(h_a.data, np.tanh(inner) @ W2, atol=1e-12)


def test_answer_summary_order_invariant():
    model, _, _ = tiny_setup()
    c = T(np.random.default_rng(1).normal(size=8))
    a = model.encode_answers(make_example([("a",)], [], [("b", "c", "d")], ()), c)
    b = model.encode_answers(make_example([("a",)], [], [("d", "b", "c")], ()), c)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_answer_summary_zero_without_retrieval():
    model, ex, _ = tiny_setup(no_ir=True)
    np.testing.assert_array_equal(model.encode_answers(ex, T(np.ones(8))).data, 0.0)


# ---------------------------------------------------------------- hop attention and gate


def test_hop_attention_single_hop_and_identical_rows():
    model, _, _ = tiny_setup()
    rng = np.random.default_rng(2)
    h = T(rng.normal(size=8))
    c1 = rng.normal(size=8)
    H, alpha = model.hop_attention(h, T([c1]))
    np.testing.assert_allclose(H.data, c1, atol=1e-15)
    H, alpha = model.hop_attention(h, T([c1, c1, c1]))
    np.testing.assert_allclose(H.data, c1, atol=1e-12)
    assert abs(alpha.data.sum() - 1) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_hop_attention_direct_formula(seed):
    model, _, _ = tiny_setup()
    rng = np.random.default_rng(seed)
    h, C = rng.normal(size=8), rng.normal(size=(3, 8))
    H, alpha = model.hop_attention(T(h), T(C))
    W, b, v = (model.store[n].data for n in ("eta_W", "eta_b", "eta_v"))
    scores = np.array([v @ np.tanh(np.concatenate([h, c]) @ W + b) for c in C])
    a = softmax(scores)
    np.testing.assert_allclose(alpha.data, a, atol=1e-12)
    np.testing.assert_allclose(H.data, a @ C, atol=1e-12)
    assert abs(alpha.data.sum() - 1) <= 1e-12


def test_gate_examples():
    rng = np.random.default_rng(3)
    h_a, h = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_array_equal(gate(T(np.zeros(5)), T(h)).data, 0.0)
    np.testing.assert_allclose(gate(T(h_a), T(np.zeros(5))).data, 0.5 * h_a, atol=0)
    np.testing.assert_allclose(gate(T(h_a), T(h)).data, h_a / (1 + np.exp(-h_a * h)), atol=1e-12)


def test_no_gate_passes_answer_summary_through():
    model, ex, _ = tiny_setup(no_gate=True)
    rng = np.random.default_rng(4)
    h_a, h = T(rng.normal(size=8)), T(rng.normal(size=8))
    C = T(rng.normal(size=(3, 8)))
    _, _, H_g = model.decoder_state(h, h_a, C, None)
    assert H_g is h_a


def test_decoder_state_formula():
    model, _, _ = tiny_setup()
    rng = np.random.default_rng(5)
    h_a, h, C = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(3, 8))
    state, H_c, H_g = model.decoder_state(T(h), T(h_a), T(C), None)
    expect = np.tanh(np.concatenate([h, H_c.data, h_a / (1 + np.exp(-h_a * h))]) @ model.store["W_s"].data)
    np.testing.assert_allclose(state.data, expect, atol=1e-12)


def test_first_step_state_is_answer_summary():
    # at t=0 the GRU state is h_a itself: changing W_s leaves step 0 untouched
    model, ex, _ = tiny_setup()
    ctx = model._prepare(ex)
    h0, d0 = model.step(0, model.sos_id, None, ctx, False, None)
    model.store["W_s"].data[...] += 1.0
    ctx = model._prepare(ex)
    h0b, d0b = model.step(0, model.sos_id, None, ctx, False, None)
    np.testing.assert_array_equal(h0.data, h0b.data)
    h1b, _ = model.step(1, model.sos_id, h0b, ctx, False, None)
    model.store["W_s"].data[...] -= 1.0
    ctx = model._prepare(ex)
    h1, _ = model.step(1, model.sos_id, h0, ctx, False, None)
    assert not np.allclose(h1.data, h1b.data)


# ---------------------------------------------------------------- decoder memory and distributions


def run_step(model, ex):
    ctx = model._prepare(ex)
    h, dists = model.step(0, model.sos_id, None, ctx, False, None)
    mem = model.decoder_memnn(h, ctx[4], ctx[0])
    return ctx[0], dists, mem


def test_sentinel_only_retrieved_segment():
    model, _, _ = tiny_setup(no_ir=True)
    ex = make_example([("a", "b")], [], [], ("a",))
    f, dists, mem = run_step(model, ex)
    p2 = mem["p"][1].data
    assert p2[f["ret_seg"]].tolist() == [1.0]
    assert np.all(p2[f["hist_seg"]] == 0.0)
    P_r = dists["P_r"].data
    assert P_r[-1] == 1.0 and P_r[:-1].sum() == 0.0


def test_short_history_hop3_sums_to_one():
    model, _, _ = tiny_setup()
    ex = make_example([("a",)], [], [("b", "c")], ("a",))
    f, _, mem = run_step(model, ex)
    p3 = mem["p"][2].data
    assert f["n_ctx"] == 2
    assert abs(p3[:2].sum() - 1) <= 1e-12
    assert np.all(p3[2:] == 0.0)


def test_all_retrieved_masked_puts_mass_on_sentinel():
    model, _, _ = tiny_setup()
    kb = [KBTriple("b", "d", "c")]
    ex = make_example([("a",)], kb, [("b", "c")], ("a",))
    assert not ex.retrieved.r_r.any()
    _, dists, _ = run_step(model, ex)
    assert dists["P_r"].data[-1] == 1.0


def test_distribution_sums_and_masks():
    model, ex, _ = tiny_setup()
    f, dists, _ = run_step(model, ex)
    for key, mask in (("P_v", None), ("P_h", f["P_h_mask"]), ("P_r", f["P_r_mask"])):
        p = dists[key].data
        assert abs(p.sum() - 1) <= 1e-12
        if mask is not None:
            assert np.all(p[~mask] == 0.0)


# ---------------------------------------------------------------- selection


def selection_setup():
    model, _, _ = tiny_setup()
    kb = [KBTriple("a", "d", "e")]
    ex = make_example([("c", "a")], kb, [("f", "e")], ())
    return model, ex


def test_pattern_pointer_has_priority():
    model, ex = selection_setup()
    P_v = np.full(12, 1 / 12)
    P_h = np.array([0, 1.0, 0, 0])     # "a" (entity) in history
    P_r = np.array([1.0, 0, 0])        # "f" in the retrieved answer
    tok, prov = model.select_token(P_v, P_h, P_r, ex.context, ex.retrieved)
    assert (tok, prov) == ("f", Provenance("retrieved", 0))


def test_both_sentinels_fall_back_to_vocab():
    model, ex = selection_setup()
    P_v = np.zeros(12)
    P_v[model.vocab.index("g")] = 1.0
    tok, prov = model.select_token(P_v, np.array([0, 0, 0, 1.0]), np.array([0, 0, 1.0]), ex.context, ex.retrieved)
    assert tok == "g" and prov.source == "vocab"


def test_history_pointer_on_kb_slot_emits_object():
    model, ex = selection_setup()
    tok, prov = model.select_token(np.full(12, 1 / 12), np.array([0, 0, 1.0, 0]), np.array([0, 0, 1.0]),
                                   ex.context, ex.retrieved)
    assert tok == "e" and prov == Provenance("history", 2)


def test_no_ptr_selects_from_vocab_only():
    model, ex, _ = tiny_setup(no_ptr=True)
    toks, prov = model.generate(ex, max_len=6)
    assert all(p.source == "vocab" for p in prov)


# ---------------------------------------------------------------- generation


def test_max_len_zero_is_empty():
    model, ex, _ = tiny_setup()
    assert model.generate(ex, max_len=0) == ([], [])


def test_generation_deterministic_and_provenance_unmasked():
    model, ex, _ = tiny_setup()
    a = model.generate(ex, max_len=10)
    b = model.generate(ex, max_len=10)
    assert a == b
    for tok, p in zip(*a):
        if p.source == "history":
            assert ex.context.r_h[p.position] and p.position != ex.context.sentinel
            assert ex.context.items[p.position].emit_token == tok
        elif p.source == "retrieved":
            assert ex.retrieved.r_r[p.position] and p.position != ex.retrieved.sentinel
            assert ex.retrieved.flat_items[p.position].emit_token == tok


def test_trace_records_each_step():
    model, ex, _ = tiny_setup()
    trace = []
    toks, _ = model.generate(ex, max_len=5, trace=trace)
    assert len(trace) >= len(toks)
    assert trace[0]["P_h"].shape == (len(ex.context),)
    assert trace[0]["P_r"].shape == (len(ex.retrieved),)


def test_param_specs_shapes():
    specs = dict(param_specs(12, 8, 3))
    assert specs["enc_M4"] == (12, 8) and "enc_M5" not in specs
    assert specs["ans_W1"] == (16, 8) and specs["eta_W"] == (16, 8)
    assert specs["W_s"] == (24, 8) and specs["W_v"] == (16, 12)
    assert specs["dec_D4"] == (12, 8)


def test_initialisation_scheme():
    model = THPN(tiny_vocab(), Hyperparams(d=8), nx.RngState(0))
    U = model.store["gru_Uz"].data
    assert np.max(np.abs(U.T @ U - np.eye(8))) <= 1e-8
    assert np.all(model.store["gru_bz"].data == 0) and np.all(model.store["eta_b"].data == 0)
    big = THPN(tiny_vocab(), Hyperparams(d=64), nx.RngState(0)).store["W_v"].data
    assert abs(big.std() - 0.01) < 0.002


def test_hyperparams_text_round_trip_and_validation():
    hp = Hyperparams(d=32, theta=0.5, no_gate=True, loss_weights=(1.0, 0.5, 2.0))
    assert Hyperparams.from_text(hp.to_text()) == hp
    with pytest.raises(nx.ConfigurationError):
        Hyperparams(theta=0.0).validate()
    with pytest.raises(nx.ConfigurationError):
        Hyperparams.from_text("bogus=1\n")
