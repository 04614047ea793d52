import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thpn import numerics as nx
from thpn.corpus import EOS, KBTriple, SyntheticConfig, build_context, generate_synthetic
from thpn.model import Hyperparams
from thpn.numerics import ConfigurationError, Tensor
from thpn.retrieval import empty_retrieval
from thpn.training import (CheckpointError, PointerTargets, apply_ablation, build_targets,
                           build_training_repository, checkpoint_bytes, load_checkpoint, loss,
                           prepare_examples, save_checkpoint, train, train_step, training_entities,
                           vocab_for)

from support import make_example, tiny_setup, tiny_vocab


def small_corpus(n=50, style="slots", seed=0):
    ds = generate_synthetic(SyntheticConfig(n_dialogues=n, task_style=style, seed=seed))
    return ds, vocab_for(ds)


def examples_for(ds, hp, exclude_self=True):
    repo = None if hp.no_ir else build_training_repository(ds, hp.method)
    return prepare_examples(ds, repo, hp, training_entities(ds), exclude_self=exclude_self), repo


# ---------------------------------------------------------------- targets


def test_absent_token_targets_sentinels():
    ex = make_example([("a", "b")], [], [("c",)], ("g",))
    tg = build_targets(ex.gold, ex.context, ex.retrieved, tiny_vocab())
    assert tg[0] == PointerTargets(tiny_vocab().index("g"), ex.context.sentinel, ex.retrieved.sentinel)
    assert tg[-1].vocab == tiny_vocab().index(EOS)


def test_last_occurrence_rule():
    kb = [KBTriple("e", "g", "f")]
    history = [("c", "e", "a", "b"), ("d",), ("b", "a", "e", "c")]
    ctx = build_context(history, kb)
    positions = [i for i, it in enumerate(ctx.items) if it.emit_token == "e" and ctx.r_h[i]]
    assert positions == [1, 7]
    (t, _) = build_targets(("e",), ctx, empty_retrieval(), tiny_vocab())
    assert t.history == 7


def test_masked_new_token_targets_sentinel():
    ex = make_example([("a", "b")], [], [("c",)], ("a",))
    (t, _) = build_targets(ex.gold, ex.context, ex.retrieved, tiny_vocab())
    assert t.history == ex.context.sentinel
    (t, _) = build_targets(ex.gold, ex.context, ex.retrieved, tiny_vocab(), mask_history_new=False)
    assert t.history == 0


def test_unknown_gold_token_maps_to_unk():
    ex = make_example([("a",)], [], [], ("zzz",))
    (t, _) = build_targets(ex.gold, ex.context, ex.retrieved, tiny_vocab())
    assert t.vocab == tiny_vocab().index("<unk>")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=4), min_size=1, max_size=5),
       st.lists(st.tuples(*[st.sampled_from("abcdefg")] * 3), max_size=3),
       st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=4), max_size=3),
       st.lists(st.sampled_from("abcdefg"), max_size=6), st.booleans(), st.booleans())
def test_targets_never_point_at_masked_slots(history, triples, answers, gold, mh, mr):
    if len(history) % 2 == 0:
        history = history[:-1]
    kb = [KBTriple(*t) for t in triples]
    ex = make_example([tuple(u) for u in history], kb, [tuple(a) for a in answers], tuple(gold),
                      mask_new=mh, mask_retrieved=mr)
    for t in build_targets(ex.gold, ex.context, ex.retrieved, tiny_vocab(), mh, mr):
        assert t.history == ex.context.sentinel or ex.context.r_h[t.history]
        assert t.retrieved == ex.retrieved.sentinel or ex.retrieved.r_r[t.retrieved]


# ---------------------------------------------------------------- loss


def point_mass(n, i):
    p = np.zeros(n)
    p[i] = 1.0
    return Tensor(p, requires_grad=True)


def test_loss_zero_at_point_masses():
    tg = [PointerTargets(2, 1, 0), PointerTargets(3, 0, 2)]
    v = loss([point_mass(5, 2), point_mass(5, 3)], [point_mass(3, 1), point_mass(3, 0)],
             [point_mass(4, 0), point_mass(4, 2)], tg)
    assert float(v.data) == 0.0


def test_uniform_vocab_term_is_log_v():
    V = 7
    v = loss([Tensor(np.full(V, 1 / V))], None, None, [PointerTargets(3, 0, 0)])
    assert float(v.data) == pytest.approx(math.log(V), abs=1e-12)


def test_loss_matches_direct_sum():
    rng = np.random.default_rng(0)
    steps = 4
    def dist(n):
        p = rng.random(n)
        return p / p.sum()
    P_v = [dist(6) for _ in range(steps)]
    P_h = [dist(5) for _ in range(steps)]
    P_r = [dist(3) for _ in range(steps)]
    tg = [PointerTargets(int(rng.integers(6)), int(rng.integers(5)), int(rng.integers(3))) for _ in range(steps)]
    v = loss([Tensor(p) for p in P_v], [Tensor(p) for p in P_h], [Tensor(p) for p in P_r], tg)
    direct = sum(-math.log(P_v[t][g.vocab]) - math.log(P_h[t][g.history]) - math.log(P_r[t][g.retrieved])
                 for t, g in enumerate(tg)) / steps
    assert abs(float(v.data) - direct) <= 1e-12


def test_loss_floor_guards_zero_probability():
    v = loss([Tensor(np.array([1.0, 0.0]))], None, None, [PointerTargets(1, 0, 0)])
    assert float(v.data) == pytest.approx(-math.log(1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_model_loss_nonnegative(seed):
    model, ex, tg = tiny_setup(seed=seed % 50)
    value, _ = model.forward(ex, tg)
    assert float(value.data) >= 0.0


# ---------------------------------------------------------------- training loop


def test_one_epoch_lowers_loss():
    ds, vocab = small_corpus(50)
    hp = Hyperparams(d=32, epochs=1, lr=1e-3, seed=1)
    ex, _ = examples_for(ds, hp)
    res = train(ex, vocab, hp)
    first = res.step_losses[0]
    tail = np.mean(res.step_losses[-len(ex) // 5:])
    assert tail < first


def test_seeded_runs_give_identical_checkpoints():
    ds, vocab = small_corpus(12)
    hp = Hyperparams(d=16, epochs=2, seed=3)
    ex, _ = examples_for(ds, hp)
    a = checkpoint_bytes(train(ex, vocab, hp).model)
    ex, _ = examples_for(ds, hp)
    b = checkpoint_bytes(train(ex, vocab, hp).model)
    assert a == b


def test_zero_learning_rate_leaves_parameters():
    ds, vocab = small_corpus(8)
    hp = Hyperparams(d=16, epochs=1, lr=0.0, seed=2)
    ex, _ = examples_for(ds, hp)
    from thpn.model import THPN
    model = THPN(vocab, hp, nx.RngState(99))
    before = model.store.snapshot()
    train(ex, vocab, hp, model=model)
    np.testing.assert_array_equal(model.store.flat.data, before.astype(np.float32).astype(np.float64))


def test_best_epoch_selected_by_validation():
    ds, vocab = small_corpus(20)
    hp = Hyperparams(d=16, epochs=3, lr=1e-3, seed=0)
    ex, _ = examples_for(ds[:16], hp)
    val, _ = examples_for(ds[16:], hp, exclude_self=False)
    res = train(ex, vocab, hp, val)
    assert res.best_metric == max(e["val_metric"] for e in res.log)
    assert [sorted(e) for e in res.log] == [["epoch", "seconds", "train_loss", "val_metric"]] * 3


def test_empty_training_set_rejected():
    with pytest.raises(ConfigurationError):
        train([], tiny_vocab(), Hyperparams(d=8))


def test_train_step_clips_gradients():
    model, ex, tg = tiny_setup()
    ex.cache["targets"] = tg
    model.hp = Hyperparams(d=8, dropout=0.0, clip=1e-3, lr=0.1)
    before = model.store.snapshot()
    adam = nx.AdamState(learning_rate=0.1)
    train_step(model, ex, adam, nx.RngState(0))
    assert np.linalg.norm(model.store.flat.grad) <= 1e-3 + 1e-12
    assert not np.array_equal(before, model.store.flat.data)


# ---------------------------------------------------------------- ablations


def test_apply_ablation_flags():
    hp = apply_ablation(Hyperparams(), no_ir=True, no_ptr=True)
    assert hp.no_ir and hp.no_ptr and not hp.no_gate
    assert not Hyperparams().no_ir


def test_no_ir_never_queries_retrieval():
    ds, vocab = small_corpus(10)
    repo = build_training_repository(ds)
    hp = Hyperparams(d=16, epochs=1, no_ir=True)
    ex = prepare_examples(ds, repo, hp, training_entities(ds), exclude_self=True)
    assert repo.calls == 0
    assert all(len(e.retrieved) == 1 for e in ex)
    res = train(ex, vocab, hp)
    assert res.model.encode_answers(ex[0], Tensor(np.ones(16))).data.tolist() == [0.0] * 16


def test_no_ptr_drops_pointer_terms():
    model, ex, tg = tiny_setup(no_ptr=True)
    value, dists = model.forward(ex, tg)
    only_vocab = -np.mean([math.log(max(d["P_v"].data[t.vocab], 1e-12)) for d, t in zip(dists, tg)])
    assert float(value.data) == pytest.approx(only_vocab, abs=1e-12)
    assert all(d["P_h"] is None and d["P_r"] is None for d in dists)


@pytest.mark.parametrize("flags", [{"no_ir": True}, {"no_ptr": True}, {"no_gate": True}])
def test_ablations_train_end_to_end(flags):
    ds, vocab = small_corpus(10, style="full")
    hp = Hyperparams(d=16, epochs=1, **flags)
    ex, _ = examples_for(ds, hp)
    res = train(ex, vocab, hp)
    assert np.isfinite(res.log[0]["train_loss"])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    ds, vocab = small_corpus(8)
    hp = Hyperparams(d=16, epochs=1, no_gate=True, theta=0.6)
    ex, _ = examples_for(ds, hp)
    model = train(ex, vocab, hp).model
    p1, p2 = tmp_path / "a.thpn", tmp_path / "b.thpn"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.hp == hp and loaded.hp.no_gate
    np.testing.assert_array_equal(loaded.store.flat.data, model.store.flat.data)
    for e in ex[:5]:
        assert loaded.generate(e) == model.generate(e)


def test_checkpoint_incompatibilities(tmp_path):
    model, _, _ = tiny_setup()
    path = tmp_path / "m.thpn"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected=Hyperparams(d=16))
    data = bytearray(path.read_bytes())
    data[4] = 9  # version field
    (tmp_path / "v.thpn").write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "v.thpn")
    (tmp_path / "x.thpn").write_bytes(b"NOPE")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.thpn")
    (tmp_path / "t.thpn").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.thpn")


def test_checkpoint_layout(tmp_path):
    model, _, _ = tiny_setup()
    blob = checkpoint_bytes(model)
    assert blob[:4] == b"THPN"
    assert int.from_bytes(blob[4:8], "little") == 1
