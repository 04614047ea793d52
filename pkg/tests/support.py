"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from thpn import numerics as nx
from thpn.corpus import RESERVED, KBTriple, Vocabulary, build_context
from thpn.model import THPN, Example, Hyperparams
from thpn.retrieval import RetrievedAnswers, mask_and_flatten
from thpn.training import build_targets

TINY_WORDS = ("a", "b", "c", "d", "e", "f", "g")


def tiny_vocab() -> Vocabulary:
    """Twelve tokens: the five reserved symbols plus seven words (markers fall back to UNK)."""
    return Vocabulary.from_list(list(RESERVED) + list(TINY_WORDS))


def make_example(history, kb, answers, gold, mask_new=True, mask_retrieved=True) -> Example:
    ctx = build_context(history, kb, mask_new=mask_new)
    if answers:
        items, r_r = mask_and_flatten(answers, kb, mask_entities=mask_retrieved)
        ret = RetrievedAnswers([(tuple(a), 1.0) for a in answers], list(range(len(answers))), items, r_r)
    else:
        from thpn.retrieval import empty_retrieval
        ret = empty_retrieval()
    return Example(ctx, ret, tuple(gold))


def tiny_setup(seed: int = 0, std: float = 0.3, **hp_kw):
    """The fixed V=12, d=8, K=3 instance used for gradient checks.

    Weights are drawn wider than the production init so every path carries a
    gradient well above finite-difference noise.
    """
    hp = Hyperparams(**{"d": 8, "hops": 3, "dropout": 0.0, **hp_kw})
    vocab = tiny_vocab()
    model = THPN(vocab, hp, nx.RngState(seed))
    rng = np.random.default_rng(seed + 100)
    model.store.flat.data[...] = rng.normal(0.0, std, model.store.flat.data.shape)
    ex = make_example(
        history=[("a", "b", "c"), ("d", "a"), ("c", "f")],
        kb=[KBTriple("c", "d", "e"), KBTriple("a", "g", "b")],
        answers=[("f", "b", "e"), ("d", "f")],
        gold=("f", "e", "d", "b"),
    )
    targets = build_targets(ex.gold, ex.context, ex.retrieved, vocab)
    return model, ex, targets


def model_loss(model, ex, targets) -> float:
    loss, _ = model.forward(ex, targets, training=False)
    return float(loss.data)


def analytic_grads(model, ex, targets) -> np.ndarray:
    model.store.zero_grad()
    loss, _ = model.forward(ex, targets, training=False)
    nx.backward(loss)
    return model.store.flat.grad.copy()


def finite_difference_grads(model, ex, targets, h: float = 1e-6) -> np.ndarray:
    flat = model.store.flat.data
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = model_loss(model, ex, targets)
        flat[i] = old - h
        down = model_loss(model, ex, targets)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def per_tensor_relative_errors(model, g_a: np.ndarray, g_n: np.ndarray) -> dict[str, float]:
    errs = {}
    offset = 0
    for name, p in model.store:
        n = p.data.size
        a, b = g_a[offset:offset + n], g_n[offset:offset + n]
        denom = np.linalg.norm(a) + np.linalg.norm(b)
        errs[name] = 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
        offset += n
    return errs


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def brute_bleu(refs, hyps) -> float:
    """Corpus BLEU-4 written from the definition with explicit loops."""
    matches = [0, 0, 0, 0]
    totals = [0, 0, 0, 0]
    c = r = 0
    for ref, hyp in zip(refs, hyps):
        c += len(hyp)
        r += len(ref)
        for n in range(1, 5):
            hyp_grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
            ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            totals[n - 1] += len(hyp_grams)
            ref_count = Counter(ref_grams)
            for gram, cnt in Counter(hyp_grams).items():
                matches[n - 1] += min(cnt, ref_count.get(gram, 0))
    if c == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        p = m / t if t > 0 else 0.0
        logs.append(math.log(p) if p > 0 else math.log(1e-9))
    bp = 1.0 if c > r or c == r else math.exp(1 - r / c)
    return bp * math.exp(sum(logs) / 4)
