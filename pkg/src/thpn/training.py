"""Teacher-forced training, evaluation and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import (EOS, Dialogue, Vocabulary, build_context, build_vocab, extract_qa_pairs,
                     iter_examples, kb_entities)
from .metrics import MetricsReport, bleu, compute_report, per_response_accuracy
from .model import THPN, Example, Hyperparams, Provenance
from .numerics import AdamState, ConfigurationError, RngState, Tensor
from .retrieval import (QARepository, RetrievalConfig, build_repository, empty_retrieval,
                        retrieve)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"THPN"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12

__all__ = [
    "build_training_repository", "training_entities", "decode_all", "quantize",
    "Hyperparams", "PointerTargets", "build_targets", "loss", "step_loss", "prepare_examples",
    "train", "evaluate", "apply_ablation", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "TrainResult", "Prediction", "targets_for", "validation_metric",
    "train_step", "sequence_loss", "checkpoint_bytes", "write_atomic", "write_training_log", "vocab_for",
]


class CheckpointError(RuntimeError):
    """Checkpoint is unreadable or incompatible with the requested configuration."""


@dataclass(frozen=True)
class PointerTargets:
    vocab: int
    history: int  # index into the context memory
    retrieved: int  # index into the flat retrieved memory


def _last_match(items, mask, token: str, sentinel: int) -> int:
    for i in range(sentinel - 1, -1, -1):
        if mask[i] and items[i].emit_token == token:
            return i
    return sentinel


def build_targets(gold: Sequence[str], context, retrieved, vocab: Vocabulary,
                  mask_history_new: bool = True, mask_retrieved_ew: bool = True) -> list[PointerTargets]:
    """Per-step supervision for ``gold + [EOS]``.

    Each pointer targets the last copyable slot holding the gold token, or
    its sentinel when there is none.
    """
    r_h = context.r_h if mask_history_new else np.arange(len(context)) != context.sentinel
    r_r = retrieved.r_r if mask_retrieved_ew else np.arange(len(retrieved)) != retrieved.sentinel
    out = []
    for tok in list(gold) + [EOS]:
        out.append(PointerTargets(
            vocab=vocab.index(tok),
            history=_last_match(context.items, r_h, tok, context.sentinel),
            retrieved=_last_match(retrieved.flat_items, r_r, tok, retrieved.sentinel),
        ))
    return out


def loss(P_v: Sequence[Tensor], P_h: Sequence[Tensor] | None, P_r: Sequence[Tensor] | None,
         targets: Sequence[PointerTargets], weights=(1.0, 1.0, 1.0),
         history_offset: int = 0, retrieved_offset: int = 0) -> Tensor:
    """Mean over steps of ``-log P_v[y] - log P_h[h] - log P_r[r]``.

    Pointer streams may be ``None`` (pointer heads disabled). Offsets shift
    target positions when the pointer vectors span a joint memory.
    """
    if len(P_v) != len(targets):
        raise ValueError("loss: stream and target lengths differ")
    terms = []
    for t, tgt in enumerate(targets):
        parts = [nx.scale(nx.nll(P_v[t], tgt.vocab, PROB_FLOOR), weights[0])]
        if P_h is not None:
            parts.append(nx.scale(nx.nll(P_h[t], tgt.history + history_offset, PROB_FLOOR), weights[1]))
        if P_r is not None:
            parts.append(nx.scale(nx.nll(P_r[t], tgt.retrieved + retrieved_offset, PROB_FLOOR), weights[2]))
        terms.append(nx.sum(nx.stack(parts)))
    return nx.scale(nx.sum(nx.stack(terms)), 1.0 / len(terms))


def step_loss(dists: dict, tgt: PointerTargets, n_ctx: int, hp: Hyperparams) -> Tensor:
    w = hp.loss_weights
    parts = [nx.scale(nx.nll(dists["P_v"], tgt.vocab, PROB_FLOOR), w[0])]
    if dists["P_h"] is not None:
        parts.append(nx.scale(nx.nll(dists["P_h"], tgt.history, PROB_FLOOR), w[1]))
        parts.append(nx.scale(nx.nll(dists["P_r"], n_ctx + tgt.retrieved, PROB_FLOOR), w[2]))
    return nx.sum(nx.stack(parts))


def sequence_loss(dists: dict, targets: Sequence[PointerTargets], n_ctx: int, hp: Hyperparams) -> Tensor:
    """Mean over steps of the per-step loss, from distributions stacked by step (one row each)."""
    w = hp.loss_weights
    parts = [nx.scale(nx.nll_rows(dists["P_v"], [t.vocab for t in targets], PROB_FLOOR), w[0])]
    if dists["P_h"] is not None:
        parts.append(nx.scale(nx.nll_rows(dists["P_h"], [t.history for t in targets], PROB_FLOOR), w[1]))
        parts.append(nx.scale(nx.nll_rows(dists["P_r"], [n_ctx + t.retrieved for t in targets], PROB_FLOOR), w[2]))
    return nx.scale(nx.sum(nx.stack(parts)), 1.0 / len(targets))


def apply_ablation(hp: Hyperparams, no_ir: bool = False, no_ptr: bool = False, no_gate: bool = False) -> Hyperparams:
    """Return a copy of ``hp`` with ablation flags set.

    ``no_ir`` skips retrieval (``h_a = 0``, sentinel-only retrieved memory),
    ``no_ptr`` decodes from the vocabulary only and drops the pointer losses,
    ``no_gate`` feeds ``h_a`` in place of the gated answer vector.
    """
    from dataclasses import replace
    out = replace(hp, no_ir=hp.no_ir or no_ir, no_ptr=hp.no_ptr or no_ptr, no_gate=hp.no_gate or no_gate)
    out.validate()
    return out


# ---------------------------------------------------------------- data preparation


def training_entities(dialogues: Sequence[Dialogue]) -> frozenset[str]:
    ents: set[str] = set()
    for d in dialogues:
        ents |= kb_entities(d.kb)
    return frozenset(ents)


def build_training_repository(dialogues: Sequence[Dialogue], method: str = "cosine", **kw) -> QARepository:
    return build_repository(extract_qa_pairs(dialogues), method, **kw)


def prepare_examples(dialogues: Sequence[Dialogue], repo: QARepository | None, hp: Hyperparams,
                     extra_entities: Iterable[str] = (), exclude_self: bool = False) -> list[Example]:
    """Build memories and retrieval results for every system turn.

    With ``exclude_self`` the example's own (question, answer) pair is kept
    out of its candidates, so training never sees its gold answer as guidance.
    """
    extra = frozenset(extra_entities)
    cfg = RetrievalConfig(theta=hp.theta, method=hp.method)
    own = {}
    if exclude_self and repo is not None:
        own = {(p.dialogue_id, p.turn_id): i for i, p in enumerate(repo.pairs)}
    out = []
    for d_id, t_id, history, gold in iter_examples(dialogues):
        d = dialogues[d_id]
        ctx = build_context(history, d.kb, mask_new=hp.mask_history_new)
        if hp.no_ir or repo is None:
            ret = empty_retrieval()
        else:
            ex_ids = [own[(d_id, t_id)]] if (d_id, t_id) in own else []
            ret = retrieve(history[-1], repo, cfg, kb=d.kb, extra_entities=extra,
                           exclude=ex_ids, mask_entities=hp.mask_retrieved_ew)
        out.append(Example(ctx, ret, tuple(gold), d_id, t_id, d.domain))
    return out


def targets_for(model: THPN, ex: Example) -> list[PointerTargets]:
    tg = ex.cache.get("targets")
    if tg is None:
        tg = build_targets(ex.gold, ex.context, ex.retrieved, model.vocab)
        ex.cache["targets"] = tg
    return tg


# ---------------------------------------------------------------- evaluation


@dataclass
class Prediction:
    example: Example
    tokens: list[str]
    provenance: list[Provenance]

    def to_json(self) -> dict:
        ex = self.example
        return {
            "context": [it.emit_token for it in ex.context.items],
            "retrieved": [{"tokens": list(a), "score": s} for a, s in ex.retrieved.answers],
            "gold": list(ex.gold),
            "predicted": self.tokens,
            "provenance": [{"source": p.source, "position": p.position} for p in self.provenance],
        }


def decode_all(model: THPN, examples: Sequence[Example], max_len: int | None = None) -> list[Prediction]:
    out = []
    for ex in examples:
        toks, prov = model.generate(ex, max_len=max_len)
        out.append(Prediction(ex, toks, prov))
    return out


def evaluate(model: THPN, examples: Sequence[Example], lexicon: frozenset[str],
             config: dict | None = None, max_len: int | None = None) -> tuple[MetricsReport, list[Prediction]]:
    preds = decode_all(model, examples, max_len)
    report = compute_report(
        [ex.gold for ex in examples], [p.tokens for p in preds], lexicon,
        domains=[ex.domain for ex in examples],
        retrieved_counts=[] if model.hp.no_ir else [len(ex.retrieved.answers) for ex in examples],
        config=config,
    )
    return report, preds


def validation_metric(model: THPN, examples: Sequence[Example]) -> float:
    if not examples:
        return 0.0
    preds = [model.generate(ex)[0] for ex in examples]
    golds = [ex.gold for ex in examples]
    if model.hp.select_metric == "bleu":
        return bleu(golds, preds)
    return per_response_accuracy(golds, preds)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: THPN
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")
    step_losses: list[float] = field(default_factory=list)


def train_step(model: THPN, ex: Example, adam: AdamState, rng: RngState) -> float:
    store = model.store
    store.zero_grad()
    value, _ = model.forward(ex, targets_for(model, ex), training=True, rng=rng)
    nx.backward(value)
    nx.clip_global_norm([store.flat], model.hp.clip)
    nx.adam_step([store.flat], adam)
    return float(value.data)


def train(train_examples: Sequence[Example], vocab: Vocabulary, hp: Hyperparams,
          val_examples: Sequence[Example] = (),
          on_epoch: Callable[[dict], None] | None = None,
          model: THPN | None = None) -> TrainResult:
    """Per-example Adam training with global-norm clipping; keeps the best
    validation snapshot (or the last epoch when there is no validation data)."""
    hp.validate()
    if not train_examples:
        raise ConfigurationError("empty training set")
    root = RngState(hp.seed)
    model = model or THPN(vocab, hp, root.spawn(1))
    order_rng, drop_rng = root.spawn(2), root.spawn(3)
    adam = AdamState(learning_rate=hp.lr)
    result = TrainResult(model)
    best = None
    for epoch in range(1, hp.epochs + 1):
        start = time.perf_counter()
        losses = []
        for i in order_rng.permutation(len(train_examples)):
            losses.append(train_step(model, train_examples[int(i)], adam, drop_rng))
        result.step_losses.extend(losses)
        metric = validation_metric(model, val_examples) if val_examples else float("nan")
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_metric": metric,
                 "seconds": round(time.perf_counter() - start, 3)}
        result.log.append(entry)
        log.info("epoch %d loss %.4f val %.4f (%.1fs)", epoch, entry["train_loss"], metric, entry["seconds"])
        if on_epoch:
            on_epoch(entry)
        score = metric if val_examples else float(epoch)
        if best is None or score > result.best_metric:
            result.best_metric, result.best_epoch = score, epoch
            best = model.store.snapshot()
        if val_examples and metric >= 1.0:
            break  # nothing left to select for
    model.store.restore(best)
    quantize(model)
    return result


def quantize(model: THPN) -> None:
    """Round parameters to float32 so in-memory and checkpointed models agree."""
    flat = model.store.flat.data
    flat[...] = flat.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------- checkpoints


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: THPN) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_pack_str(model.hp.to_text()))
    buf.write(struct.pack("<I", len(model.vocab)))
    for tok in model.vocab.itos:
        buf.write(_pack_str(tok))
    buf.write(struct.pack("<I", len(model.store.names)))
    for name, p in model.store:
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(p.data.astype("<f4").tobytes())
    return buf.getvalue()


def write_atomic(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = os.fspath(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: THPN, path) -> None:
    write_atomic(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected: Hyperparams | None = None) -> THPN:
    """Rebuild a model from a checkpoint; ``expected`` guards against a dimension mismatch."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a THPN checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        hp = Hyperparams.from_text(r.string())
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: bad hyperparameter block: {exc}") from exc
    if expected is not None and (expected.d != hp.d or expected.hops != hp.hops):
        raise CheckpointError(f"{path}: checkpoint has d={hp.d}, hops={hp.hops}; "
                              f"config asks d={expected.d}, hops={expected.hops}")
    vocab = Vocabulary.from_list([r.string() for _ in range(r.u32())])
    model = THPN(vocab, hp, RngState(0))
    n = r.u32()
    if n != len(model.store.names):
        raise CheckpointError(f"{path}: {n} tensors, model expects {len(model.store.names)}")
    for _ in range(n):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in model.store or model.store[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        model.store[name].data[...] = values.astype(np.float64)
    return model


def write_training_log(entries: Sequence[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries)


def vocab_for(train_dialogues: Sequence[Dialogue]) -> Vocabulary:
    return build_vocab(train_dialogues)
