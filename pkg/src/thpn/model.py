"""Template-guided hybrid pointer network.

Encoder: a K-hop memory network over dialogue history and KB triples.
Retrieved guidance answers are summarised into ``h_a`` which initialises
the GRU decoder and feeds an answer gate. A second, three-hop memory network
over ``[history ; KB ; sentinel ; retrieved ; sentinel]`` yields the
vocabulary distribution (from hop 1), the pattern pointer (hop 2, retrieved
segment) and the entity pointer (hop 3, history segment). Tokens are picked
with priority pattern > entity > vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import numpy as np

from . import numerics as nx
from .corpus import EOS, SENTINEL, SOS, EncodedContext, MemoryItem, Vocabulary
from .numerics import ConfigurationError, ParamStore, RngState, Tensor
from .retrieval import RetrievedAnswers

DECODER_HOPS = 3


@dataclass
class Hyperparams:
    d: int = 256
    hops: int = 3
    lr: float = 1e-4
    clip: float = 10.0
    dropout: float = 0.4
    epochs: int = 10
    seed: int = 0
    theta: float = 0.8
    method: str = "cosine"
    max_len: int = 30
    no_ir: bool = False
    no_ptr: bool = False
    no_gate: bool = False
    mask_history_new: bool = True
    mask_retrieved_ew: bool = True
    query_init: str = "mean_last_user"  # or "learned"
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    select_metric: str = "accuracy"  # or "bleu"

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigurationError(f"model dimension must be positive, got {self.d}")
        if self.hops < 1:
            raise ConfigurationError(f"hops must be >= 1, got {self.hops}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr < 0 or self.clip <= 0:
            raise ConfigurationError("lr must be >= 0 and clip > 0")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigurationError(f"theta must be in (0, 1], got {self.theta}")
        if self.query_init not in ("mean_last_user", "learned"):
            raise ConfigurationError(f"unknown query_init {self.query_init!r}")
        if self.select_metric not in ("accuracy", "bleu"):
            raise ConfigurationError(f"unknown select_metric {self.select_metric!r}")
        if self.max_len < 0:
            raise ConfigurationError("max_len must be >= 0")

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Hyperparams":
        kinds = {f.name: f.type for f in fields(cls)}
        kw: dict[str, Any] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ConfigurationError(f"unknown hyperparameter {key!r}")
            kw[key] = parse_value(key, raw, getattr(cls(), key))
        return cls(**kw)


def parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc
    return raw


@dataclass
class Example:
    """One system turn: its memories, the gold response and bookkeeping."""
    context: EncodedContext
    retrieved: RetrievedAnswers
    gold: tuple[str, ...]
    dialogue_id: int = -1
    turn_id: int = -1
    domain: str | None = None
    cache: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class Provenance:
    source: str  # "vocab" | "history" | "retrieved"
    position: int  # index into the source (vocabulary id for "vocab")


@dataclass
class DecodeState:
    h: np.ndarray
    t: int = 0
    tokens: list[str] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)


def param_specs(V: int, d: int, hops: int) -> list[tuple[str, tuple[int, ...]]]:
    specs = [(f"enc_M{k}", (V, d)) for k in range(1, hops + 2)]
    specs += [
        ("query0", (d,)),
        ("emb", (V, d)),
        ("ans_W1", (2 * d, d)),
        ("ans_W2", (d, d)),
    ]
    specs += [(f"gru_W{g}", (d, d)) for g in "zrn"]
    specs += [(f"gru_U{g}", (d, d)) for g in "zrn"]
    specs += [(f"gru_b{g}", (d,)) for g in "zrn"]
    specs += [
        ("eta_W", (2 * d, d)),
        ("eta_b", (d,)),
        ("eta_v", (d,)),
        ("W_s", (3 * d, d)),
        ("W_v", (2 * d, V)),
    ]
    specs += [(f"dec_D{k}", (V, d)) for k in range(1, DECODER_HOPS + 2)]
    return specs


# ---------------------------------------------------------------- building blocks


def gate(h_a: Tensor, h_prev: Tensor) -> Tensor:
    """Answer gate: ``sigmoid(h_a * h_prev) * h_a``."""
    return nx.mul(nx.sigmoid(nx.mul(h_a, h_prev)), h_a)


def memory_hop(query: Tensor, read: Tensor, write: Tensor, mask=None) -> tuple[Tensor, Tensor, Tensor]:
    """Attention of ``query`` over ``read`` rows; readout from ``write`` rows.

    Returns ``(attention, readout, logits)``. A 2-D ``query`` holds one query
    per row and gets one attention row each.
    """
    logits = nx.matmul(query, nx.transpose(read)) if query.data.ndim == 2 else nx.matmul(read, query)
    p = nx.masked_softmax(logits, mask)
    return p, nx.matmul(p, write), logits


class THPN:
    def __init__(self, vocab: Vocabulary, hp: Hyperparams, rng: RngState | None = None):
        hp.validate()
        self.vocab = vocab
        self.hp = hp
        V, d = len(vocab), hp.d
        self.store = ParamStore(param_specs(V, d, hp.hops))
        rng = rng or RngState(hp.seed)
        for name, p in self.store:
            if name.startswith("gru_U"):
                p.data[...] = nx.init_orthogonal(p.shape, rng)
            elif name.startswith(("gru_b", "eta_b")):
                p.data[...] = nx.init_zeros(p.shape)
            else:
                p.data[...] = nx.init_normal(p.shape, rng)
        self.sentinel_id = vocab.index(SENTINEL)
        self.sos_id = vocab.index(SOS)
        self.eos_id = vocab.index(EOS)

    @property
    def P(self) -> ParamStore:
        return self.store

    def load_pretrained(self, vectors: dict[str, np.ndarray]) -> int:
        """Copy matching word vectors into the first encoder table and the decoder embedding."""
        hits = 0
        for tok, vec in vectors.items():
            if tok in self.vocab and len(vec) == self.hp.d:
                i = self.vocab.index(tok)
                self.store["enc_M1"].data[i] = vec
                self.store["emb"].data[i] = vec
                hits += 1
        return hits

    # ------------------------------------------------------------ featurization

    def _bag(self, items: Sequence[MemoryItem]) -> tuple[np.ndarray, np.ndarray]:
        width = max(len(it.feature_tokens) for it in items)
        idx = np.zeros((len(items), width), dtype=np.int64)
        w = np.zeros((len(items), width))
        for i, it in enumerate(items):
            for j, tok in enumerate(it.feature_tokens):
                idx[i, j] = self.vocab.index(tok)
                w[i, j] = 1.0
        return idx, w

    def featurize(self, ex: Example) -> dict:
        c = ex.cache
        if "ctx_idx" in c:
            return c
        ctx, ret = ex.context, ex.retrieved
        c["ctx_idx"], c["ctx_w"] = self._bag(ctx.items)
        q = list(ctx.query) or [SENTINEL]
        c["query_idx"] = np.array([self.vocab.encode(q)])
        c["query_w"] = np.full((1, len(q)), 1.0 / len(q))
        c["ans_idx"] = np.array([[self.vocab.index(it.emit_token)] for it in ret.flat_items])
        c["ans_w"] = np.ones_like(c["ans_idx"], dtype=np.float64)
        dec_items = list(ctx.items) + list(ret.flat_items)
        c["dec_idx"], c["dec_w"] = self._bag(dec_items)
        n_ctx, n_ret = len(ctx), len(ret)
        hist_seg = np.zeros(n_ctx + n_ret, dtype=bool)
        hist_seg[:n_ctx] = True
        c["hist_seg"], c["ret_seg"] = hist_seg, ~hist_seg
        ph = hist_seg.copy()
        ph[:n_ctx] = ctx.r_h
        ph[n_ctx - 1] = True
        pr = np.zeros(n_ctx + n_ret, dtype=bool)
        pr[n_ctx:] = ret.r_r
        pr[-1] = True
        c["P_h_mask"], c["P_r_mask"] = ph, pr
        c["n_ctx"], c["n_ret"] = n_ctx, n_ret
        return c

    # ------------------------------------------------------------ encoder side

    def encode(self, ex: Example) -> tuple[list[Tensor], Tensor, Tensor]:
        """Multi-hop read over the context memory.

        Returns ``(C, q_final, q_init)`` with ``C = [c^1, ..., c^K]``.
        """
        f = self.featurize(ex)
        K = self.hp.hops
        mem = [nx.embedding_bag(self.store[f"enc_M{k}"], f["ctx_idx"], f["ctx_w"]) for k in range(1, K + 2)]
        if self.hp.query_init == "learned":
            q = self.store["query0"]
        else:
            q = nx.embedding_bag(self.store["enc_M1"], f["query_idx"], f["query_w"])
            q = nx.sum_rows(q)
        q_init = q
        C = []
        for k in range(K):
            _, c_k, _ = memory_hop(q, mem[k], mem[k + 1])
            C.append(c_k)
            q = nx.add(q, c_k)
        return C, q, q_init

    def encode_answers(self, ex: Example, c_K: Tensor) -> Tensor:
        """``h_a = W_2 tanh(sum_i W_1 [c^K ; a_i])`` over every flat retrieved token."""
        d = self.hp.d
        if self.hp.no_ir:
            return Tensor(np.zeros(d))
        f = self.featurize(ex)
        A = nx.embedding_bag(self.store["emb"], f["ans_idx"], f["ans_w"])
        W1 = self.store["ans_W1"]
        m = A.shape[0]
        inner = nx.add(nx.scale(nx.matmul(c_K, nx.slice_rows(W1, 0, d)), float(m)),
                       nx.matmul(nx.sum_rows(A), nx.slice_rows(W1, d, 2 * d)))
        return nx.matmul(nx.tanh(inner), self.store["ans_W2"])

    def hop_attention(self, h_prev: Tensor, C_mat: Tensor, C_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """``H^c = sum_i alpha_i c^i`` with ``alpha = softmax_i(v . tanh(W [h ; c^i] + b))``."""
        d = self.hp.d
        W = self.store["eta_W"]
        if C_proj is None:
            C_proj = nx.matmul(C_mat, nx.slice_rows(W, d, 2 * d))
        hp = nx.add(nx.matmul(h_prev, nx.slice_rows(W, 0, d)), self.store["eta_b"])
        scores = nx.matmul(nx.tanh(nx.add_rowvec(C_proj, hp)), self.store["eta_v"])
        alpha = nx.softmax(scores)
        return nx.matmul(alpha, C_mat), alpha

    # ------------------------------------------------------------ decoder side

    def decoder_state(self, h_prev: Tensor, h_a: Tensor, C_mat: Tensor, C_proj: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``h*_{t-1} = tanh(W_s [h_{t-1} ; H^c ; H^g])``; returns ``(h*, H^c, H^g)``."""
        H_c, _ = self.hop_attention(h_prev, C_mat, C_proj)
        H_g = h_a if self.hp.no_gate else gate(h_a, h_prev)
        state = nx.tanh(nx.matmul(nx.concat([h_prev, H_c, H_g]), self.store["W_s"]))
        return state, H_c, H_g

    def gru(self, x: Tensor, state: Tensor) -> Tensor:
        P = self.store
        return nx.gru_cell(x, state, P["gru_Wz"], P["gru_Wr"], P["gru_Wn"],
                           P["gru_Uz"], P["gru_Ur"], P["gru_Un"],
                           P["gru_bz"], P["gru_br"], P["gru_bn"])

    def decoder_step(self, y_prev: int, state: Tensor, training: bool = False, rng: RngState | None = None) -> Tensor:
        """``h_t = GRU(emb(y_{t-1}), h*_{t-1})`` with dropout on the GRU input."""
        x = nx.embedding_lookup(self.store["emb"], y_prev)
        x = nx.dropout(x, self.hp.dropout, training, rng)
        return self.gru(x, state)

    def decoder_memories(self, ex: Example) -> list[Tensor]:
        f = self.featurize(ex)
        return [nx.embedding_bag(self.store[f"dec_D{k}"], f["dec_idx"], f["dec_w"])
                for k in range(1, DECODER_HOPS + 2)]

    def decoder_memnn(self, h_t: Tensor, mems: Sequence[Tensor], f: dict) -> dict:
        """Three hops over the joint memory; hop 2 reads only the retrieved
        segment and hop 3 only the history segment."""
        p1, o1, l1 = memory_hop(h_t, mems[0], mems[1])
        q2 = nx.add(h_t, o1)
        p2, o2, l2 = memory_hop(q2, mems[1], mems[2], f["ret_seg"])
        q3 = nx.add(q2, o2)
        p3, o3, l3 = memory_hop(q3, mems[2], mems[3], f["hist_seg"])
        return {"o": (o1, o2, o3), "p": (p1, p2, p3), "logits": (l1, l2, l3)}

    def distributions(self, h_t: Tensor, mem_out: dict, f: dict) -> dict:
        """``P_v`` over the vocabulary; ``P_r``/``P_h`` as masked, renormalised
        hop-2/hop-3 attention over the full joint memory (zero outside their segment)."""
        o1 = mem_out["o"][0]
        P_v = nx.softmax(nx.matmul(nx.concat([o1, h_t], axis=-1), self.store["W_v"]))
        if self.hp.no_ptr:
            return {"P_v": P_v, "P_r": None, "P_h": None}
        _, l2, l3 = mem_out["logits"]
        P_r = nx.masked_softmax(l2, f["P_r_mask"])
        P_h = nx.masked_softmax(l3, f["P_h_mask"])
        return {"P_v": P_v, "P_r": P_r, "P_h": P_h}

    def _prepare(self, ex: Example):
        f = self.featurize(ex)
        C, _, _ = self.encode(ex)
        h_a = self.encode_answers(ex, C[-1])
        C_mat = nx.stack(C)
        d = self.hp.d
        C_proj = nx.matmul(C_mat, nx.slice_rows(self.store["eta_W"], d, 2 * d))
        mems = self.decoder_memories(ex)
        return f, h_a, C_mat, C_proj, mems

    def step(self, t: int, y_prev: int, h_prev: Tensor | None, ctx, training: bool, rng: RngState | None):
        """One decoding step; returns ``(h_t, dists)``."""
        f, h_a, C_mat, C_proj, mems = ctx
        state = h_a if t == 0 else self.decoder_state(h_prev, h_a, C_mat, C_proj)[0]
        h = self.decoder_step(y_prev, state, training, rng)
        h_out = nx.dropout(h, self.hp.dropout, training, rng)
        mem_out = self.decoder_memnn(h_out, mems, f)
        return h, self.distributions(h_out, mem_out, f)

    def forward(self, ex: Example, targets, training: bool = False, rng: RngState | None = None) -> tuple[Tensor, list[dict]]:
        """Teacher-forced pass; returns ``(loss, per-step distributions)``.

        Only the recurrence runs step by step. The decoder memory reads and
        the output distributions do not feed back under teacher forcing, so
        they are computed for all steps at once.
        """
        from .training import sequence_loss

        f, h_a, C_mat, C_proj, mems = self._prepare(ex)
        h = None
        y_prev = self.sos_id
        states = []
        for t, tgt in enumerate(targets):
            state = h_a if t == 0 else self.decoder_state(h, h_a, C_mat, C_proj)[0]
            h = self.decoder_step(y_prev, state, training, rng)
            states.append(h)
            y_prev = tgt.vocab
        H = nx.dropout(nx.stack(states), self.hp.dropout, training, rng)
        dists = self.distributions(H, self.decoder_memnn(H, mems, f), f)
        loss = sequence_loss(dists, targets, f["n_ctx"], self.hp)
        per_step = [{k: None if v is None else Tensor(v.data[t]) for k, v in dists.items()}
                    for t in range(len(targets))]
        return loss, per_step

    # ------------------------------------------------------------ selection / decoding

    def select_token(self, P_v: np.ndarray, P_h: np.ndarray | None, P_r: np.ndarray | None,
                     context: EncodedContext, retrieved: RetrievedAnswers) -> tuple[str, Provenance]:
        """Pattern pointer first, then entity pointer, then vocabulary.

        ``P_h`` covers the context memory and ``P_r`` the retrieved memory
        (both including their sentinel).
        """
        if not self.hp.no_ptr:
            if P_r is not None:
                i = int(np.argmax(P_r))
                if i != retrieved.sentinel and retrieved.r_r[i] and P_r[i] > 0:
                    return retrieved.flat_items[i].emit_token, Provenance("retrieved", i)
            if P_h is not None:
                i = int(np.argmax(P_h))
                if i != context.sentinel and context.r_h[i] and P_h[i] > 0:
                    return context.items[i].emit_token, Provenance("history", i)
        v = int(np.argmax(P_v))
        return self.vocab.token(v), Provenance("vocab", v)

    def generate(self, ex: Example, max_len: int | None = None, trace: list | None = None) -> tuple[list[str], list[Provenance]]:
        """Greedy decoding until EOS or ``max_len`` tokens."""
        max_len = self.hp.max_len if max_len is None else max_len
        state = DecodeState(h=np.zeros(self.hp.d))
        if max_len <= 0:
            return [], []
        ctx = self._prepare(ex)
        n_ctx = ctx[0]["n_ctx"]
        h = None
        y_prev = self.sos_id
        for t in range(max_len):
            h, dists = self.step(t, y_prev, h, ctx, False, None)
            P_v = dists["P_v"].data
            P_h = None if dists["P_h"] is None else dists["P_h"].data[:n_ctx]
            P_r = None if dists["P_r"] is None else dists["P_r"].data[n_ctx:]
            if trace is not None:
                trace.append({"P_v": P_v, "P_h": P_h, "P_r": P_r})
            tok, prov = self.select_token(P_v, P_h, P_r, ex.context, ex.retrieved)
            if prov.source == "vocab" and prov.position == self.eos_id:
                break
            state.tokens.append(tok)
            state.provenance.append(prov)
            state.t = t + 1
            state.h = h.data
            y_prev = self.vocab.index(tok)
        return state.tokens, state.provenance
