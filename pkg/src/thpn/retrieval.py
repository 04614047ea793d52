"""Guidance-answer retrieval from a training QA repository.

Three similarity backends share one interface:

* ``bm25``     Okapi BM25 (k1=1.5, b=0.75), divided by the best score for the
               query so it is comparable to a threshold in (0, 1].
* ``cosine``   cosine between mean word vectors. Without a supplied word
               table every word is a one-hot axis, i.e. bag-of-words cosine.
* ``external`` cosine against precomputed question vectors read from a
               JSON-lines file; the caller supplies query vectors.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import (EW, NEW, RETRIEVED_MARK, SENTINEL_ITEM, KBTriple, MemoryItem,
                     QAPair, kb_entities)
from .numerics import ConfigurationError

log = logging.getLogger(__name__)

MAX_CANDIDATES = 3
METHODS = ("bm25", "cosine", "external")
# cosine of a vector with itself can land a few ulps under 1.0
SCORE_TOL = 1e-9

DEFAULT_THETA = {"babi": 0.8, "dstc2": 0.5, "camrest": 0.4, "incar": 0.3}


@dataclass(frozen=True)
class RetrievalConfig:
    theta: float = 0.8
    max_candidates: int = MAX_CANDIDATES
    method: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ConfigurationError(f"theta must be in (0, 1], got {self.theta}")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown retrieval method {self.method!r}")
        if self.max_candidates != MAX_CANDIDATES:
            raise ConfigurationError("max_candidates is fixed at 3")


class BM25Index:
    """Okapi BM25 term statistics over tokenized documents."""

    def __init__(self, docs: Sequence[Sequence[str]], k1: float = 1.5, b: float = 0.75):
        self.k1, self.b = k1, b
        self.N = len(docs)
        self.tf = [Counter(d) for d in docs]
        self.doc_len = np.array([len(d) for d in docs], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) if self.N else 0.0
        self.df: Counter = Counter()
        for c in self.tf:
            self.df.update(c.keys())
        self.postings: dict[str, list[int]] = {}
        for i, c in enumerate(self.tf):
            for term in c:
                self.postings.setdefault(term, []).append(i)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.N - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query: Sequence[str], doc_id: int) -> float:
        tf = self.tf[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc_id] / self.avgdl)
        total = 0.0
        for term in query:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def scores(self, query: Sequence[str]) -> np.ndarray:
        out = np.zeros(self.N)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl)
        for term in query:
            ids = self.postings.get(term)
            if not ids:
                continue
            f = np.array([self.tf[i][term] for i in ids], dtype=np.float64)
            out[ids] += self.idf(term) * f * (self.k1 + 1.0) / (f + norm[ids])
        return out


def bm25_score(query: Sequence[str], doc_id: int, index: BM25Index) -> float:
    return index.score(query, doc_id)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0.0, 1.0, norms)


def read_vector_file(path) -> dict[int, np.ndarray]:
    """JSON-lines ``{"id": int, "vector": [floats]}``; all vectors equal length."""
    out: dict[int, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["vector"], dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape != (dim,):
                raise ValueError(f"{path}:{line_no}: vector length {vec.shape[0]} != {dim}")
            out[int(rec["id"])] = vec
    return out


@dataclass
class QARepository:
    pairs: list[QAPair]
    method: str
    question_vectors: np.ndarray | None = None
    bm25_index: BM25Index | None = None
    word_index: dict[str, int] = field(default_factory=dict)
    word_table: np.ndarray | None = None
    query_encoder: Callable[[Sequence[str]], np.ndarray] | None = None
    calls: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        """Unit-length mean word vector of ``tokens`` (zero vector if nothing is known)."""
        if self.method == "external":
            if self.query_encoder is None:
                raise ConfigurationError("external vectors need a query_encoder for new queries")
            v = np.asarray(self.query_encoder(tokens), dtype=np.float64)
        elif self.word_table is None:
            v = np.zeros(len(self.word_index))
            for t in tokens:
                i = self.word_index.get(t)
                if i is not None:
                    v[i] += 1.0
            v /= max(len(tokens), 1)
        else:
            rows = [self.word_table[self.word_index[t]] for t in tokens if t in self.word_index]
            v = np.mean(rows, axis=0) if rows else np.zeros(self.word_table.shape[1])
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def similarities(self, query: Sequence[str]) -> np.ndarray:
        if self.method == "bm25":
            s = self.bm25_index.scores(query)
            top = s.max() if s.size else 0.0
            return s / top if top > 0 else s
        s = self.question_vectors @ self.embed(query)
        return np.clip(s, -1.0, 1.0)


def build_repository(pairs: Sequence[QAPair], method: str = "cosine",
                     vector_file=None,
                     word_vectors: Mapping[str, np.ndarray] | None = None,
                     query_encoder: Callable[[Sequence[str]], np.ndarray] | None = None) -> QARepository:
    """Index training QA pairs for retrieval.

    ``word_vectors`` (token -> vector) switches the cosine backend from
    bag-of-words to mean embeddings, e.g. rows of a trained embedding table.
    """
    if not pairs:
        raise ConfigurationError("cannot build a repository from zero QA pairs")
    if method not in METHODS:
        raise ConfigurationError(f"unknown retrieval method {method!r}")
    repo = QARepository(list(pairs), method, query_encoder=query_encoder)
    questions = [p.question for p in repo.pairs]
    if method == "bm25":
        repo.bm25_index = BM25Index(questions)
        return repo
    if method == "external":
        if vector_file is None:
            raise ConfigurationError("external method needs a vector file")
        table = read_vector_file(vector_file)
        dim = len(next(iter(table.values())))
        unk = np.mean(np.stack(list(table.values())), axis=0)
        rows = []
        for i in range(len(repo.pairs)):
            if i not in table:
                log.warning("no external vector for question %d; using the mean (UNK) vector", i)
            rows.append(table.get(i, unk))
        repo.question_vectors = _normalize_rows(np.stack(rows).reshape(-1, dim))
        return repo
    if word_vectors is None:
        vocab = sorted({t for q in questions for t in q})
        repo.word_index = {t: i for i, t in enumerate(vocab)}
    else:
        vocab = sorted(word_vectors)
        repo.word_index = {t: i for i, t in enumerate(vocab)}
        repo.word_table = np.stack([np.asarray(word_vectors[t], dtype=np.float64) for t in vocab])
    repo.question_vectors = np.stack([repo.embed(q) for q in questions])
    return repo


@dataclass
class RetrievedAnswers:
    answers: list[tuple[tuple[str, ...], float]]
    pair_ids: list[int]
    flat_items: list[MemoryItem]
    r_r: np.ndarray

    def __len__(self) -> int:
        return len(self.flat_items)

    @property
    def sentinel(self) -> int:
        return len(self.flat_items) - 1


def select_candidates(sims: np.ndarray, theta: float, exclude: Iterable[int] = ()) -> list[int]:
    """Indices with similarity >= theta, best first, at most 3; best single one if none qualify.

    ``theta == 1.0`` returns only the single best candidate. Ties keep
    repository order.
    """
    sims = np.asarray(sims, dtype=np.float64).copy()
    ex = [i for i in exclude if 0 <= i < sims.size]
    if ex:
        sims[ex] = -np.inf
    if not np.isfinite(sims).any():
        raise ValueError("no retrievable candidates left after exclusion")
    order = np.argsort(-sims, kind="stable")
    if theta >= 1.0:
        return [int(order[0])]
    chosen = [int(i) for i in order[:MAX_CANDIDATES] if sims[i] >= theta - SCORE_TOL]
    return chosen or [int(order[0])]


def mask_and_flatten(answers: Sequence[Sequence[str]], kb: Sequence[KBTriple],
                     extra_entities: Iterable[str] = (),
                     mask_entities: bool = True) -> tuple[list[MemoryItem], np.ndarray]:
    """Concatenate answers in rank order, append the sentinel, and build ``r_r``.

    Tokens that are entities of the current KB (or of ``extra_entities``) get
    ``r_r = 0`` so the pattern pointer cannot copy them.
    """
    if not answers:
        raise ValueError("mask_and_flatten needs at least one answer")
    ents = kb_entities(kb) | frozenset(extra_entities)
    items = []
    for rank, ans in enumerate(answers):
        for tok in ans:
            items.append(MemoryItem(tok, (tok, RETRIEVED_MARK), "retrieved", rank,
                                    EW if tok in ents else NEW))
    items.append(SENTINEL_ITEM)
    if mask_entities:
        r_r = np.array([it.tag == NEW and not it.is_sentinel for it in items], dtype=bool)
    else:
        r_r = np.ones(len(items), dtype=bool)
        r_r[-1] = False
    return items, r_r


def empty_retrieval() -> RetrievedAnswers:
    """Sentinel-only retrieved memory (used when retrieval is ablated)."""
    return RetrievedAnswers([], [], [SENTINEL_ITEM], np.zeros(1, dtype=bool))


def retrieve(query: Sequence[str], repo: QARepository, config: RetrievalConfig,
             kb: Sequence[KBTriple] = (), extra_entities: Iterable[str] = (),
             exclude: Iterable[int] = (), mask_entities: bool = True,
             query_vector: np.ndarray | None = None) -> RetrievedAnswers:
    """Top-(<=3) guidance answers for ``query`` plus their masked flat memory."""
    if not repo.pairs:
        raise ConfigurationError("empty repository")
    if config.method != repo.method:
        raise ConfigurationError(f"repository built for {repo.method!r}, config asks {config.method!r}")
    repo.calls += 1
    if query_vector is not None:
        q = np.asarray(query_vector, dtype=np.float64)
        q = q / (np.linalg.norm(q) or 1.0)
        sims = np.clip(repo.question_vectors @ q, -1.0, 1.0)
    else:
        sims = repo.similarities(query)
    ids = select_candidates(sims, config.theta, exclude)
    answers = [(repo.pairs[i].answer, float(sims[i])) for i in ids]
    items, r_r = mask_and_flatten([a for a, _ in answers], kb, extra_entities, mask_entities)
    return RetrievedAnswers(answers, ids, items, r_r)


# ------------------------------------------------------------------ cache file


def write_retrieval_cache(records: Sequence[tuple[int, RetrievedAnswers]]) -> str:
    lines = []
    for qid, ra in records:
        lines.append(json.dumps({"query_id": qid, "answer_pair_ids": ra.pair_ids,
                                 "scores": [s for _, s in ra.answers]}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def read_retrieval_cache(stream) -> dict[int, tuple[list[int], list[float]]]:
    if isinstance(stream, str):
        stream = stream.splitlines()
    out = {}
    for line in stream:
        if line.strip():
            rec = json.loads(line)
            out[int(rec["query_id"])] = (list(rec["answer_pair_ids"]), list(rec["scores"]))
    return out


def from_cache(pair_ids: Sequence[int], scores: Sequence[float], repo: QARepository,
               kb: Sequence[KBTriple] = (), extra_entities: Iterable[str] = (),
               mask_entities: bool = True) -> RetrievedAnswers:
    answers = [(repo.pairs[i].answer, float(s)) for i, s in zip(pair_ids, scores)]
    items, r_r = mask_and_flatten([a for a, _ in answers], kb, extra_entities, mask_entities)
    return RetrievedAnswers(answers, list(pair_ids), items, r_r)
