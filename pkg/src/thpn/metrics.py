"""Corpus BLEU, per-response accuracy, micro entity F1 and retrieval statistics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

BLEU_ORDER = 4
SMOOTH_EPS = 1e-9


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(references: Sequence[Sequence[str]], hypotheses: Sequence[Sequence[str]]) -> float:
    """Corpus-level BLEU-4 with uniform weights and brevity penalty.

    Clipped n-gram matches and hypothesis n-gram totals are summed over the
    whole corpus before taking the precision. A zero precision is replaced by
    ``1e-9`` inside the log.
    """
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * BLEU_ORDER
    totals = [0] * BLEU_ORDER
    c = r = 0
    for ref, hyp in zip(references, hypotheses):
        c += len(hyp)
        r += len(ref)
        for n in range(1, BLEU_ORDER + 1):
            h = ngram_counts(hyp, n)
            rc = ngram_counts(ref, n)
            matches[n - 1] += sum(min(cnt, rc[g]) for g, cnt in h.items())
            totals[n - 1] += sum(h.values())
    if c == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if t else 0.0
        log_p += math.log(p if p > 0 else SMOOTH_EPS) / BLEU_ORDER
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def per_response_accuracy(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]) -> float:
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold vs {len(predicted)} predicted responses")
    if not gold:
        return 0.0
    return sum(tuple(g) == tuple(p) for g, p in zip(gold, predicted)) / len(gold)


@dataclass
class F1Result:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    degenerate: bool  # no gold and no predicted entities anywhere


def entity_counts(gold: Iterable[str], predicted: Sequence[str], lexicon: frozenset[str] | set[str]) -> tuple[int, int, int]:
    g = set(gold)
    p = {t for t in predicted if t in lexicon}
    return len(g & p), len(p - g), len(g - p)


def entity_f1(gold_entity_sets: Sequence[Iterable[str]], predicted: Sequence[Sequence[str]],
              lexicon: frozenset[str] | set[str]) -> F1Result:
    """Micro-averaged entity F1 with set semantics per response."""
    if len(gold_entity_sets) != len(predicted):
        raise ValueError("entity_f1: gold and predicted lengths differ")
    tp = fp = fn = 0
    for g, p in zip(gold_entity_sets, predicted):
        a, b, c = entity_counts(g, p, lexicon)
        tp, fp, fn = tp + a, fp + b, fn + c
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return F1Result(f1, precision, recall, tp, fp, fn, degenerate=(tp + fp + fn == 0))


def gold_entities(response: Sequence[str], lexicon: frozenset[str] | set[str]) -> set[str]:
    return {t for t in response if t in lexicon}


def retrieval_stats(counts: Sequence[int]) -> float:
    """Average number of retrieved answers per query."""
    if not counts:
        raise ValueError("no retrieval records")
    return sum(counts) / len(counts)


@dataclass
class MetricsReport:
    bleu: float
    per_response_accuracy: float
    entity_f1: float
    per_domain_f1: dict[str, float] = field(default_factory=dict)
    avg_retrieved: float = 0.0
    entity_f1_degenerate: bool = False
    n_responses: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, fixed separators."""
        obj = asdict(self)
        obj["bleu_x100"] = 100.0 * self.bleu
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def compute_report(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]],
                   lexicon: frozenset[str] | set[str], domains: Sequence[str | None] | None = None,
                   retrieved_counts: Sequence[int] = (), config: Mapping | None = None) -> MetricsReport:
    gold_sets = [gold_entities(g, lexicon) for g in gold]
    f1 = entity_f1(gold_sets, predicted, lexicon)
    per_domain: dict[str, float] = {}
    if domains is not None:
        for dom in sorted({x for x in domains if x is not None}):
            idx = [i for i, x in enumerate(domains) if x == dom]
            per_domain[dom] = entity_f1([gold_sets[i] for i in idx], [predicted[i] for i in idx], lexicon).f1
    return MetricsReport(
        bleu=bleu(gold, predicted) if gold else 0.0,
        per_response_accuracy=per_response_accuracy(gold, predicted),
        entity_f1=f1.f1,
        per_domain_f1=per_domain,
        avg_retrieved=retrieval_stats(retrieved_counts) if retrieved_counts else 0.0,
        entity_f1_degenerate=f1.degenerate,
        n_responses=len(gold),
        config=dict(config or {}),
    )
