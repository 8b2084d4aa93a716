"""BLEU-4 and ROUGE-L for generated questions."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

ROUGE_GAMMA = 1.2
SMOOTH_EPS = 0.1


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ngram_stats(hyp: Sequence[str], ref: Sequence[str], max_n: int = 4):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len >= ref_len:
        return 1.0
    return math.exp(1 - ref_len / hyp_len)


def _combine(matches, totals, hyp_len, ref_len, smooth: float | None) -> float:
    # Orders with no hypothesis n-grams at all are dropped (effective order).
    log_p = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            if smooth is None:
                return 0.0
            m = smooth
        log_p.append(math.log(m / t))
    if not log_p:
        return 0.0
    return _brevity_penalty(hyp_len, ref_len) * math.exp(sum(log_p) / len(log_p))


def bleu4(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU-4 from aggregated clipped n-gram counts, unsmoothed."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("BLEU needs at least one sentence pair")
    matches, totals = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        m, t = _ngram_stats(hyp, ref)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += len(hyp)
        ref_len += len(ref)
    return _combine(matches, totals, hyp_len, ref_len, smooth=None)


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], eps: float = SMOOTH_EPS) -> float:
    """Sentence BLEU-4 with zero higher-order counts replaced by ``eps``.

    A hypothesis with no unigram in common with the reference scores 0.
    """
    matches, totals = _ngram_stats(hyp, ref)
    if matches[0] == 0:
        return 0.0
    return _combine(matches, totals, len(hyp), len(ref), smooth=eps)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str], gamma: float = ROUGE_GAMMA) -> float:
    """LCS F-measure ((1 + g^2) P R) / (R + g^2 P)."""
    if not hyp or not ref:
        raise ValueError("ROUGE-L needs non-empty sequences")
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + gamma ** 2) * p * r / (r + gamma ** 2 * p)


@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    per_example: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [
            f"{'BLEU-4 (corpus)':<22}{self.bleu4:>10.4f}",
            f"{'ROUGE-L (mean F)':<22}{self.rouge_l:>10.4f}",
            f"{'examples':<22}{len(self.per_example):>10d}",
            "METEOR not computed (needs external paraphrase resources)",
        ]
        return "\n".join(lines)


def evaluate(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> MetricReport:
    corpus = bleu4(hyps, refs)
    per = [{"bleu4": sentence_bleu(h, r) if h else 0.0, "rouge_l": rouge_l(h, r) if h else 0.0}
           for h, r in zip(hyps, refs)]
    mean_rouge = sum(p["rouge_l"] for p in per) / len(per)
    return MetricReport(corpus, mean_rouge, per)
