"""BLEU and CIDEr-D over token sequences (strings or ids)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Hashable, Mapping, Sequence

Caption = Sequence[Hashable]

CIDER_N = 4
CIDER_SIGMA = 6.0


def ngrams(tokens: Caption, n: int) -> Counter:
    toks = tuple(tokens)
    return Counter(toks[i:i + n] for i in range(len(toks) - n + 1))


def _all_ngrams(tokens: Caption, n_max: int) -> Counter:
    out = Counter()
    for n in range(1, n_max + 1):
        out.update(ngrams(tokens, n))
    return out


# -- BLEU ------------------------------------------------------------------

def modified_precision(candidate: Caption, references: Sequence[Caption], n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for order n."""
    cand = ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, sum(cand.values())


def _closest_ref_len(cand_len: int, references: Sequence[Caption]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu(candidate: Caption, references: Sequence[Caption], n: int = 4, smooth: bool = True) -> float:
    """Sentence BLEU-n. With ``smooth``, orders >= 2 with zero matches use (0+1)/(count+1)."""
    if not references:
        raise ValueError("bleu: no references")
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        m, total = modified_precision(candidate, references, k)
        if m == 0 and smooth and k >= 2:
            m, total = 1, total + 1
        if m == 0 or total == 0:
            return 0.0
        log_sum += math.log(m / total)
    bp = _brevity_penalty(len(candidate), _closest_ref_len(len(candidate), references))
    return bp * math.exp(log_sum / n)


def corpus_bleu(candidates: Sequence[Caption], references: Sequence[Sequence[Caption]], n: int = 4) -> list[float]:
    """Corpus BLEU-1..n: clipped counts and lengths pooled before the geometric mean."""
    if len(candidates) != len(references):
        raise ValueError("corpus_bleu: candidates and references differ in length")
    matched = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("corpus_bleu: an item has no references")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for k in range(1, n + 1):
            m, t = modified_precision(cand, refs, k)
            matched[k - 1] += m
            totals[k - 1] += t
    bp = _brevity_penalty(c_len, r_len)
    scores = []
    log_sum = 0.0
    for k in range(n):
        if matched[k] == 0 or totals[k] == 0:
            log_sum = -math.inf
        else:
            log_sum += math.log(matched[k] / totals[k])
        scores.append(0.0 if log_sum == -math.inf else bp * math.exp(log_sum / (k + 1)))
    return scores


# -- CIDEr-D ---------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    doc_freq: Mapping[tuple, int]
    n_docs: int

    def idf(self, gram: tuple) -> float:
        # unseen n-grams count as df=1
        return math.log(max(self.n_docs, 1)) - math.log(max(1, self.doc_freq.get(gram, 0)))


def build_corpus_stats(references: Sequence[Sequence[Caption]], n: int = CIDER_N) -> CorpusStats:
    """Document frequencies where one document is the union of an image's references."""
    if not references:
        raise ValueError("build_corpus_stats: empty corpus")
    df: Counter = Counter()
    for refs in references:
        seen = set()
        for r in refs:
            seen.update(_all_ngrams(r, n))
        df.update(seen)
    return CorpusStats(MappingProxyType(dict(df)), len(references))


def _tfidf(tokens: Caption, stats: CorpusStats, n: int):
    vecs: list[dict] = [{} for _ in range(n)]
    norms = [0.0] * n
    for g, tf in _all_ngrams(tokens, n).items():
        w = tf * stats.idf(g)
        vecs[len(g) - 1][g] = w
        norms[len(g) - 1] += w * w
    return vecs, [math.sqrt(x) for x in norms], len(tokens)


def length_penalty(delta: float, sigma: float = CIDER_SIGMA) -> float:
    return math.exp(-(delta * delta) / (2.0 * sigma * sigma))


def _similarity(hyp, ref, n: int, sigma: float) -> list[float]:
    vec_h, norm_h, len_h = hyp
    vec_r, norm_r, len_r = ref
    pen = length_penalty(len_h - len_r, sigma)
    out = []
    for k in range(n):
        val = sum(min(w, vec_r[k].get(g, 0.0)) * vec_r[k].get(g, 0.0) for g, w in vec_h[k].items())
        if norm_h[k] != 0 and norm_r[k] != 0:
            val /= norm_h[k] * norm_r[k]
        out.append(val * pen)
    return out


def cider_d(candidate: Caption, references: Sequence[Caption], stats: CorpusStats,
            n: int = CIDER_N, sigma: float = CIDER_SIGMA) -> float:
    """10 x mean over n-gram orders of the reference-averaged clipped tf-idf cosine."""
    if not references:
        raise ValueError("cider_d: no references")
    hyp = _tfidf(candidate, stats, n)
    total = [0.0] * n
    for r in references:
        for k, v in enumerate(_similarity(hyp, _tfidf(r, stats, n), n, sigma)):
            total[k] += v
    return 10.0 * sum(total) / n / len(references)


def corpus_cider_d(candidates: Sequence[Caption], references: Sequence[Sequence[Caption]],
                   stats: CorpusStats | None = None) -> tuple[float, list[float]]:
    """Mean and per-item CIDEr-D; df defaults to the given references."""
    if len(candidates) != len(references):
        raise ValueError("corpus_cider_d: candidates and references differ in length")
    stats = stats or build_corpus_stats(references)
    scores = [cider_d(c, r, stats) for c, r in zip(candidates, references)]
    return (sum(scores) / len(scores) if scores else 0.0), scores
