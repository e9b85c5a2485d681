"""Caption evaluation metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

Self-contained so the evaluation CLI, the pipeline and the test suite all
score text through exactly the same code path. Candidates and references
are pre-tokenized lists of strings; each candidate may carry one reference
or a list of alternatives.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence[str]

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


@dataclass
class MetricScores:
    """Corpus-level scores. BLEU and ROUGE-L lie in [0, 1], CIDEr-D >= 0."""

    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float
    n_pairs: int

    def to_dict(self) -> dict:
        return {
            "bleu": [float(b) for b in self.bleu],
            "rouge_l": float(self.rouge_l),
            "cider": float(self.cider),
            "n_pairs": self.n_pairs,
        }


def _as_reference_sets(references: Sequence) -> list[list[list[str]]]:
    """Normalize references to one list of alternatives per candidate."""
    out = []
    for ref in references:
        if ref and isinstance(ref[0], str):
            out.append([list(ref)])
        else:
            out.append([list(r) for r in ref] or [[]])
    return out


def _ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[Tokens],
    references: Sequence,
    n_max: int = 4,
    smooth_eps: float = 0.0,
) -> list[float]:
    """Corpus BLEU-1..n_max: clipped n-gram precision with brevity penalty.

    No smoothing by default (a zero precision zeroes the score, as in the
    original corpus-level definition); pass smooth_eps > 0 for per-sentence
    diagnostics on short texts.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("candidates and references must be parallel, non-empty lists")
    refsets = _as_reference_sets(references)

    correct = [0] * n_max
    guess = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, refsets):
        cand_len += len(cand)
        # closest reference length; ties resolved toward the shorter one
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            cand_counts = _ngram_counts(cand, n)
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngram_counts(r, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            correct[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            guess[n - 1] += max(0, len(cand) - n + 1)

    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)

    scores = []
    log_sum = 0.0
    dead = False
    for n in range(1, n_max + 1):
        if guess[n - 1] > 0 and correct[n - 1] > 0:
            p = correct[n - 1] / guess[n - 1]
        elif guess[n - 1] > 0 and smooth_eps > 0:
            p = smooth_eps / guess[n - 1]
        else:
            p = 0.0
        if p == 0.0:
            dead = True
        else:
            log_sum += math.log(p)
        scores.append(0.0 if dead else bp * math.exp(log_sum / n))
    return scores


def _lcs_length(a: Tokens, b: Tokens) -> int:
    """Longest common subsequence length with a two-row DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(
    candidates: Sequence[Tokens],
    references: Sequence,
    beta: float = ROUGE_BETA,
) -> float:
    """LCS-based F-measure averaged over pairs.

    Per pair the maximum precision and recall over the reference
    alternatives are combined; pairs where both sides are empty are
    skipped.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("candidates and references must be parallel, non-empty lists")
    refsets = _as_reference_sets(references)

    total = 0.0
    scored = 0
    for cand, refs in zip(candidates, refsets):
        if not cand and all(not r for r in refs):
            continue
        prec_max = 0.0
        rec_max = 0.0
        for r in refs:
            lcs = _lcs_length(cand, r)
            if cand:
                prec_max = max(prec_max, lcs / len(cand))
            if r:
                rec_max = max(rec_max, lcs / len(r))
        if prec_max > 0 and rec_max > 0:
            total += ((1 + beta**2) * prec_max * rec_max) / (rec_max + beta**2 * prec_max)
        scored += 1
    return total / scored if scored else 0.0


def cider(
    candidates: Sequence[Tokens],
    references: Sequence,
    n_max: int = 4,
    sigma: float = CIDER_SIGMA,
) -> float:
    """CIDEr-D: TF-IDF n-gram cosines (n = 1..n_max) with clipped candidate
    counts and a Gaussian length penalty, averaged over n and scaled by 10.

    IDF is computed from the reference corpus, so the score of a pair
    depends on the whole corpus it is evaluated in.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("candidates and references must be parallel, non-empty lists")
    refsets = _as_reference_sets(references)
    n_pairs = len(refsets)
    if n_pairs < 2:
        warnings.warn("CIDEr IDF is degenerate on a corpus of fewer than 2 pairs", stacklevel=2)

    doc_freq: dict[tuple, int] = defaultdict(int)
    for refs in refsets:
        seen = set()
        for r in refs:
            for n in range(1, n_max + 1):
                seen.update(_ngram_counts(r, n))
        for gram in seen:
            doc_freq[gram] += 1
    log_corpus = math.log(float(n_pairs))

    def tfidf(tokens: Tokens):
        vec = [defaultdict(float) for _ in range(n_max)]
        norm = [0.0] * n_max
        for n in range(1, n_max + 1):
            for gram, tf in _ngram_counts(tokens, n).items():
                w = tf * (log_corpus - math.log(max(1.0, doc_freq[gram])))
                vec[n - 1][gram] = w
                norm[n - 1] += w * w
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    score_total = 0.0
    for cand, refs in zip(candidates, refsets):
        cvec, cnorm, clen = tfidf(cand)
        pair = [0.0] * n_max
        for r in refs:
            rvec, rnorm, rlen = tfidf(r)
            penalty = math.exp(-((clen - rlen) ** 2) / (2.0 * sigma**2))
            for n in range(n_max):
                num = sum(min(w, rvec[n][g]) * rvec[n][g] for g, w in cvec[n].items())
                if cnorm[n] != 0 and rnorm[n] != 0:
                    pair[n] += penalty * num / (cnorm[n] * rnorm[n])
        score_total += 10.0 * sum(pair) / (n_max * len(refs))
    return score_total / n_pairs


def score_corpus(candidates: Sequence[Tokens], references: Sequence) -> MetricScores:
    """All corpus metrics in one pass over the same candidate/reference pairs."""
    b = bleu(candidates, references)
    return MetricScores(
        bleu=(b[0], b[1], b[2], b[3]),
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references),
        n_pairs=len(candidates),
    )
