"""Corpus-level caption evaluation: BLEU-1..4, ROUGE-L, CIDEr-D, and a
reduced METEOR (exact + stem matching, no synonym stage).

All metrics are pure functions of a corpus of tokenized captions and
are invariant under image reordering. BLEU/ROUGE/METEOR lie in [0, 1];
CIDEr-D in [0, 10].
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, fields

from .porter import porter_stem


class CorpusError(ValueError):
    """Empty corpus or malformed candidate/reference pairing."""


_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return [t for t in text.lower().translate(_PUNCT).split() if t]


@dataclass
class CorpusPair:
    """Per image: one candidate and at least one reference caption."""

    candidates: list[list[str]]
    references: list[list[list[str]]]

    def __post_init__(self):
        if not self.candidates:
            raise CorpusError("corpus is empty")
        if len(self.candidates) != len(self.references):
            raise CorpusError(
                f"{len(self.candidates)} candidates vs {len(self.references)} reference sets"
            )
        for i, refs in enumerate(self.references):
            if not refs:
                raise CorpusError(f"image {i} has no references")

    @classmethod
    def from_strings(cls, candidates, references):
        return cls(
            [tokenize(c) for c in candidates],
            [[tokenize(r) for r in refs] for refs in references],
        )

    def __len__(self):
        return len(self.candidates)


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_lite: float
    rouge_l: float
    cider_d: float

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_corpus(corpus: CorpusPair, max_n: int = 4) -> tuple[float, ...]:
    """Corpus-level BLEU-1..max_n with clipped counts, no smoothing.

    BP = min(1, e^(1 - r/c)) where r sums the per-image reference
    length closest to the candidate (ties go to the shorter length).
    Any zero n-gram precision zeroes every BLEU-N with N >= n.
    """
    clipped = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(corpus.candidates, corpus.references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = Counter(_ngrams(cand, n))
            if not counts:
                continue
            max_ref = Counter()
            for ref in refs:
                for g, c in Counter(_ngrams(ref, n)).items():
                    max_ref[g] = max(max_ref[g], c)
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    precisions = [c / t if t else 0.0 for c, t in zip(clipped, total)]
    scores = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n))
    return tuple(scores)


# ---------------------------------------------------------------------
# ROUGE-L


def _lcs_len(a, b):
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, 1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l_corpus(corpus: CorpusPair, beta: float = 1.2) -> float:
    """Mean over images of the best-reference LCS F-score."""
    total = 0.0
    for cand, refs in zip(corpus.candidates, corpus.references):
        best = 0.0
        for ref in refs:
            lcs = _lcs_len(cand, ref)
            if lcs == 0:
                continue
            r = lcs / len(ref)
            p = lcs / len(cand)
            best = max(best, ((1 + beta**2) * r * p) / (r + beta**2 * p))
        total += best
    return total / len(corpus)


# ---------------------------------------------------------------------
# CIDEr-D


def cider_d_corpus(corpus: CorpusPair, max_n: int = 4, sigma: float = 6.0) -> float:
    """Consensus metric: clipped TF-IDF cosine per n with a Gaussian
    length penalty, averaged over n and references, scaled by 10.

    IDF comes from the reference corpus: log(#images / doc-freq), where
    an n-gram counts once per image whose references contain it.
    """
    n_images = len(corpus)
    df: Counter = Counter()
    for refs in corpus.references:
        seen = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(_ngrams(ref, n))
        df.update(seen)

    def idf(g):
        return math.log(n_images / max(1.0, df[g]))

    def vec(tokens):
        vs, norms = [], []
        for n in range(1, max_n + 1):
            v = {g: c * idf(g) for g, c in Counter(_ngrams(tokens, n)).items()}
            vs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vs, norms

    total = 0.0
    for cand, refs in zip(corpus.candidates, corpus.references):
        vc, nc = vec(cand)
        acc = [0.0] * max_n
        for ref in refs:
            vr, nr = vec(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma**2))
            for n in range(max_n):
                if nc[n] == 0.0 or nr[n] == 0.0:
                    continue
                num = sum(min(w, vr[n][g]) * vr[n][g] for g, w in vc[n].items() if g in vr[n])
                acc[n] += penalty * num / (nc[n] * nr[n])
        total += 10.0 * sum(a / len(refs) for a in acc) / max_n
    return total / n_images


# ---------------------------------------------------------------------
# METEOR-lite


def _align(cand, ref, memo_limit: int = 500_000):
    """Best unigram alignment between candidate and reference.

    Matching runs in two stages, exact words then Porter stems, each
    stage maximal in cardinality on what the previous stage left
    unmatched. Among alignments realizing those maxima the one with the
    fewest chunks (maximal runs contiguous in both captions) wins.
    Returns (matches, chunks).
    """
    cstems = [porter_stem(w) for w in cand]
    rstems = [porter_stem(w) for w in ref]
    # 0 = no match, 1 = stem match, 2 = exact match; exact dominates
    pair_kind = [
        [
            2 if cw == rw else (1 if cs == rs else 0)
            for rw, rs in zip(ref, rstems)
        ]
        for cw, cs in zip(cand, cstems)
    ]
    memo: dict = {}

    def best(i, used, prev_j):
        """Max (exact, total, -chunks) achievable from cand position i."""
        if i == len(cand):
            return (0, 0, 0)
        key = (i, used, prev_j)
        hit = memo.get(key)
        if hit is not None:
            return hit
        # option: leave cand[i] unmatched
        e, t, negc = best(i + 1, used, -2)
        out = (e, t, negc)
        for j, kind in enumerate(pair_kind[i]):
            if kind == 0 or used & (1 << j):
                continue
            e, t, negc = best(i + 1, used | (1 << j), j)
            new_chunk = 0 if prev_j == j - 1 else 1
            cand_out = (e + (1 if kind == 2 else 0), t + 1, negc - new_chunk)
            if cand_out > out:
                out = cand_out
        if len(memo) < memo_limit:
            memo[key] = out
        return out

    exact, total, negc = best(0, 0, -2)
    return total, -negc


def meteor_lite_corpus(corpus: CorpusPair) -> float:
    """Mean over images of the best-reference reduced-METEOR score:
    F = PR / (0.9 P + 0.1 R), penalty = 0.5 (chunks/matches)^3."""
    total = 0.0
    for cand, refs in zip(corpus.candidates, corpus.references):
        best = 0.0
        for ref in refs:
            m, chunks = _align(cand, ref)
            if m == 0:
                continue
            p = m / len(cand)
            r = m / len(ref)
            f = (p * r) / (0.9 * p + 0.1 * r)
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, f * (1.0 - penalty))
        total += best
    return total / len(corpus)


# ---------------------------------------------------------------------


def evaluate_all(corpus: CorpusPair) -> MetricReport:
    """All metric families on one corpus; deterministic."""
    b1, b2, b3, b4 = bleu_corpus(corpus)
    return MetricReport(
        bleu1=b1,
        bleu2=b2,
        bleu3=b3,
        bleu4=b4,
        meteor_lite=meteor_lite_corpus(corpus),
        rouge_l=rouge_l_corpus(corpus),
        cider_d=cider_d_corpus(corpus),
    )
