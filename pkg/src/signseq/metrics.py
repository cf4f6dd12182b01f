"""Translation metrics: corpus BLEU-1..4, ROUGE-L F1, METEOR and word diversity.

Sentences are whitespace-tokenized, case-preserved word lists.  Corpus
scores are returned on a 0-100 scale.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAX_N = 4


class MetricError(Exception):
    pass


def tokenize(sentence: str) -> list[str]:
    return sentence.split()


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class BleuStats:
    """Sufficient statistics for BLEU; summing stats pools a corpus."""

    matches: list = field(default_factory=lambda: [0] * MAX_N)
    totals: list = field(default_factory=lambda: [0] * MAX_N)
    ref_len: int = 0
    cand_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.ref_len + other.ref_len, self.cand_len + other.cand_len)

    def as_row(self) -> list:
        return [*self.matches, *self.totals, self.ref_len, self.cand_len]


def sentence_stats(candidate: Sequence[str], reference: Sequence[str],
                   max_n: int = MAX_N) -> BleuStats:
    st = BleuStats([0] * max_n, [0] * max_n, len(reference), len(candidate))
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        ref = ngrams(reference, n)
        st.matches[n - 1] = sum(min(c, ref[g]) for g, c in cand.items())
        st.totals[n - 1] = max(len(candidate) - n + 1, 0)
    return st


def bleu_from_counts(matches, totals, ref_len, cand_len, max_n: int = MAX_N,
                     smooth: bool = False) -> list[float]:
    """BLEU-1..max_n in percent from pooled counts.

    Without smoothing any zero precision makes that BLEU-n (and every higher
    order) zero.  ``smooth`` adds one to numerator and denominator for n > 1.
    """
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if dead or m == 0 or t == 0:
            dead = True
            scores.append(0.0)
            continue
        log_sum += math.log(m / t)
        scores.append(100.0 * bp * math.exp(log_sum / n))
    return scores


def corpus_stats(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                 max_n: int = MAX_N) -> list[BleuStats]:
    if len(candidates) != len(references):
        raise MetricError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise MetricError("empty candidate list")
    return [sentence_stats(c, r, max_n) for c, r in zip(candidates, references)]


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = MAX_N, smooth: bool = False) -> list[float]:
    """Corpus BLEU-1..max_n (percent) with counts pooled before division."""
    total = BleuStats([0] * max_n, [0] * max_n)
    for st in corpus_stats(candidates, references, max_n):
        total = total + st
    return bleu_from_counts(total.matches, total.totals, total.ref_len, total.cand_len,
                            max_n, smooth)


def sentence_bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = MAX_N,
                  smooth: bool = False) -> float:
    st = sentence_stats(candidate, reference, max_n)
    return bleu_from_counts(st.matches, st.totals, st.ref_len, st.cand_len, max_n, smooth)[-1]


def stats_matrix(candidates, references, max_n: int = MAX_N) -> np.ndarray:
    """Rows of ``[matches..., totals..., ref_len, cand_len]`` per sentence."""
    return np.array([st.as_row() for st in corpus_stats(candidates, references, max_n)],
                    dtype=np.int64)


def bleu_from_matrix(rows: np.ndarray, max_n: int = MAX_N) -> float:
    """Corpus BLEU-max_n from summed stats rows, vectorised over a leading axis.

    ``rows`` is (..., 2*max_n+2) already summed per resample; returns an array
    of BLEU-max_n values (percent) matching the leading shape.
    """
    rows = np.asarray(rows, dtype=np.float64)
    m = rows[..., :max_n]
    t = rows[..., max_n:2 * max_n]
    r = rows[..., 2 * max_n]
    c = rows[..., 2 * max_n + 1]
    alive = np.all(m > 0, axis=-1) & (c > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(alive[..., None], np.log(np.where(m > 0, m, 1.0) / np.where(t > 0, t, 1.0)), 0.0)
        bp = np.where(c > r, 1.0, np.exp(1.0 - r / np.where(c > 0, c, 1.0)))
    return np.where(alive, 100.0 * bp * np.exp(logp.sum(axis=-1) / max_n), 0.0)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Sentence ROUGE-L F1 in [0, 1]."""
    if not reference:
        raise MetricError("empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# METEOR


@dataclass
class MeteorStats:
    matches: int
    cand_len: int
    ref_len: int
    chunks: int

    @property
    def precision(self) -> float:
        return self.matches / self.cand_len if self.cand_len else 0.0

    @property
    def recall(self) -> float:
        return self.matches / self.ref_len if self.ref_len else 0.0

    @property
    def fmean(self) -> float:
        p, r = self.precision, self.recall
        return 10 * p * r / (r + 9 * p) if self.matches else 0.0

    @property
    def penalty(self) -> float:
        return 0.5 * (self.chunks / self.matches) ** 3 if self.matches else 0.0

    @property
    def score(self) -> float:
        return self.fmean * (1.0 - self.penalty) if self.matches else 0.0


def align(candidate: Sequence[str], reference: Sequence[str]) -> tuple[int, int]:
    """Exact-match alignment with the most matches, then the fewest chunks.

    Each reference word is used at most once.  Returns ``(matches, chunks)``.
    A chunk boundary is avoided only when consecutive candidate words map to
    consecutive reference positions, so minimising chunks is maximising such
    adjacent pairs.  Search is a memoised walk over candidate positions.
    """
    cand = tuple(candidate)
    ref = tuple(reference)
    positions = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int) -> tuple[int, int]:
        # returns (matches, adjacent pairs) for cand[i:], prev = ref index matched by cand[i-1] or -2
        if i == len(cand):
            return 0, 0
        result = best(i + 1, -2, used)
        for j in positions.get(cand[i], ()):
            if used >> j & 1:
                continue
            m, adj = best(i + 1, j, used | (1 << j))
            cand_score = (m + 1, adj + (1 if j == prev + 1 and prev >= 0 else 0))
            if cand_score > result:
                result = cand_score
        return result

    m, adj = best(0, -2, 0)
    best.cache_clear()
    return m, m - adj


def meteor_stats(candidate: Sequence[str], reference: Sequence[str]) -> MeteorStats:
    m, chunks = align(candidate, reference)
    return MeteorStats(m, len(candidate), len(reference), chunks)


def meteor(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Sentence METEOR in [0, 1]; exact unigram matching only."""
    return meteor_stats(candidate, reference).score


# ---------------------------------------------------------------------------
# corpus report


@dataclass
class MetricReport:
    system: str
    bleu: list  # BLEU-1..4, percent
    rouge_l: float  # percent, mean over sentences
    meteor: float  # percent, mean over sentences
    sentence_bleu4: list

    def as_dict(self) -> dict:
        d = {"system": self.system}
        for n, v in enumerate(self.bleu, 1):
            d[f"bleu{n}"] = round(v, 2)
        d["rouge_l"] = round(self.rouge_l, 2)
        d["meteor"] = round(self.meteor, 2)
        return d

    def table(self) -> str:
        head = f"{'system':<16}" + "".join(f"{h:>9}" for h in
                                          ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR"))
        vals = [*self.bleu, self.rouge_l, self.meteor]
        return head + "\n" + f"{self.system:<16}" + "".join(f"{v:9.2f}" for v in vals) + "\n"

    def keyvalue(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())


def evaluate(candidates: Sequence[str], references: Sequence[str], system: str = "system",
             smooth: bool = False) -> MetricReport:
    """Score parallel hypothesis/reference sentence strings."""
    cands = [tokenize(c) for c in candidates]
    refs = [tokenize(r) for r in references]
    if len(cands) != len(refs):
        raise MetricError(f"{len(cands)} hypotheses but {len(refs)} references")
    if not cands:
        raise MetricError("empty candidate list")
    scores = bleu(cands, refs, smooth=smooth)
    rouge = 100.0 * sum(rouge_l(c, r) for c, r in zip(cands, refs)) / len(refs)
    met = 100.0 * sum(meteor(c, r) for c, r in zip(cands, refs)) / len(refs)
    sent = [sentence_bleu(c, r, smooth=smooth) for c, r in zip(cands, refs)]
    return MetricReport(system, scores, rouge, met, sent)


# ---------------------------------------------------------------------------
# diversity


DEFAULT_THRESHOLDS = (0, 1, 2, 3, 5, 10)


def unique_word_counts(sentences: Iterable[str], stopwords: Iterable[str] = (),
                       thresholds: Sequence[int] = DEFAULT_THRESHOLDS) -> dict:
    """Distinct non-stop-words whose corpus frequency is strictly above each threshold."""
    if list(thresholds) != sorted(thresholds):
        raise MetricError("thresholds must be sorted ascending")
    stop = set(stopwords)
    freq = Counter(w for s in sentences for w in tokenize(s) if w not in stop)
    return {t: sum(1 for c in freq.values() if c > t) for t in thresholds}
