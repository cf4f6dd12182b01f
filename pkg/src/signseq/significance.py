"""Paired bootstrap resampling for "system A beats system B" claims.

Resampled test sets are drawn with a seed-keyed xorshift64* generator so a
report reproduces exactly from ``(seed, sizes, samples)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics

DEFAULT_SIZES = (250, 400, 600)
DEFAULT_SAMPLES = 1000

_M64 = (1 << 64) - 1
_XS_MULT = 0x2545F4914F6CDD1D


class SignificanceError(Exception):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Nonzero xorshift state for resample ``index`` under ``seed``."""
    s = splitmix64((splitmix64(seed & _M64) + index) & _M64)
    return s or 0x9E3779B97F4A7C15


def make_subsets(n: int, size: int, samples: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """Index multisets, shape (samples, size), drawn uniformly from [0, n) with replacement.

    Row k depends only on ``(seed, k)``; an index is ``(hi32(x) * n) >> 32``
    for each xorshift64* output ``x``.
    """
    if n < 1:
        raise SignificanceError("corpus must hold at least one sentence")
    if n >= 1 << 32:
        raise SignificanceError("corpus too large for 32-bit index draws")
    state = np.array([derive_seed(seed, k) for k in range(samples)], dtype=np.uint64)
    out = np.empty((samples, size), dtype=np.int64)
    s12, s25, s27, s32 = (np.uint64(v) for v in (12, 25, 27, 32))
    mult, nn = np.uint64(_XS_MULT), np.uint64(n)
    with np.errstate(over="ignore"):
        for i in range(size):
            state ^= state >> s12
            state ^= state << s25
            state ^= state >> s27
            x = state * mult
            out[:, i] = (((x >> s32) * nn) >> s32).astype(np.int64)
    return out


@dataclass
class SystemOutput:
    name: str
    hypotheses: list


@dataclass
class ComparisonReport:
    system_a: str
    system_b: str
    delta: float
    confidence: dict = field(default_factory=dict)  # size -> fraction of strict wins
    samples: int = DEFAULT_SAMPLES

    def row(self) -> str:
        cells = "".join(f"{100 * self.confidence[s]:>9.1f}%" for s in sorted(self.confidence))
        return f"{self.system_a + ' > ' + self.system_b:<36}{self.delta:>9.2f}{cells}"

    def header(self) -> str:
        return f"{'claim':<36}{'delta':>9}" + "".join(f"{s:>10}" for s in sorted(self.confidence))

    def table(self) -> str:
        return self.header() + "\n" + self.row() + "\n"

    def keyvalue(self) -> str:
        lines = [f"system_a={self.system_a}", f"system_b={self.system_b}",
                 f"delta={self.delta:.6f}", f"samples={self.samples}"]
        lines += [f"confidence_{s}={self.confidence[s]:.6f}" for s in sorted(self.confidence)]
        return "\n".join(lines) + "\n"


def _words(sentences):
    return [metrics.tokenize(s) if isinstance(s, str) else list(s) for s in sentences]


def paired_bootstrap(a: SystemOutput, b: SystemOutput, references: Sequence,
                     sizes: Sequence[int] = DEFAULT_SIZES, samples: int = DEFAULT_SAMPLES,
                     seed: int = 0,
                     observer: Optional[Callable[[int, str, np.ndarray], None]] = None,
                     chunk: int = 100) -> ComparisonReport:
    """Fraction of paired resamples on which A's corpus BLEU-4 strictly exceeds B's.

    Both systems are scored on the same index multiset in every resample and
    corpus BLEU is recomputed from pooled counts.  ``observer`` receives
    ``(size, system_name, indices)`` for each scored block.
    """
    refs = _words(references)
    ha, hb = _words(a.hypotheses), _words(b.hypotheses)
    if not (len(ha) == len(hb) == len(refs)):
        raise SignificanceError(
            f"misaligned outputs: {len(ha)} / {len(hb)} hypotheses for {len(refs)} references")
    if samples < 1:
        raise SignificanceError("samples must be positive")
    sa = metrics.stats_matrix(ha, refs)
    sb = metrics.stats_matrix(hb, refs)
    delta = metrics.bleu(ha, refs)[3] - metrics.bleu(hb, refs)[3]
    report = ComparisonReport(a.name, b.name, delta, samples=samples)
    for size in sizes:
        idx = make_subsets(len(refs), size, samples, seed)
        wins = 0
        for lo in range(0, samples, chunk):
            block = idx[lo:lo + chunk]
            if observer is not None:
                observer(size, a.name, block)
                observer(size, b.name, block)
            score_a = metrics.bleu_from_matrix(sa[block].sum(axis=1))
            score_b = metrics.bleu_from_matrix(sb[block].sum(axis=1))
            wins += int(np.count_nonzero(score_a > score_b))
        report.confidence[size] = wins / samples
    return report


def comparison_table(reports: Sequence[ComparisonReport]) -> str:
    if not reports:
        return ""
    return reports[0].header() + "\n" + "".join(r.row() + "\n" for r in reports)
