"""Turn keypoint or frame-feature recordings into token sequences."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .formats import GROUPS, KeypointSequence, load_features, load_keypoints

DEFAULT_WINDOW = 8


class TokenizationError(Exception):
    pass


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (Z, d)
    source_id: str = ""
    reversed: bool = False

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise TokenizationError(f"token sequence must be non-empty (Z, d), got {t.shape}")
        object.__setattr__(self, "tokens", t)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def standardize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """``(v - mean) / std`` with population std; constant inputs map to zeros."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[axis] == 0:
        raise TokenizationError("cannot normalize an empty joint group")
    mu = v.mean(axis=axis, keepdims=True)
    centered = v - mu
    sigma = np.sqrt((centered * centered).mean(axis=axis, keepdims=True))
    safe = np.where(sigma > 0, sigma, 1.0)
    return np.where(sigma > 0, centered / safe, 0.0)


def _normalize_frames(joints: np.ndarray, counts: Sequence[int], parts: Sequence[str],
                      grouping: str) -> np.ndarray:
    """joints: (N, J, 3). Returns (N, sum 2*j) normalized [x ; y] per part."""
    if grouping not in ("per-part", "whole-frame"):
        raise TokenizationError(f"unknown grouping {grouping!r}")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    blocks = []
    for name in parts:
        i = GROUPS.index(name)
        if counts[i] == 0:
            raise TokenizationError(f"group '{name}' has no joints")
        blocks.append(joints[:, offsets[i]:offsets[i + 1], :2])
    if grouping == "per-part":
        out = []
        for b in blocks:
            out.append(standardize(b[:, :, 0]))
            out.append(standardize(b[:, :, 1]))
        return np.concatenate(out, axis=1)
    allj = np.concatenate(blocks, axis=1)
    tx, ty = standardize(allj[:, :, 0]), standardize(allj[:, :, 1])
    out, start = [], 0
    for b in blocks:
        stop = start + b.shape[1]
        out.extend([tx[:, start:stop], ty[:, start:stop]])
        start = stop
    return np.concatenate(out, axis=1)


@dataclass
class KeypointFrame:
    """One frame: per group a (joints, 3) array of x, y, confidence."""

    groups: dict

    def as_arrays(self):
        counts = tuple(len(self.groups.get(g, ())) for g in GROUPS)
        joints = np.concatenate([np.asarray(self.groups[g], dtype=np.float64).reshape(-1, 3)
                                 for g in GROUPS if g in self.groups], axis=0)
        return joints[None], counts


def normalize_keypoints(frame: KeypointFrame, grouping: str = "per-part",
                        parts: Sequence[str] = GROUPS) -> np.ndarray:
    """Standardize x and y separately within each part (or over the whole frame).

    Confidence values are ignored; low-confidence joints count like any other.
    """
    for name in parts:
        if name not in frame.groups or len(frame.groups[name]) == 0:
            raise TokenizationError(f"frame has no joints for group '{name}'")
    joints, counts = frame.as_arrays()
    return _normalize_frames(joints, counts, parts, grouping)[0]


def tokenize_keypoints(seq: KeypointSequence, parts: Sequence[str] = GROUPS,
                       grouping: str = "per-part", source_id: str = "") -> TokenSequence:
    if len(seq) == 0:
        raise TokenizationError("empty keypoint sequence")
    for name in parts:
        if name not in GROUPS:
            raise TokenizationError(f"unknown part {name!r}")
        if seq.counts[GROUPS.index(name)] == 0:
            raise TokenizationError(f"part '{name}' missing from keypoint sequence")
    tokens = _normalize_frames(seq.joints, seq.counts, parts, grouping)
    return TokenSequence(tokens, source_id)


def tokenize_features(features, companion=None, source_id: str = "") -> TokenSequence:
    """One token per frame; with a companion, token i is ``[features_i ; companion_i]``.

    Either argument may be a path to a feature file or an (N, d) array.
    """
    a = _as_matrix(features)
    if companion is None:
        return TokenSequence(a, source_id)
    b = _as_matrix(companion)
    if a.shape[0] != b.shape[0]:
        raise TokenizationError(f"frame count mismatch: {a.shape[0]} vs {b.shape[0]}")
    return TokenSequence(np.concatenate([a, b], axis=1), source_id)


def mean_pool(window: np.ndarray) -> np.ndarray:
    return window.mean(axis=0)


def clip_tokenize(features, window: int = DEFAULT_WINDOW,
                  aggregator: Callable[[np.ndarray], np.ndarray] = mean_pool,
                  source_id: str = "") -> TokenSequence:
    """Split frames into consecutive non-overlapping windows, one token per window.

    The last window may be short, so ``Z = ceil(N / window)``.  The learned
    linear part of the clip embedding lives in the model's input projection.
    """
    if window < 1:
        raise TokenizationError("window must be >= 1")
    a = _as_matrix(features)
    n = a.shape[0]
    tokens = np.stack([aggregator(a[s:s + window]) for s in range(0, n, window)])
    assert tokens.shape[0] == math.ceil(n / window)
    return TokenSequence(tokens, source_id)


def reverse_tokens(seq: TokenSequence) -> TokenSequence:
    return replace(seq, tokens=seq.tokens[::-1].copy(), reversed=not seq.reversed)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return np.asarray(x, dtype=np.float64)
    return load_features(x)


@dataclass(frozen=True)
class TokenizerSpec:
    """Which tokenization pathway to apply to a manifest record."""

    kind: str = "features"  # keypoints | features | features+companion | clips
    parts: tuple = GROUPS
    grouping: str = "per-part"
    window: int = DEFAULT_WINDOW
    reverse: bool = False

    KINDS = ("keypoints", "features", "features+companion", "clips")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise TokenizationError(f"unknown tokenizer {self.kind!r}; expected one of {self.KINDS}")

    def apply(self, record) -> TokenSequence:
        if self.kind == "keypoints":
            if record.keypoint_path is None:
                raise TokenizationError(f"{record.sample_id}: no keypoint file")
            seq = tokenize_keypoints(load_keypoints(record.keypoint_path), self.parts,
                                     self.grouping, record.sample_id)
        elif self.kind == "features":
            seq = tokenize_features(_need(record.feature_path, record, "feature"),
                                    source_id=record.sample_id)
        elif self.kind == "features+companion":
            seq = tokenize_features(_need(record.feature_path, record, "feature"),
                                    _need(record.companion_path, record, "companion"),
                                    record.sample_id)
        else:
            seq = clip_tokenize(_need(record.feature_path, record, "feature"), self.window,
                                source_id=record.sample_id)
        return reverse_tokens(seq) if self.reverse else seq


def _need(path: Optional[object], record, what: str):
    if path is None:
        raise TokenizationError(f"{record.sample_id}: no {what} file")
    return path
