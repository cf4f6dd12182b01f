"""Binary and text file formats shared by the tokenizers, generator and CLI.

Feature file (``.sseq``)::

    b"SSEQ" | version u16 | N u32 | d u32 | N*d float32 (little-endian, row-major)

Keypoint file (``.skp``)::

    b"SSEQ" | version u16 | N u32 | d u32 | body, right, left joint counts (3 x u16)
    | per frame, per joint: x, y, confidence as float32

where ``d = 3 * (body + right + left)``.  Manifest lines are
``sample_id \\t feature_path \\t companion_path \\t keypoint_path \\t sentence``
with an empty string for an absent path; relative paths resolve against the
manifest's directory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MAGIC = b"SSEQ"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_COUNTS = struct.Struct("<HHH")

GROUPS = ("body", "right", "left")


class FormatError(Exception):
    """A file does not match its declared layout."""


@dataclass
class KeypointSequence:
    """Per-frame joints, shape (N, J, 3) holding x, y, confidence."""

    joints: np.ndarray
    counts: tuple  # joints per group, in GROUPS order

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise FormatError(f"keypoints must be (N, J, 3), got {self.joints.shape}")
        if sum(self.counts) != self.joints.shape[1]:
            raise FormatError(f"group counts {self.counts} do not sum to {self.joints.shape[1]}")

    def __len__(self) -> int:
        return self.joints.shape[0]

    def group_slice(self, name: str) -> slice:
        i = GROUPS.index(name)
        start = sum(self.counts[:i])
        return slice(start, start + self.counts[i])

    def group(self, name: str) -> np.ndarray:
        return self.joints[:, self.group_slice(name)]


def _read_header(buf: bytes, path) -> tuple[int, int, int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return n, d, _HEADER.size


def save_features(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise FormatError(f"{path}: feature matrix must be non-empty 2-d, got {m.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]))
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    """Load an N x d feature file, promoted to float64."""
    buf = Path(path).read_bytes()
    n, d, off = _read_header(buf, path)
    expected = n * d * 4
    if len(buf) - off != expected:
        raise FormatError(f"{path}: payload has {len(buf) - off} bytes, header implies {expected}")
    out = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{path}: non-finite values in payload")
    return out


def save_keypoints(path, seq: KeypointSequence) -> None:
    n, j, _ = seq.joints.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, 3 * j))
        f.write(_COUNTS.pack(*seq.counts))
        f.write(np.ascontiguousarray(seq.joints, dtype="<f4").tobytes())


def load_keypoints(path) -> KeypointSequence:
    buf = Path(path).read_bytes()
    n, d, off = _read_header(buf, path)
    if len(buf) < off + _COUNTS.size:
        raise FormatError(f"{path}: truncated joint counts")
    counts = _COUNTS.unpack_from(buf, off)
    off += _COUNTS.size
    j = sum(counts)
    if d != 3 * j:
        raise FormatError(f"{path}: header dim {d} != 3 x {j} joints")
    if len(buf) - off != n * d * 4:
        raise FormatError(f"{path}: payload has {len(buf) - off} bytes, header implies {n * d * 4}")
    joints = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float64).reshape(n, j, 3)
    if not np.all(np.isfinite(joints)):
        raise FormatError(f"{path}: non-finite values in payload")
    conf = joints[:, :, 2]
    if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
        raise FormatError(f"{path}: confidence outside [0, 1]")
    return KeypointSequence(joints, tuple(counts))


@dataclass
class ManifestRecord:
    sample_id: str
    feature_path: Optional[Path]
    companion_path: Optional[Path]
    keypoint_path: Optional[Path]
    sentence: str

    @property
    def words(self) -> list[str]:
        return self.sentence.split()


def _resolve(base: Path, field: str) -> Optional[Path]:
    if not field:
        return None
    p = Path(field)
    return p if p.is_absolute() else base / p


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        sid, feat, comp, kp, sentence = parts
        records.append(ManifestRecord(sid, _resolve(base, feat), _resolve(base, comp),
                                      _resolve(base, kp), sentence.strip()))
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = [
        "\t".join([r.sample_id, rel(r.feature_path), rel(r.companion_path),
                   rel(r.keypoint_path), r.sentence])
        for r in records
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{x}\n" for x in lines), encoding="utf-8")
