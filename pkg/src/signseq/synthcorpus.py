"""A toy sign language for desk-scale experiments.

Latent gloss sequences are rendered as keypoint frames (concatenated
per-gloss pose prototypes, Gaussian noise, inserted garbage frames) and as
feature vectors (a fixed linear projection of those keypoints).  Targets come
from a small synchronous grammar: each gloss maps to one content word, the
final gloss is fronted, and every even gloss is preceded by an article.
Languages share the gloss inventory and differ only by an affine rendering
transform, which is the domain shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .formats import KeypointSequence, ManifestRecord, save_features, save_keypoints, write_lines, \
    write_manifest

N_GLOSSES = 60
N_FUNCTION = 30
GROUP_SIZES = (8, 21, 21)  # body, right hand, left hand
N_JOINTS = sum(GROUP_SIZES)
SPLITS = ("train", "dev", "test")
PIXEL_SCALE = 100.0

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class SynthError(Exception):
    pass


def _syllables():
    return [c + v for c in _CONSONANTS for v in _VOWELS]


def content_words() -> list:
    """Gloss g is spoken as ``content_words()[g]`` (two-syllable pseudo-words)."""
    syl = _syllables()
    return [syl[i % len(syl)] + syl[(7 * i + 3) % len(syl)] for i in range(N_GLOSSES)]


def function_words() -> list:
    """Single-syllable articles, disjoint from the content words."""
    return _syllables()[:N_FUNCTION]


def gloss_names() -> list:
    return [f"G{g:02d}" for g in range(N_GLOSSES)]


def realize(glosses: Sequence[int]) -> list:
    """Target words for a gloss sequence: final gloss fronted, articles before even glosses."""
    if not glosses:
        raise SynthError("empty gloss sequence")
    cw, fw = content_words(), function_words()
    order = [glosses[-1], *glosses[:-1]]
    words = []
    for g in order:
        if g % 2 == 0:
            words.append(fw[(g // 2) % N_FUNCTION])
        words.append(cw[g])
    return words


def parse(words: Sequence[str]) -> list:
    """Inverse grammar: recover the gloss sequence from target words."""
    cw, fw = content_words(), function_words()
    index = {w: g for g, w in enumerate(cw)}
    glosses = []
    pending = None
    for w in words:
        if w in index:
            g = index[w]
            expect = fw[(g // 2) % N_FUNCTION] if g % 2 == 0 else None
            if pending != expect:
                raise SynthError(f"article {pending!r} before {w!r} breaks the grammar")
            glosses.append(g)
            pending = None
        elif w in fw and pending is None:
            pending = w
        else:
            raise SynthError(f"unexpected word {w!r}")
    if pending is not None or not glosses:
        raise SynthError("sentence ends inside an article phrase")
    return [*glosses[1:], glosses[0]]


# ---------------------------------------------------------------------------
# configuration and inventory


@dataclass
class SynthConfig:
    seed: int = 0
    languages: int = 2
    sentences: int = 700
    length_range: tuple = (3, 6)
    noise: float = 0.02
    garbage_prob: float = 0.05
    shift: float = 1.0
    splits: tuple = (600 / 700, 50 / 700, 50 / 700)
    eval_language: Optional[int] = None  # dev/test rendering language; default the last one
    feature_dim: int = 32
    companion_dim: int = 0

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.splits = tuple(self.splits)
        if self.languages < 1:
            raise SynthError("need at least one language")
        if not 0.0 <= self.garbage_prob < 1.0:
            raise SynthError("garbage probability must lie in [0, 1)")
        if self.noise < 0 or self.shift < 0:
            raise SynthError("noise and shift must be >= 0")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise SynthError(f"bad gloss length range {self.length_range}")
        if len(self.splits) != 3 or any(r < 0 for r in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise SynthError(f"splits {self.splits} must be three non-negative ratios summing to 1")
        if self.eval_language is not None and not 0 <= self.eval_language < self.languages:
            raise SynthError(f"eval language {self.eval_language} not in config")
        if self.feature_dim < 1:
            raise SynthError("feature dimension must be positive")

    @property
    def eval_lang(self) -> int:
        return self.languages - 1 if self.eval_language is None else self.eval_language

    def split_counts(self) -> tuple:
        n_train = int(round(self.splits[0] * self.sentences))
        n_dev = int(round(self.splits[1] * self.sentences))
        n_test = self.sentences - n_train - n_dev
        if n_test < 0 or (self.splits[2] > 0 and n_test == 0 and self.sentences >= 3):
            raise SynthError(f"cannot split {self.sentences} sentences as {self.splits}")
        return n_train, n_dev, n_test

    def language_of(self, split: str) -> int:
        return 0 if split == "train" else self.eval_lang


@dataclass
class Language:
    offset: np.ndarray  # (2,) pixels
    scale: float


@dataclass
class GlossInventory:
    prototypes: list  # per gloss (L, J, 2) pixel coordinates
    rest: np.ndarray  # (J, 2) neutral pose
    languages: list
    projection: np.ndarray  # (2J, feature_dim)
    companion: Optional[np.ndarray] = None


def _rest_pose(rng: np.random.Generator) -> np.ndarray:
    body = np.array([[320, 120], [320, 170], [270, 175], [370, 175],
                     [255, 240], [385, 240], [260, 300], [380, 300]], dtype=float)
    right = body[6] + rng.normal(0, 12, size=(21, 2))
    left = body[7] + rng.normal(0, 12, size=(21, 2))
    return np.vstack([body, right, left])


def build_inventory(config: SynthConfig) -> GlossInventory:
    rng = np.random.default_rng([config.seed, 0])
    rest = _rest_pose(rng)
    protos = []
    for _ in range(N_GLOSSES):
        length = int(rng.integers(3, 11))
        start = rng.normal(0, 25, size=(N_JOINTS, 2))
        end = rng.normal(0, 25, size=(N_JOINTS, 2))
        w = np.linspace(0, 1, length)[:, None, None]
        protos.append(rest + (1 - w) * start + w * end)
    langs = [Language(np.zeros(2), 1.0)]
    for _ in range(1, config.languages):
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        offset = config.shift * PIXEL_SCALE * direction
        scale = float(np.exp(config.shift * rng.uniform(0.2, 0.4) * rng.choice([-1, 1])))
        langs.append(Language(offset, scale))
    proj = rng.normal(0, 1 / np.sqrt(2 * N_JOINTS), size=(2 * N_JOINTS, config.feature_dim))
    comp = None
    if config.companion_dim:
        comp = rng.normal(0, 1 / np.sqrt(2 * GROUP_SIZES[0]), size=(2 * GROUP_SIZES[0], config.companion_dim))
    return GlossInventory(protos, rest, langs, proj, comp)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class SynthSample:
    sample_id: str
    split: str
    language: int
    glosses: list
    words: list
    xy: np.ndarray  # (N, J, 2) pixels, after the language transform
    confidence: np.ndarray  # (N, J)
    garbage: np.ndarray  # (N,) bool

    @property
    def sentence(self) -> str:
        return " ".join(self.words)


def render_frames(glosses: Sequence[int], inv: GlossInventory, noise: float, garbage_prob: float,
                  rng: np.random.Generator) -> tuple:
    """Prototype concatenation with noise and garbage frames, in the reference domain."""
    frames, conf, garbage = [], [], []
    for g in glosses:
        for pose in inv.prototypes[g]:
            while garbage_prob > 0 and rng.random() < garbage_prob:
                frames.append(inv.rest + rng.normal(0, 40, size=inv.rest.shape))
                conf.append(rng.uniform(0.0, 0.3, size=N_JOINTS))
                garbage.append(True)
            frames.append(pose + (rng.normal(0, noise * PIXEL_SCALE, size=pose.shape) if noise else 0.0))
            conf.append(rng.uniform(0.6, 1.0, size=N_JOINTS))
            garbage.append(False)
    return np.array(frames), np.array(conf), np.array(garbage, dtype=bool)


def render_domain(xy: np.ndarray, language: int, inv: GlossInventory) -> np.ndarray:
    """Apply the language's affine rendering transform (scale about the origin, then offset)."""
    if not 0 <= language < len(inv.languages):
        raise SynthError(f"unknown language {language}")
    lang = inv.languages[language]
    if lang.scale == 1.0 and not lang.offset.any():
        return xy.copy()
    return xy * lang.scale + lang.offset


def features_of(xy: np.ndarray, inv: GlossInventory) -> np.ndarray:
    """Raw per-frame features: fixed linear projection of pixel coordinates / 100."""
    flat = xy.reshape(len(xy), -1) / PIXEL_SCALE
    return flat @ inv.projection


def companion_of(xy: np.ndarray, inv: GlossInventory) -> np.ndarray:
    body = xy[:, :GROUP_SIZES[0]].reshape(len(xy), -1) / PIXEL_SCALE
    return body @ inv.companion


def sample_glosses(config: SynthConfig, rng: np.random.Generator) -> list:
    lo, hi = config.length_range
    return [int(g) for g in rng.integers(0, N_GLOSSES, size=int(rng.integers(lo, hi + 1)))]


def generate_samples(config: SynthConfig) -> tuple:
    """All samples in memory, without touching the filesystem."""
    inv = build_inventory(config)
    counts = config.split_counts()
    samples = []
    k = 0
    for split, count in zip(SPLITS, counts):
        lang = config.language_of(split)
        for _ in range(count):
            rng = np.random.default_rng([config.seed, 1, k])
            glosses = sample_glosses(config, rng)
            xy, conf, garbage = render_frames(glosses, inv, config.noise, config.garbage_prob, rng)
            xy = render_domain(xy, lang, inv)
            samples.append(SynthSample(f"s{k:05d}", split, lang, glosses, realize(glosses),
                                       xy, conf, garbage))
            k += 1
    return samples, inv


@dataclass
class GeneratedCorpus:
    root: Path
    manifests: dict = field(default_factory=dict)  # split -> path
    samples: list = field(default_factory=list)
    inventory: Optional[GlossInventory] = None


def generate(config: SynthConfig, out_dir) -> GeneratedCorpus:
    """Write manifests, feature/keypoint files, sentence and gloss files under ``out_dir``.

    Layout: ``{split}.tsv``, ``{split}.sentences.txt``, ``{split}.glosses.txt``
    and ``data/{id}.sseq`` / ``data/{id}.skp`` (plus ``data/{id}.ctx.sseq``
    when a companion stream is configured).
    """
    root = Path(out_dir)
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    samples, inv = generate_samples(config)
    corpus = GeneratedCorpus(root, samples=samples, inventory=inv)
    names = gloss_names()
    for split in SPLITS:
        records, sents, gl = [], [], []
        for s in (x for x in samples if x.split == split):
            feat = data / f"{s.sample_id}.sseq"
            kp = data / f"{s.sample_id}.skp"
            save_features(feat, features_of(s.xy, inv))
            joints = np.concatenate([s.xy, s.confidence[..., None]], axis=2)
            save_keypoints(kp, KeypointSequence(joints, GROUP_SIZES))
            comp = None
            if inv.companion is not None:
                comp = data / f"{s.sample_id}.ctx.sseq"
                save_features(comp, companion_of(s.xy, inv))
            records.append(ManifestRecord(s.sample_id, feat, comp, kp, s.sentence))
            sents.append(s.sentence)
            gl.append(" ".join(names[g] for g in s.glosses))
        path = root / f"{split}.tsv"
        write_manifest(path, records)
        write_lines(root / f"{split}.sentences.txt", sents)
        write_lines(root / f"{split}.glosses.txt", gl)
        corpus.manifests[split] = path
    return corpus

