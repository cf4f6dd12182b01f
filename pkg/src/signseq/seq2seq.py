"""Attentional GRU encoder-decoder over token sequences.

The encoder is a stack of unidirectional GRUs whose final hidden states
initialise the decoder layer by layer.  Two attention variants are
supported:

``bahdanau``
    additive scores ``v . tanh(W_q h_{t-1} + W_k o_i + b)`` from the previous
    decoder output; the context joins the input of the last decoder layer.
``luong``
    scaled dot-product scores ``h_t . o_i / sqrt(H)`` from the current
    output; ``y_t = tanh(W [c_t ; h_t] + b)`` feeds the vocabulary projection
    and, with the next word embedding, the first layer at step ``t + 1``.

Batches are padded; masks keep padded encoder steps from changing hidden
states and from receiving attention.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

BOS, EOS, UNK, PAD = 0, 1, 2, 3
RESERVED = ("<bos>", "<eos>", "<unk>", "<pad>")
ATTENTION_KINDS = ("bahdanau", "luong")
_MASK_FILL = -1e9


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    token_dim: int
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    embed: int = 32
    attention: str = "bahdanau"
    dropout: float = 0.2
    residual: bool = True
    init_std: float = 0.02
    input_proj: int = 0  # width of a learned linear map applied to tokens; 0 disables it

    def __post_init__(self):
        if min(self.layers, self.hidden, self.embed, self.token_dim) < 1:
            raise ModelError("layers, hidden, embed and token_dim must be >= 1")
        if self.vocab_size <= len(RESERVED):
            raise ModelError("vocabulary must hold more than the reserved symbols")
        if self.attention not in ATTENTION_KINDS:
            raise ModelError(f"attention must be one of {ATTENTION_KINDS}")
        if self.init_std <= 0:
            raise ModelError("init_std must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, words: Sequence[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def from_sentences(cls, sentences) -> "Vocabulary":
        words = sorted({w for s in sentences for w in s.split()})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: str) -> list[int]:
        """Word ids with a trailing EOS."""
        return [self.stoi.get(w, UNK) for w in sentence.split()] + [EOS]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ModelError(f"{path}: first four lines must be {RESERVED}")
        return cls(lines[4:])


# ---------------------------------------------------------------------------
# state containers


@dataclass
class EncoderState:
    outputs: Tensor  # (B, Z, H)
    final: list  # L tensors (B, H)
    mask: np.ndarray  # (B, Z) 1.0 for real tokens
    keys: Optional[Tensor] = None  # Bahdanau key projection of outputs

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)


@dataclass
class DecoderState:
    hiddens: list  # L tensors (B, H)
    output: Tensor  # top-layer output of the previous step (B, H)
    feed: Optional[Tensor] = None  # Luong attentional vector of the previous step
    prev_word: Optional[np.ndarray] = None


@dataclass
class AttentionWeights:
    scores: np.ndarray
    weights: Tensor  # (B, Z)
    context: Tensor  # (B, H)


# ---------------------------------------------------------------------------
# model


@dataclass
class Seq2Seq:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Seq2Seq":
        model = cls(config)
        rng = np.random.default_rng(seed)
        for name, shape in model.param_shapes().items():
            if name.endswith(".b") or name.endswith("bias"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            model.params[name] = Parameter(data, name)
        return model

    def param_shapes(self) -> dict:
        c = self.config
        H, E, V = c.hidden, c.embed, c.vocab_size
        shapes = {}
        d = c.token_dim
        if c.input_proj:
            shapes["encoder.input_proj.W"] = (d, c.input_proj)
            shapes["encoder.input_proj.b"] = (c.input_proj,)
            d = c.input_proj
        for layer in range(c.layers):
            n_in = d if layer == 0 else H
            shapes.update(_gru_shapes(f"encoder.layer{layer}", n_in, H))
        for layer in range(c.layers):
            if layer == 0:
                n_in = E + (H if c.attention == "luong" else 0)
            else:
                n_in = H
            if c.attention == "bahdanau" and layer == c.layers - 1:
                n_in += H
            shapes.update(_gru_shapes(f"decoder.layer{layer}", n_in, H))
        shapes["decoder.embedding"] = (V, E)
        if c.attention == "bahdanau":
            shapes["attention.W_query"] = (H, H)
            shapes["attention.W_key"] = (H, H)
            shapes["attention.bias"] = (H,)
            shapes["attention.v"] = (H, 1)
        else:
            shapes["attention.combine.W"] = (2 * H, H)
            shapes["attention.combine.b"] = (H,)
        shapes["output.W"] = (H, V)
        shapes["output.b"] = (V,)
        return shapes

    def parameters(self) -> list:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    # -- encoder ----------------------------------------------------------

    def encode(self, tokens, train: bool = False, rng=None) -> EncoderState:
        """Encode one token sequence or a list of them (padded into a batch)."""
        c = self.config
        arrays = _as_batch(tokens)
        for a in arrays:
            if a.shape[1] != c.token_dim:
                raise ModelError(f"token dim {a.shape[1]} does not match model token_dim {c.token_dim}")
        B = len(arrays)
        Z = max(a.shape[0] for a in arrays)
        x = np.zeros((B, Z, c.token_dim))
        mask = np.zeros((B, Z))
        for i, a in enumerate(arrays):
            x[i, :a.shape[0]] = a
            mask[i, :a.shape[0]] = 1.0
        ragged = not np.all(mask == 1.0)

        inp = Tensor(x)
        if c.input_proj:
            inp = _linear3(inp, self["encoder.input_proj.W"], self["encoder.input_proj.b"])
        # input projections of the first layer for every step at once
        gx0 = _linear3(inp, self["encoder.layer0.W"], self["encoder.layer0.b"])

        H = c.hidden
        hiddens = [Tensor(np.zeros((B, H))) for _ in range(c.layers)]
        outputs = []
        for t in range(Z):
            step_mask = Tensor(np.repeat(mask[:, t:t + 1], H, axis=1)) if ragged else None
            below = None
            for layer in range(c.layers):
                prefix = f"encoder.layer{layer}"
                if layer == 0:
                    gx = ad.select(gx0, t, axis=1)
                else:
                    below_in = _dropout(below, c.dropout, train, rng)
                    gx = ad.add(below_in @ self[prefix + ".W"], self[prefix + ".b"])
                h_new = _gru_step(gx, hiddens[layer], self[prefix + ".U"], H)
                if step_mask is not None:
                    h_new = ad.add(hiddens[layer], ad.mul(step_mask, ad.sub(h_new, hiddens[layer])))
                hiddens[layer] = h_new
                out = h_new
                if layer > 0 and c.residual:
                    out = ad.add(out, below)
                below = out
            outputs.append(below)
        enc = EncoderState(ad.stack(outputs, axis=1), hiddens, mask)
        if c.attention == "bahdanau":
            enc.keys = _linear3(enc.outputs, self["attention.W_key"])
        return enc

    # -- attention --------------------------------------------------------

    def _mask_bias(self, enc: EncoderState) -> Optional[Tensor]:
        if np.all(enc.mask == 1.0):
            return None
        return Tensor(np.where(enc.mask > 0, 0.0, _MASK_FILL))

    def attend_bahdanau(self, query: Tensor, enc: EncoderState) -> AttentionWeights:
        B, Z, H = enc.outputs.shape
        keys = enc.keys if enc.keys is not None else _linear3(enc.outputs, self["attention.W_key"])
        q = ad.add(query @ self["attention.W_query"], self["attention.bias"])
        energy = ad.tanh(ad.add(keys, ad.expand(q, 1, Z)))
        scores = ad.reshape(_linear3(energy, self["attention.v"]), (B, Z))
        return self._finish_attention(scores, enc)

    def attend_luong(self, query: Tensor, enc: EncoderState) -> tuple[AttentionWeights, Tensor]:
        B, Z, H = enc.outputs.shape
        raw = ad.reshape(enc.outputs @ ad.reshape(query, (B, H, 1)), (B, Z))
        att = self._finish_attention(ad.scale(raw, 1.0 / math.sqrt(H)), enc)
        y = ad.tanh(ad.add(ad.concat([att.context, query], axis=1) @ self["attention.combine.W"],
                           self["attention.combine.b"]))
        return att, y

    def _finish_attention(self, scores: Tensor, enc: EncoderState) -> AttentionWeights:
        B, Z, H = enc.outputs.shape
        bias = self._mask_bias(enc)
        if bias is not None:
            scores = ad.add(scores, bias)
        weights = ad.softmax(scores)
        context = ad.reshape(ad.reshape(weights, (B, 1, Z)) @ enc.outputs, (B, H))
        return AttentionWeights(scores.data, weights, context)

    # -- decoder ----------------------------------------------------------

    def init_decoder(self, enc: EncoderState) -> DecoderState:
        B = enc.outputs.shape[0]
        feed = Tensor(np.zeros((B, self.config.hidden))) if self.config.attention == "luong" else None
        return DecoderState(list(enc.final), enc.final[-1], feed, np.full(B, BOS))

    def decode_step(self, state: DecoderState, enc: EncoderState, word_ids,
                    train: bool = False, rng=None):
        """Advance one step; returns ``(logits (B, V), next_state, attention)``."""
        c = self.config
        ids = np.atleast_1d(np.asarray(word_ids, dtype=np.int64))
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise ModelError(f"word id out of range [0, {c.vocab_size})")
        if len(state.hiddens) != c.layers:
            raise ModelError(f"decoder state has {len(state.hiddens)} layers, model has {c.layers}")
        H = c.hidden
        emb = ad.embedding(self["decoder.embedding"], ids)

        att = None
        if c.attention == "bahdanau":
            att = self.attend_bahdanau(state.output, enc)
            first_in = emb
        else:
            first_in = ad.concat([emb, state.feed], axis=1)

        hiddens = []
        below = None
        for layer in range(c.layers):
            prefix = f"decoder.layer{layer}"
            x = first_in if layer == 0 else _dropout(below, c.dropout, train, rng)
            if c.attention == "bahdanau" and layer == c.layers - 1:
                x = ad.concat([x, att.context], axis=1)
            gx = ad.add(x @ self[prefix + ".W"], self[prefix + ".b"])
            h = _gru_step(gx, state.hiddens[layer], self[prefix + ".U"], H)
            hiddens.append(h)
            out = ad.add(h, below) if layer > 0 and c.residual else h
            below = out

        feed = None
        if c.attention == "luong":
            att, feed = self.attend_luong(below, enc)
            top = feed
        else:
            top = below
        logits = ad.add(top @ self["output.W"], self["output.b"])
        return logits, DecoderState(hiddens, below, feed, ids), att

    # -- losses and decoding ----------------------------------------------

    def batch_nll(self, tokens, targets: Sequence[Sequence[int]], train: bool = False, rng=None,
                  teacher_forcing: float = 1.0) -> Tensor:
        """Mean over the batch of each sentence's mean per-position NLL.

        ``targets`` are word-id lists ending in EOS.  With ``teacher_forcing``
        below 1, each decoder input after BOS is the gold previous word with
        that probability and the model's previous argmax otherwise.
        """
        B = len(targets)
        for t in targets:
            if len(t) == 0 or t[-1] != EOS:
                raise ModelError("every target must be non-empty and end with EOS")
        enc = self.encode(tokens, train=train, rng=rng)
        if enc.outputs.shape[0] != B:
            raise ModelError("token batch and target batch differ in size")
        S = max(len(t) for t in targets)
        gold = np.full((B, S), PAD, dtype=np.int64)
        weights = np.zeros((B, S))
        for i, t in enumerate(targets):
            gold[i, :len(t)] = t
            weights[i, :len(t)] = 1.0 / (len(t) * B)
        state = self.init_decoder(enc)
        inputs = np.full(B, BOS)
        logits_all = []
        for t in range(S):
            logits, state, _ = self.decode_step(state, enc, inputs, train=train, rng=rng)
            logits_all.append(logits)
            if teacher_forcing >= 1.0:
                inputs = gold[:, t]
            else:
                coin = rng.random(B) < teacher_forcing if teacher_forcing > 0 else np.zeros(B, bool)
                inputs = np.where(coin, gold[:, t], logits.data.argmax(axis=1))
        stacked = ad.reshape(ad.stack(logits_all, axis=1), (B * S, self.config.vocab_size))
        try:
            return ad.cross_entropy(stacked, gold.reshape(-1), weights.reshape(-1))
        except ad.NonFiniteError:
            bad = ~np.isfinite(stacked.data).all(axis=1).reshape(B, S)
            step = int(np.argwhere(bad.any(axis=0))[0, 0]) if bad.any() else -1
            raise ad.NonFiniteError(f"non-finite loss at target step {step}") from None

    def sentence_nll(self, tokens, target: Sequence[int], train: bool = False, rng=None) -> Tensor:
        return self.batch_nll([tokens], [list(target)], train=train, rng=rng)

    def greedy_decode(self, tokens, max_len: int = 50) -> list:
        """Argmax decoding until EOS or ``max_len`` words (EOS excluded from the output).

        Accepts one token sequence (returns a list of ids) or a list of them
        (returns a list of lists).
        """
        if max_len < 1:
            raise ModelError("max_len must be >= 1")
        single = not isinstance(tokens, (list, tuple))
        enc = self.encode(tokens)
        B = enc.outputs.shape[0]
        state = self.init_decoder(enc)
        inputs = np.full(B, BOS)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        for _ in range(max_len):
            logits, state, _ = self.decode_step(state, enc, inputs)
            inputs = logits.data.argmax(axis=1)
            for i in np.flatnonzero(~done):
                if inputs[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(inputs[i]))
            if done.all():
                break
        return out[0] if single else out


def _linear3(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Apply ``x W (+ b)`` to every position of a (B, Z, n) tensor."""
    B, Z, n = x.shape
    y = ad.reshape(x, (B * Z, n)) @ W
    if b is not None:
        y = ad.add(y, b)
    return ad.reshape(y, (B, Z, W.shape[1]))


def _gru_shapes(prefix: str, n_in: int, H: int) -> dict:
    return {prefix + ".W": (n_in, 3 * H), prefix + ".U": (H, 3 * H), prefix + ".b": (3 * H,)}


def _gru_step(gx: Tensor, h: Tensor, U: Parameter, H: int) -> Tensor:
    """GRU update from precomputed input projection ``gx = x W + b`` (gates z | r | n)."""
    gh = h @ U
    zr = ad.sigmoid(ad.add(ad.slice_(gx, 0, 2 * H), ad.slice_(gh, 0, 2 * H)))
    z = ad.slice_(zr, 0, H)
    r = ad.slice_(zr, H, 2 * H)
    n = ad.tanh(ad.add(ad.slice_(gx, 2 * H, 3 * H), ad.mul(r, ad.slice_(gh, 2 * H, 3 * H))))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def _dropout(x: Tensor, rate: float, train: bool, rng) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ModelError("training with dropout needs an rng")
    return ad.dropout(x, rate, rng)


def _as_batch(tokens) -> list:
    if isinstance(tokens, (list, tuple)):
        items = tokens
    else:
        items = [tokens]
    arrays = []
    for t in items:
        a = t.tokens if hasattr(t, "tokens") else np.asarray(t, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ModelError(f"token sequence must be non-empty (Z, d), got {a.shape}")
        arrays.append(a)
    if not arrays:
        raise ModelError("empty batch")
    return arrays


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"SSCK" | version u16 | config JSON length u32 | config JSON (utf-8)
#   | record count u32 | per record: name length u16, name, ndim u8,
#   dims (u32 each), float64 little-endian payload

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict, extra: Optional[dict] = None) -> None:
    meta = json.dumps({"model": asdict(config), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(meta)) + meta)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict, dict]:
    """Returns ``(config, {name: float64 array}, extra metadata)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise ModelError(f"{path}: truncated record {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
    except struct.error as exc:
        raise ModelError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise ModelError(f"{path}: trailing bytes after {count} records")
    return ModelConfig(**meta["model"]), arrays, meta.get("extra", {})


def model_from_checkpoint(path) -> Seq2Seq:
    config, arrays, _ = load_checkpoint(path)
    model = Seq2Seq(config)
    expected = model.param_shapes()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        raise ModelError(f"{path}: parameter names do not match model (missing {missing[:3]})")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise ModelError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        model.params[name] = Parameter(arrays[name], name)
    return model
