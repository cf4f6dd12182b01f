import math

import numpy as np
import pytest

from signseq import autodiff as ad
from signseq.autodiff import finite_diff_check
from signseq.seq2seq import (BOS, EOS, ModelConfig, ModelError, Seq2Seq, Vocabulary, load_checkpoint,
                             model_from_checkpoint, save_checkpoint)
from signseq.tokenization import TokenSequence, reverse_tokens


def small_model(attention="bahdanau", seed=0, std=0.3, **kw):
    cfg = dict(token_dim=5, vocab_size=12, layers=2, hidden=8, embed=6, attention=attention,
               dropout=0.0, init_std=std)
    cfg.update(kw)
    model = Seq2Seq.init(ModelConfig(**cfg), seed=seed)
    # non-zero biases so their gradients are exercised too
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        if not p.data.any():
            p.data[...] = rng.normal(0, 0.1, size=p.shape)
    return model


def tokens(rng, z=4, d=5):
    return TokenSequence(rng.normal(size=(z, d)))


@pytest.mark.parametrize("attention", ["bahdanau", "luong"])
def test_full_model_gradient_check(attention):
    rng = np.random.default_rng(1)
    model = small_model(attention)
    seq = tokens(rng)
    target = [5, 7, EOS]
    rep = finite_diff_check(lambda: model.sentence_nll(seq, target), model.parameters())
    assert rep.ok, {k: v for k, v in rep.max_rel_error.items() if v >= 1e-4}


@pytest.mark.parametrize("attention", ["bahdanau", "luong"])
def test_ragged_batch_gradient_check(attention):
    rng = np.random.default_rng(2)
    model = small_model(attention, layers=1, input_proj=4)
    batch = [tokens(rng, 3), tokens(rng, 5)]
    targets = [[4, EOS], [6, 9, EOS]]
    rep = finite_diff_check(lambda: model.batch_nll(batch, targets), model.parameters())
    assert rep.ok, {k: v for k, v in rep.max_rel_error.items() if v >= 1e-4}


def test_encoder_gradient_check_and_reversed_input():
    rng = np.random.default_rng(3)
    model = small_model("luong")
    seq = tokens(rng, 6)
    enc_params = [p for n, p in model.params.items() if n.startswith("encoder")]

    def loss_for(s):
        return lambda: ad.mean(ad.tanh(model.encode(s).outputs))

    assert finite_diff_check(loss_for(seq), enc_params).ok
    rev = reverse_tokens(seq)
    enc_a, enc_b = model.encode(seq), model.encode(rev)
    assert enc_a.outputs.shape == enc_b.outputs.shape
    assert finite_diff_check(loss_for(rev), enc_params).ok


def test_encode_shapes():
    model = small_model(layers=3)
    enc = model.encode(tokens(np.random.default_rng(0), 5))
    assert enc.outputs.shape == (1, 5, 8)
    assert len(enc.final) == 3 and all(h.shape == (1, 8) for h in enc.final)


def test_encode_rejects_wrong_dim():
    with pytest.raises(ModelError):
        small_model().encode(TokenSequence(np.ones((3, 4))))


def test_zero_inputs_zero_weights_give_bias_determined_outputs():
    model = Seq2Seq.init(ModelConfig(token_dim=5, vocab_size=12, layers=1, hidden=8, embed=6, dropout=0.0))
    for name, p in model.params.items():
        if name.startswith("encoder") and name[-2:] in (".U", ".W"):
            p.data[...] = 0.0
    zeros = TokenSequence(np.zeros((6, 5)))
    out = model.encode(zeros).outputs.data[0]
    # zero biases (the default init): every step is the same all-zero state
    assert np.all(out == out[0])
    # with biases only, h_t = n * (1 - z^t) in closed form
    b = np.random.default_rng(0).normal(size=24)
    model["encoder.layer0.b"].data[...] = b
    out = model.encode(zeros).outputs.data[0]
    z = 1 / (1 + np.exp(-b[:8]))
    n = np.tanh(b[16:])
    expect = np.stack([n * (1 - z ** t) for t in range(1, 7)])
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_padding_does_not_change_results():
    rng = np.random.default_rng(4)
    model = small_model("bahdanau")
    short, long_ = tokens(rng, 2), tokens(rng, 6)
    alone = model.sentence_nll(short, [4, EOS]).item()
    batched_enc = model.encode([short, long_])
    single_enc = model.encode(short)
    np.testing.assert_allclose(batched_enc.final[-1].data[0], single_enc.final[-1].data[0], atol=1e-12)
    both = model.batch_nll([short, short], [[4, EOS], [4, EOS]]).item()
    assert both == pytest.approx(alone, abs=1e-12)
    st = model.init_decoder(batched_enc)
    _, _, att = model.decode_step(st, batched_enc, [BOS, BOS])
    assert np.all(att.weights.data[0, 2:] < 1e-12)


@pytest.mark.parametrize("attention", ["bahdanau", "luong"])
def test_identical_outputs_give_uniform_attention(attention):
    model = small_model(attention)
    enc = model.encode(TokenSequence(np.ones((5, 5))))
    # identical encoder outputs at every position
    enc.outputs = ad.Tensor(np.repeat(enc.outputs.data[:, :1], 5, axis=1))
    enc.keys = None
    q = ad.Tensor(np.random.default_rng(0).normal(size=(1, 8)))
    att = model.attend_bahdanau(q, enc) if attention == "bahdanau" else model.attend_luong(q, enc)[0]
    np.testing.assert_allclose(att.weights.data, np.full((1, 5), 0.2), atol=1e-12)


def test_single_position_attention():
    model = small_model("bahdanau")
    enc = model.encode(TokenSequence(np.random.default_rng(1).normal(size=(1, 5))))
    att = model.attend_bahdanau(ad.Tensor(np.ones((1, 8))), enc)
    assert att.weights.data.tolist() == [[1.0]]
    np.testing.assert_allclose(att.context.data, enc.outputs.data[:, 0], atol=1e-15)


def test_luong_orthogonal_query_is_uniform():
    model = small_model("luong")
    enc = model.encode(TokenSequence(np.ones((3, 5))))
    outs = np.zeros((1, 3, 8))
    outs[0, :, 0] = [1.0, 2.0, -3.0]
    enc.outputs = ad.Tensor(outs)
    q = np.zeros((1, 8))
    q[0, 1] = 4.0
    att, _ = model.attend_luong(ad.Tensor(q), enc)
    np.testing.assert_allclose(att.weights.data, np.full((1, 3), 1 / 3), atol=1e-12)


@pytest.mark.parametrize("attention", ["bahdanau", "luong"])
def test_attention_probability_and_convex_hull(attention):
    rng = np.random.default_rng(5)
    model = small_model(attention)
    enc = model.encode(tokens(rng, 7))
    state = model.init_decoder(enc)
    word = BOS
    lo = enc.outputs.data.min(axis=1)
    hi = enc.outputs.data.max(axis=1)
    for _ in range(6):
        logits, state, att = model.decode_step(state, enc, [word])
        w = att.weights.data
        assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-9
        assert np.all(att.context.data >= lo - 1e-12) and np.all(att.context.data <= hi + 1e-12)
        p = ad.softmax(logits).data
        assert abs(p.sum() - 1) < 1e-9 and logits.shape == (1, 12)
        word = int(logits.data.argmax())


def test_decode_step_initial_state_and_errors():
    model = small_model("bahdanau")
    enc = model.encode(tokens(np.random.default_rng(6)))
    st = model.init_decoder(enc)
    assert st.prev_word.tolist() == [BOS]
    assert all(a is b for a, b in zip(st.hiddens, enc.final))
    with pytest.raises(ModelError):
        model.decode_step(st, enc, [99])


def test_uniform_logits_loss_is_log_vocab():
    model = Seq2Seq.init(ModelConfig(token_dim=3, vocab_size=8, layers=1, hidden=4, embed=4, dropout=0.0))
    model["output.W"].data[...] = 0.0
    model["output.b"].data[...] = 0.0
    loss = model.sentence_nll(TokenSequence(np.ones((4, 3))), [5, 6, EOS]).item()
    assert loss == pytest.approx(math.log(8), abs=1e-12)


def test_peaked_logits_loss_goes_to_zero():
    model = Seq2Seq.init(ModelConfig(token_dim=3, vocab_size=8, layers=1, hidden=4, embed=4, dropout=0.0))
    model["output.W"].data[...] = 0.0
    model["output.b"].data[...] = -50.0
    model["output.b"].data[EOS] = 50.0
    assert model.sentence_nll(TokenSequence(np.ones((2, 3))), [EOS]).item() < 1e-40


def test_random_init_loss_regression_band():
    cfg = ModelConfig(token_dim=10, vocab_size=40, layers=2, hidden=64, embed=32, dropout=0.0)
    model = Seq2Seq.init(cfg, seed=0)
    rng = np.random.default_rng(0)
    loss = model.sentence_nll(TokenSequence(rng.normal(size=(12, 10))), [7, 9, 11, 13, EOS]).item()
    assert math.log(40) - 1 <= loss <= math.log(40) + 1
    assert loss == pytest.approx(3.689242703560688, abs=1e-9)


def test_target_must_end_with_eos():
    with pytest.raises(ModelError):
        small_model().sentence_nll(tokens(np.random.default_rng(0)), [4, 5])


def test_greedy_decode_determinism_and_max_len():
    model = small_model("luong", seed=3)
    seq = tokens(np.random.default_rng(7))
    a = model.greedy_decode(seq, max_len=10)
    assert a == model.greedy_decode(seq, max_len=10)
    assert len(model.greedy_decode(seq, max_len=1)) <= 1
    batch = model.greedy_decode([seq, seq], max_len=10)
    assert batch == [a, a]
    with pytest.raises(ModelError):
        model.greedy_decode(seq, max_len=0)


def test_greedy_argmax_invariant_to_logit_shift():
    model = small_model("bahdanau", seed=4)
    seq = tokens(np.random.default_rng(8))
    before = model.greedy_decode(seq, max_len=8)
    model["output.b"].data += 123.0
    assert model.greedy_decode(seq, max_len=8) == before


def test_dropout_only_in_training():
    model = small_model("bahdanau", dropout=0.5)
    seq = tokens(np.random.default_rng(9))
    a = model.sentence_nll(seq, [4, EOS]).item()
    assert a == model.sentence_nll(seq, [4, EOS]).item()
    b = model.sentence_nll(seq, [4, EOS], train=True, rng=np.random.default_rng(0)).item()
    assert a != b


def test_checkpoint_roundtrip(tmp_path):
    model = small_model("luong", input_proj=3)
    save_checkpoint(tmp_path / "m.ssck", model.config, model.params, extra={"iteration": 7})
    cfg, arrays, extra = load_checkpoint(tmp_path / "m.ssck")
    assert cfg == model.config and extra == {"iteration": 7}
    back = model_from_checkpoint(tmp_path / "m.ssck")
    for name, p in model.params.items():
        assert back[name].data.tobytes() == p.data.tobytes()
    raw = (tmp_path / "m.ssck").read_bytes()
    (tmp_path / "bad.ssck").write_bytes(raw[:-5])
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "bad.ssck")


def test_vocabulary(tmp_path):
    v = Vocabulary.from_sentences(["b a", "c a"])
    assert v.itos[:4] == ["<bos>", "<eos>", "<unk>", "<pad>"]
    assert v.encode("a c zz") == [v.stoi["a"], v.stoi["c"], 2, EOS]
    assert v.decode(v.encode("a c")) == "a c"
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").itos == v.itos
    (tmp_path / "bad.txt").write_text("x\ny\n")
    with pytest.raises(ModelError):
        Vocabulary.load(tmp_path / "bad.txt")
