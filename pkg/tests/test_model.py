"""Encoder, decoder state, attention and the joint action distribution."""

import numpy as np
import pytest

import spanedit as se
import spanedit.autodiff as ad
from spanedit.corpus import PAD_ID, START_ID

from conftest import random_params_model, tiny_model, tiny_vocab


def scores_for(model, vocab, x, consumed=()):
    enc = model.encode(vocab.ids(x))
    state = model.initial_state(enc)
    state = model.advance_with_tokens(state, consumed)
    ht = model.attention_context(state, enc)
    return model.action_scores(ht, enc)


def test_config_validation():
    with pytest.raises(se.ModelError):
        se.ModelConfig(vocab_size=3)  # below the 4 reserved ids
    with pytest.raises(se.ModelError):
        se.ModelConfig(vocab_size=10, dropout=1.0)
    with pytest.raises(se.ModelError):
        se.ModelConfig(vocab_size=10, max_copy_len=2)
    with pytest.raises(se.ModelError):
        se.ModelConfig(vocab_size=10, precision="float16")
    with pytest.raises(se.ModelError):
        se.ModelConfig(vocab_size=10, enc_layers=0)


def test_copy_action_validation():
    with pytest.raises(se.ModelError):
        se.Copy(2, 2)
    with pytest.raises(se.ModelError):
        se.Copy(-1, 1)
    assert se.action_len(se.Copy(1, 4)) == 3
    assert se.action_len(se.Gen(7)) == 1


def test_parameter_shapes_and_init():
    vocab, _ = tiny_vocab()
    model = tiny_model(vocab, seed=1)
    from spanedit.model import parameter_shapes

    shapes = parameter_shapes(model.config)
    assert set(shapes) == set(model.params)
    for name, shape in shapes.items():
        assert model.params[name].data.shape == shape, name
    # biases start at zero, weights do not
    assert not model.params["dec.b_z"].data.any()
    assert model.params["embed.E"].data.any()


def test_init_seed_changes_weights():
    vocab, _ = tiny_vocab()
    a = tiny_model(vocab, seed=1).params["embed.E"].data
    b = tiny_model(vocab, seed=2).params["embed.E"].data
    assert not np.array_equal(a, b)


def test_untied_output_projection():
    vocab, _ = tiny_vocab()
    model = tiny_model(vocab, tie_embeddings=False)
    assert "out.W" in model.params and "out.W_proj" not in model.params


def test_encode_shapes():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab)
    enc = model.encode(vocab.ids(letters[:4]))
    assert enc.contextual.data.shape == (4, model.config.ctx_dim)
    assert enc.summary.data.shape == (model.config.dec_hidden,)


def test_encode_rejects_empty():
    vocab, _ = tiny_vocab()
    model = tiny_model(vocab)
    with pytest.raises(se.ModelError):
        model.encode(())


def test_encode_deterministic_in_eval():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab, dropout=0.5)
    a = model.encode(vocab.ids(letters[:5])).contextual.data
    b = model.encode(vocab.ids(letters[:5])).contextual.data
    assert np.array_equal(a, b)


def test_normalization_defect_small(rng):
    vocab, letters = tiny_vocab()
    for draw in range(20):
        model = random_params_model(vocab, rng, seed=draw)
        n = int(rng.integers(1, 9))
        x = tuple(letters[int(rng.integers(0, len(letters)))] for _ in range(n))
        dist = scores_for(model, vocab, x)
        assert dist.normalization_defect() <= 1e-6


def test_span_cell_count_n3():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab)
    dist = scores_for(model, vocab, tuple(letters[:3]))
    assert np.isfinite(dist.log_q_span.data).sum() == 6


def test_max_copy_len_one_masks_long_spans():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab, max_copy_len=1)
    dist = scores_for(model, vocab, tuple(letters[:4]))
    finite = np.argwhere(np.isfinite(dist.log_q_span.data))
    assert len(finite) == 4
    assert all(i == j for i, j in finite)  # [i, j-1] cell with j - i == 1


def test_pad_and_start_have_zero_probability():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab)
    dist = scores_for(model, vocab, tuple(letters[:3]))
    assert np.exp(dist.log_q_vocab.data[PAD_ID]) == 0.0
    assert np.exp(dist.log_q_vocab.data[START_ID]) == 0.0


def test_attention_single_position_weight_one():
    vocab, letters = tiny_vocab()
    model = tiny_model(vocab)
    enc = model.encode(vocab.ids((letters[0],)))
    state = model.initial_state(enc)
    w = model.attention_weights(state, enc)
    assert w.shape == (1,)
    assert w[0] == 1.0


def test_attention_weights_normalize(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    enc = model.encode(vocab.ids(letters[:5]))
    state = model.initial_state(enc)
    w = model.attention_weights(state, enc)
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
    assert (w >= 0).all()


def test_decoder_state_path_independent(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:4])
    enc = model.encode(vocab.ids(x))
    ids = vocab.ids(x)

    base = model.initial_state(enc)
    assert base.tokens_consumed == 0

    # one span copy versus the same tokens one at a time
    via_span = model.advance_with_tokens(base, ids[0:3])
    via_steps = base
    for tok in ids[0:3]:
        via_steps = model.decoder_advance(via_steps, tok)
    assert via_steps.tokens_consumed == via_span.tokens_consumed == 3
    assert np.array_equal(via_span.hidden.data, via_steps.hidden.data)


def test_action_distribution_log_prob_roundtrip(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:4])
    dist = scores_for(model, vocab, x)
    assert dist.log_prob(se.Gen(se.EOS_ID)) == dist.log_q_vocab.data[se.EOS_ID]
    assert dist.log_prob(se.Copy(1, 3)) == dist.log_q_span.data[1, 2]


def test_trained_model_sensitive_to_permutation(trained_insert):
    model, vocab, splits, _ = trained_insert
    ex = next(e for e in splits["test"] if len(set(e.input)) > 1)
    x = list(ex.input)
    i = next(i for i in range(len(x) - 1) if x[i] != x[i + 1])
    swapped = list(x)
    swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
    a = model.encode(vocab.ids(x)).contextual.data
    b = model.encode(vocab.ids(swapped)).contextual.data
    assert not np.allclose(a, b)


def test_every_parameter_gets_gradient(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:4])
    y = (letters[0], letters[2], letters[2], letters[3])
    loss = se.marginal_log_likelihood(model, vocab, x, y)
    ad.backward(ad.mul(loss, -1.0))
    for name, p in model.params.items():
        g = p.grad_array()
        assert np.isfinite(g).all(), name
        assert np.abs(g).max() > 0, name


def test_save_load_roundtrip(tmp_path, rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng, max_copy_len=1, tie_embeddings=False)
    path = tmp_path / "m.json"
    model.save(path, header_extra={"tag": "x"})
    loaded = se.SpanCopyModel.load(path)
    assert loaded.config == model.config
    x = tuple(letters[:4])
    a = scores_for(model, vocab, x, consumed=vocab.ids(x[:2]))
    b = scores_for(loaded, vocab, x, consumed=vocab.ids(x[:2]))
    assert np.array_equal(a.log_q_vocab.data, b.log_q_vocab.data)
    assert np.array_equal(a.log_q_span.data, b.log_q_span.data)


def test_load_rejects_wrong_param_set(tmp_path):
    vocab, _ = tiny_vocab()
    model = tiny_model(vocab)
    bad = dict(model.params)
    bad.pop("out.b")
    with pytest.raises(se.ModelError):
        se.SpanCopyModel(model.config, bad)


def test_float32_precision_applies():
    vocab, _ = tiny_vocab()
    model = tiny_model(vocab, precision="float32")
    assert all(p.data.dtype == np.float32 for p in model.params.values())
