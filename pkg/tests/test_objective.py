"""Correct-action sets, the marginalized objective and training."""

import json
import math

import numpy as np
import pytest

import spanedit as se
import spanedit.autodiff as ad
from spanedit.corpus import RESERVED_SURFACES, EOS_ID, UNK_ID
from spanedit.objective import (
    Bucket,
    bucket_log_scores,
    build_bucket,
    greedy_exact_match,
    pairs_of,
)
from spanedit.oracle import (
    enumerate_action_sequences,
    sequence_log_prob,
    teacher_forced_distributions,
)

from conftest import random_params_model, split_corpus, tiny_vocab


def lattice_vocab():
    return se.Vocab(list(RESERVED_SURFACES) + list("abcdef"))


def test_match_table_values():
    x = ("a", "b", "c", "d", "e")
    y = ("a", "b", "f", "d", "e")
    table = se.match_table(x, y)
    assert table.shape == (6, 6)
    assert table[0, 0] == 2  # "a b" is the longest shared prefix
    assert table[3, 3] == 2  # "d e"
    assert table[2, 2] == 0  # c vs f
    assert table[5, :].max() == 0 and table[:, 5].max() == 0


def test_correct_actions_midpoint_of_lattice():
    # position 0: either generate "a" or copy a span starting there
    x = ("a", "b", "c", "d", "e")
    y = ("a", "b", "f", "d", "e")
    vocab = lattice_vocab()
    at0 = set(se.correct_actions(x, y, vocab, 0))
    assert at0 == {se.Gen(vocab.lookup("a")), se.Copy(0, 1), se.Copy(0, 2)}
    at2 = set(se.correct_actions(x, y, vocab, 2))
    assert at2 == {se.Gen(vocab.lookup("f"))}
    assert se.correct_actions(x, y, vocab, 5) == [se.Gen(EOS_ID)]


def test_correct_actions_oov_falls_back_to_unk():
    vocab = se.Vocab(list(RESERVED_SURFACES) + ["a"])
    acts = se.correct_actions(("a",), ("z",), vocab, 0)
    assert acts == [se.Gen(UNK_ID)]


def test_correct_actions_oov_copyable_excludes_unk():
    vocab = se.Vocab(list(RESERVED_SURFACES) + ["a"])
    acts = se.correct_actions(("z", "a"), ("z",), vocab, 0)
    assert acts == [se.Copy(0, 1)]


def test_correct_actions_never_empty():
    vocab = lattice_vocab()
    x = ("a", "b", "c")
    y = ("c", "q", "a")
    for k in range(len(y) + 1):
        assert se.correct_actions(x, y, vocab, k)


def test_correct_actions_position_out_of_range():
    vocab = lattice_vocab()
    with pytest.raises(ValueError):
        se.correct_actions(("a",), ("a",), vocab, 2)


def test_matching_spans_capped():
    x = ("a", "b", "c")
    y = ("a", "b", "c")
    spans = se.matching_spans(x, y, 0, max_copy_len=1)
    assert spans == [se.Copy(0, 1)]


def test_marginal_equals_enumeration(rng):
    vocab, letters = tiny_vocab()
    for trial in range(15):
        model = random_params_model(vocab, rng, seed=trial)
        n = int(rng.integers(1, 6))
        m = int(rng.integers(0, 6))
        x = tuple(letters[int(rng.integers(0, 4))] for _ in range(n))
        y = tuple(letters[int(rng.integers(0, 4))] for _ in range(m))
        got = se.marginal_log_likelihood(model, vocab, x, y).item()
        dists = teacher_forced_distributions(model, vocab, x, y)
        seqs = enumerate_action_sequences(x, y, vocab)
        want = np.logaddexp.reduce([sequence_log_prob(dists, s) for s in seqs])
        assert got == pytest.approx(want, abs=1e-9)


def test_marginal_upper_bounds_any_single_path(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:4])
    y = (letters[0], letters[1], letters[1], letters[2])
    total = se.marginal_log_likelihood(model, vocab, x, y).item()
    dists = teacher_forced_distributions(model, vocab, x, y)
    for seq in enumerate_action_sequences(x, y, vocab):
        assert total >= sequence_log_prob(dists, seq) - 1e-12


def test_empty_output_is_eos_probability(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:3])
    got = se.marginal_log_likelihood(model, vocab, x, ()).item()
    dist = teacher_forced_distributions(model, vocab, x, ())[0]
    assert got == pytest.approx(dist.log_prob(se.Gen(EOS_ID)), abs=1e-12)


def test_completeness_sums_to_at_most_one(rng):
    # small vocab, outputs up to length 3: total probability over all
    # outputs cannot exceed 1 (the rest is mass on longer outputs)
    letters = ["a", "b", "c"]
    vocab = se.Vocab(list(RESERVED_SURFACES) + letters)
    model = random_params_model(vocab, np.random.default_rng(7))
    x = ("a", "b")
    total = 0.0
    outputs = [()]
    for L in range(1, 4):
        stack = [[]]
        for _ in range(L):
            stack = [s + [t] for s in stack for t in letters]
        outputs.extend(tuple(s) for s in stack)
    for y in outputs:
        total += math.exp(se.marginal_log_likelihood(model, vocab, x, y).item())
    assert total <= 1.0 + 1e-6


def test_bucket_scores_match_single_example_route(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    pairs = [
        (tuple(letters[:4]), (letters[0], letters[1], letters[1])),
        (tuple(letters[2:6]), (letters[2], letters[3], letters[4])),
        ((letters[1],) * 4, (letters[1], letters[1], letters[0])),
    ]
    bucket = build_bucket(pairs, vocab, model.config.max_copy_len)
    batched = bucket_log_scores(model, bucket, "marginal", train=False, rng=None)
    for row, (x, y) in enumerate(pairs):
        single = se.marginal_log_likelihood(model, vocab, x, y).item()
        assert batched.data[row] == pytest.approx(single, abs=1e-10)


def test_objectives_differ_in_general(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, rng)
    x = tuple(letters[:4])
    y = (letters[0], letters[1], letters[2])  # several segmentations exist
    bucket = build_bucket([(x, y)], vocab, None)
    marginal = bucket_log_scores(model, bucket, "marginal", False, None).data[0]
    multi = bucket_log_scores(model, bucket, "multi_hot", False, None).data[0]
    longest = bucket_log_scores(model, bucket, "longest_copy", False, None).data[0]
    assert multi != pytest.approx(marginal, abs=1e-9)
    assert longest != pytest.approx(marginal, abs=1e-9)


def test_objectives_coincide_when_single_action_per_step(rng):
    # disjoint x and y in a tiny vocab: every step has exactly one correct
    # action (Gen), so all three objectives reduce to the same sum
    vocab = se.Vocab(list(RESERVED_SURFACES) + ["a", "q"])
    model = random_params_model(vocab, rng)
    x = ("a", "a")
    y = ("q", "q")
    bucket = build_bucket([(x, y)], vocab, None)
    vals = [
        bucket_log_scores(model, bucket, obj, False, None).data[0]
        for obj in ("marginal", "multi_hot", "longest_copy")
    ]
    assert vals[0] == pytest.approx(vals[1], abs=1e-12)
    assert vals[0] == pytest.approx(vals[2], abs=1e-12)


def test_longest_copy_path_on_lattice():
    x = ("a", "b", "c", "d", "e")
    y = ("a", "b", "f", "d", "e")
    vocab = lattice_vocab()
    bucket = build_bucket([(tuple(x), tuple(y))], vocab, None)
    # path actions: longest copy at 0 covers "a b"; "f" must be generated;
    # then "d e" is one copy; EOS closes
    want = [se.Copy(0, 2), se.Gen(vocab.lookup("f")), se.Copy(3, 5), se.Gen(EOS_ID)]
    assert path_actions(bucket, vocab, x, y) == want


def test_longest_copy_identity_pair():
    x = y = ("a", "b", "c")
    vocab = lattice_vocab()
    bucket = build_bucket([(x, y)], vocab, None)
    assert path_actions(bucket, vocab, x, y) == [se.Copy(0, 3), se.Gen(EOS_ID)]


def path_actions(bucket, vocab, x, y):
    """Reconstruct the longest-copy path the bucket encodes."""
    out = []
    k = 0
    m = len(y)
    while k <= m:
        if bucket.lc_gen[0, k]:
            out.append(se.Gen(int(bucket.gen_ids[0, k])))
            k += 1
        else:
            c = int(np.argmax(bucket.lc_copy[0, k]))
            i = int(bucket.copy_i[0, k, c])
            length = int(bucket.copy_rel[0, k, c]) + 1
            out.append(se.Copy(i, i + length))
            k += length
    return out


def test_grad_check_on_marginal(rng):
    vocab, letters = tiny_vocab()
    model = random_params_model(vocab, np.random.default_rng(15), scale=0.8)
    x = tuple(letters[:3])
    y = (letters[0], letters[1], letters[1])

    def f():
        return ad.mul(se.marginal_log_likelihood(model, vocab, x, y), -1.0)

    assert ad.grad_check(f, model.params, eps=1e-5) < 1e-4


def test_adam_rejects_bad_hyperparams():
    vocab, _ = tiny_vocab()
    model = random_params_model(vocab, np.random.default_rng(0))
    with pytest.raises(ValueError):
        se.Adam(model.params, lr=-1.0)
    with pytest.raises(ValueError):
        se.TrainConfig(objective="nope")
    with pytest.raises(ValueError):
        se.TrainConfig(epochs=0)


def test_zero_lr_leaves_parameters(insert_setup):
    _, splits, vocab = insert_setup
    model = random_params_model(vocab, np.random.default_rng(4), embed_dim=8, enc_hidden=6, dec_hidden=8)
    before = {k: p.data.copy() for k, p in model.params.items()}
    cfg = se.TrainConfig(epochs=1, batch_size=16, lr=0.0, seed=0)
    se.train(model, vocab, splits["train"][:48], splits["valid"][:8], cfg)
    for k, p in model.params.items():
        assert np.array_equal(before[k], p.data), k


def test_training_reproducible(insert_setup):
    _, splits, vocab = insert_setup

    def one():
        cfg = se.ModelConfig(vocab_size=vocab.size, embed_dim=8, enc_hidden=6,
                             enc_layers=2, dec_hidden=8, dropout=0.2, init_seed=5)
        model = se.SpanCopyModel(cfg)
        tcfg = se.TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=9)
        recs = se.train(model, vocab, splits["train"][:64], splits["valid"][:8], tcfg)
        return recs, model

    recs_a, model_a = one()
    recs_b, model_b = one()
    assert [r["loss"] for r in recs_a] == [r["loss"] for r in recs_b]
    for k in model_a.params:
        assert np.array_equal(model_a.params[k].data, model_b.params[k].data)


def test_training_log_jsonl(tmp_path, insert_setup):
    _, splits, vocab = insert_setup
    log = tmp_path / "log.jsonl"
    cfg = se.ModelConfig(vocab_size=vocab.size, embed_dim=8, enc_hidden=6,
                         enc_layers=2, dec_hidden=8, init_seed=0)
    model = se.SpanCopyModel(cfg)
    tcfg = se.TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=0, log_path=log)
    records = se.train(model, vocab, splits["train"][:64], splits["valid"][:8], tcfg)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert lines == records
    assert {r["split"] for r in lines} == {"train", "valid"}
    assert all(set(r) == {"epoch", "split", "loss", "exact_match"} for r in lines)
    epochs = [r["epoch"] for r in lines if r["split"] == "train"]
    assert epochs == [1, 2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(insert_setup):
    _, splits, vocab = insert_setup
    cfg = se.ModelConfig(vocab_size=vocab.size, embed_dim=8, enc_hidden=6,
                         enc_layers=2, dec_hidden=8, init_seed=0)
    model = se.SpanCopyModel(cfg)
    tcfg = se.TrainConfig(epochs=2, batch_size=16, lr=1e200, seed=0)
    with pytest.raises(se.DivergenceError):
        se.train(model, vocab, splits["train"][:64], splits["valid"][:8], tcfg)


def test_trained_insert_reaches_high_exact_match(trained_insert):
    model, vocab, splits, records = trained_insert
    final = [r for r in records if r["split"] == "valid"][-1]
    assert final["exact_match"] >= 0.9
    assert greedy_exact_match(model, vocab, pairs_of(splits["test"])) >= 0.9
