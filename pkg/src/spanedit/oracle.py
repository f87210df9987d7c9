"""Brute-force references for validating the fast paths.

Everything here is deliberately slow and simple: enumerate every action
sequence that produces y, replay each one against the model step by step, and
sum the probabilities.  The result must agree with the suffix-DP training
objective to floating-point accuracy, and with the scores of an unpruned
merging beam search.  The scoring route is also independent (full span score
matrix with one joint softmax, versus the factored cumulative normalizer used
in training), so agreement checks both the enumeration and the numerics.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Vocab
from .model import Action, ActionDistribution, SpanCopyModel, action_len
from .objective import correct_actions, match_table

MAX_SIDE = 12


def enumerate_action_sequences(
    x: Sequence[str],
    y: Sequence[str],
    vocab: Vocab,
    max_copy_len: int | None = None,
    limit: int = 500_000,
) -> list[tuple[Action, ...]]:
    """Every action sequence producing exactly y (final Gen(EOS) included).

    Exponential in the worst case; inputs are capped at MAX_SIDE tokens a
    side and `limit` sequences."""
    if len(x) > MAX_SIDE or len(y) > MAX_SIDE:
        raise ValueError(
            f"enumeration is exponential; refusing lengths ({len(x)}, {len(y)}) > {MAX_SIDE}"
        )
    table = match_table(x, y)
    m = len(y)
    out: list[tuple[Action, ...]] = []

    def walk(k: int, path: tuple[Action, ...]) -> None:
        if len(out) > limit:
            raise ValueError(f"more than {limit} action sequences")
        if k == m:
            out.extend([path + (a,) for a in correct_actions(x, y, vocab, m)])
            return
        for a in correct_actions(x, y, vocab, k, max_copy_len, table):
            walk(k + action_len(a), path + (a,))

    walk(0, ())
    return out


def teacher_forced_distributions(
    model: SpanCopyModel,
    vocab: Vocab,
    x: Sequence[str],
    y: Sequence[str],
) -> list[ActionDistribution]:
    """Action distribution at every position k = 0..len(y), fed the gold
    prefix.  Computed one step at a time through the single-example path."""
    with ad.no_grad():
        enc = model.encode(vocab.ids(x))
        state = model.initial_state(enc)
        dists = []
        for tid in vocab.ids(y) + [None]:
            ht = model.attention_context(state, enc)
            dists.append(model.action_scores(ht, enc))
            if tid is not None:
                state = model.decoder_advance(state, tid)
    return dists


def sequence_log_prob(
    dists: list[ActionDistribution], actions: Sequence[Action]
) -> float:
    """Replay one action sequence against precomputed positional
    distributions; the position advances by each action's emitted length."""
    k = 0
    total = 0.0
    for a in actions[:-1]:
        total += dists[k].log_prob(a)
        k += action_len(a)
    if k != len(dists) - 1:
        raise ValueError(f"sequence consumed {k} tokens, expected {len(dists) - 1}")
    return total + dists[k].log_prob(actions[-1])


def exact_likelihood(
    model: SpanCopyModel,
    vocab: Vocab,
    x: Sequence[str],
    y: Sequence[str],
) -> float:
    """p(y | x) as an explicit sum over every producing action sequence."""
    seqs = enumerate_action_sequences(x, y, vocab, model.config.max_copy_len)
    dists = teacher_forced_distributions(model, vocab, x, y)
    log_probs = np.array([sequence_log_prob(dists, seq) for seq in seqs])
    peak = log_probs.max()
    return float(np.exp(peak) * np.exp(log_probs - peak).sum())


def action_sequence_count(
    x: Sequence[str], y: Sequence[str], vocab: Vocab, max_copy_len: int | None = None
) -> int:
    """Number of producing action sequences, by the same DP recurrence the
    likelihood uses (counts instead of probabilities)."""
    table = match_table(x, y)
    m = len(y)
    counts = [0] * (m + 2)
    counts[m + 1] = 1
    counts[m] = 1  # Gen(EOS) only
    for k in range(m - 1, -1, -1):
        total = 0
        for a in correct_actions(x, y, vocab, k, max_copy_len, table):
            total += counts[k + action_len(a)]
        counts[k] = total
    return counts[0]
