"""Greedy and beam decoding over the generate-or-copy action space.

One output token sequence is reachable through many action paths (emit the
token, or copy it inside any number of overlapping spans), so a ray here is a
*token sequence* together with the total probability mass of every action
path that produced it.  Because the decoder state is a function of the token
prefix only, rays with equal tokens have bit-identical states and can be
merged by adding their probabilities, without rescoring anything.

Copies emit several tokens at once, which desynchronizes ray lengths.  The
beam therefore advances a token-count frontier: at frontier L it expands the
unfinished rays holding exactly L tokens, while longer rays wait, then merges
equal-token rays and prunes the whole pool back to the beam width.  The
merge-at-end variant is the classic action-synchronous beam (one action per
ray per round, no waiting, no merging) that only groups equal candidates
after search; it exists as a baseline and is measurably worse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, EOS_ID, Vocab
from .model import Action, Copy, DecoderState, Gen, SpanCopyModel, action_surfaces


def default_max_len(n: int) -> int:
    return 2 * n + 16


@dataclass(frozen=True)
class DecodedCandidate:
    tokens: tuple[str, ...]
    log_prob: float
    finished: bool
    rank: int


@dataclass(frozen=True)
class MergeEvent:
    """step is the frontier at which rays merged, or -1 for the post-hoc
    grouping pass of the merge-at-end variant."""

    step: int
    tokens: tuple[str, ...]
    merged: int


@dataclass
class BeamResult:
    candidates: list[DecodedCandidate]
    merge_events: list[MergeEvent]

    @property
    def best(self) -> DecodedCandidate:
        return self.candidates[0]


@dataclass
class GreedyResult:
    tokens: tuple[str, ...]
    log_prob: float
    finished: bool
    actions: tuple[Action, ...]  # emitting actions only; sum of lengths == len(tokens)


@dataclass(eq=False)
class _Ray:
    tokens: tuple[str, ...]  # includes a trailing EOS surface once finished
    log_prob: float
    state: DecoderState | None
    pending: tuple[int, ...]  # feed ids not yet folded into state
    finished: bool
    actions: tuple[Action, ...]


def _feed_ids(surfaces: tuple[str, ...], vocab: Vocab) -> tuple[int, ...]:
    return tuple(vocab.lookup(s) for s in surfaces)


def _settle(model: SpanCopyModel, ray: _Ray) -> None:
    """Fold pending feed tokens into the ray's decoder state."""
    if ray.finished or not ray.pending:
        return
    state = ray.state
    for tid in ray.pending:
        state = model.decoder_advance(state, tid)
    ray.state = state
    ray.pending = ()


def _enumerate_actions(
    lqv: np.ndarray, lqs: np.ndarray, n: int
) -> list[tuple[Action, float]]:
    out: list[tuple[Action, float]] = []
    for tid in range(lqv.shape[0]):
        if np.isfinite(lqv[tid]):
            out.append((Gen(tid), float(lqv[tid])))
    for i in range(n):
        for jm1 in range(i, n):
            if np.isfinite(lqs[i, jm1]):
                out.append((Copy(i, jm1 + 1), float(lqs[i, jm1])))
    return out


def greedy_decode(
    model: SpanCopyModel,
    vocab: Vocab,
    x: list[str] | tuple[str, ...],
    max_len: int | None = None,
) -> GreedyResult:
    """Follow the argmax action until EOS or the length budget.

    A copy appends its whole span, so the result can overshoot max_len by the
    tail of one final copy; decoding stops right after.
    """
    n = len(x)
    if n == 0:
        raise ValueError("cannot decode an empty input")
    if max_len is None:
        max_len = default_max_len(n)
    with ad.no_grad():
        enc = model.encode(vocab.ids(x))
        state = model.initial_state(enc)
        tokens: list[str] = []
        actions: list[Action] = []
        log_prob = 0.0
        finished = False
        while True:
            ht = model.attention_context(state, enc)
            dist = model.action_scores(ht, enc)
            flat = np.concatenate([dist.log_q_vocab.data, dist.log_q_span.data.ravel()])
            idx = int(np.argmax(flat))
            log_prob += float(flat[idx])
            v = model.config.vocab_size
            if idx < v:
                action: Action = Gen(idx)
            else:
                i, jm1 = divmod(idx - v, n)
                action = Copy(i, jm1 + 1)
            if isinstance(action, Gen) and action.token_id == EOS_ID:
                finished = True
                break
            surfaces = action_surfaces(action, x, vocab)
            tokens.extend(surfaces)
            actions.append(action)
            for tid in _feed_ids(surfaces, vocab):
                state = model.decoder_advance(state, tid)
            if len(tokens) >= max_len:
                break
    return GreedyResult(tuple(tokens), log_prob, finished, tuple(actions))


def _expand_pool(
    model: SpanCopyModel,
    vocab: Vocab,
    x: list[str] | tuple[str, ...],
    enc,
    active: list[_Ray],
) -> list[_Ray]:
    """All one-action successors of the active rays, in deterministic order."""
    n = len(x)
    hidden = Tensor(np.stack([r.state.hidden.data for r in active]))
    ht = model.attend_states(hidden, enc)
    lqv, lqs = model.action_scores_many(ht, enc)
    successors: list[_Ray] = []
    for r_i, ray in enumerate(active):
        for action, lq in _enumerate_actions(lqv.data[r_i], lqs.data[r_i], n):
            logp = ray.log_prob + lq
            if isinstance(action, Gen) and action.token_id == EOS_ID:
                successors.append(
                    _Ray(ray.tokens + (EOS,), logp, None, (), True, ray.actions + (action,))
                )
                continue
            surfaces = action_surfaces(action, x, vocab)
            successors.append(
                _Ray(
                    ray.tokens + surfaces,
                    logp,
                    ray.state,
                    ray.pending + _feed_ids(surfaces, vocab),
                    False,
                    ray.actions + (action,),
                )
            )
    return successors


def _merge_equal(pool: list[_Ray], step: int, events: list[MergeEvent]) -> list[_Ray]:
    """Group rays with identical token sequences, summing probability mass.

    The kept representative is the first of each group in pool order; its
    state equals every member's state by path independence."""
    groups: dict[tuple[str, ...], _Ray] = {}
    counts: dict[tuple[str, ...], int] = {}
    for ray in pool:
        prev = groups.get(ray.tokens)
        if prev is None:
            groups[ray.tokens] = ray
            counts[ray.tokens] = 1
        else:
            prev.log_prob = float(np.logaddexp(prev.log_prob, ray.log_prob))
            counts[ray.tokens] += 1
    for tokens, cnt in counts.items():
        if cnt > 1:
            events.append(MergeEvent(step, tokens, cnt))
    return list(groups.values())


def _prune(pool: list[_Ray], beam_size: int) -> list[_Ray]:
    pool.sort(key=lambda r: (-r.log_prob, r.tokens))
    return pool[:beam_size]


def _to_candidates(pool: list[_Ray]) -> list[DecodedCandidate]:
    pool = sorted(pool, key=lambda r: (-r.log_prob, r.tokens))
    out = []
    for rank, ray in enumerate(pool, start=1):
        tokens = ray.tokens[:-1] if ray.finished else ray.tokens
        out.append(DecodedCandidate(tokens, ray.log_prob, ray.finished, rank))
    return out


def beam_decode(
    model: SpanCopyModel,
    vocab: Vocab,
    x: list[str] | tuple[str, ...],
    beam_size: int,
    max_len: int | None = None,
) -> BeamResult:
    """Token-frontier beam search with exact ray merging.

    Every reachable action is scored (no per-ray shortlist), merging runs
    over the whole pool before pruning, and ties in the prune break toward
    the lexicographically smaller token sequence.  With a beam wide enough
    that pruning never discards anything, each finished candidate's score is
    the model's full marginal probability of that token sequence.
    """
    n = len(x)
    if n == 0:
        raise ValueError("cannot decode an empty input")
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_len is None:
        max_len = default_max_len(n)
    events: list[MergeEvent] = []
    with ad.no_grad():
        enc = model.encode(vocab.ids(x))
        init = model.initial_state(enc)
        rays = [_Ray((), 0.0, init, (), False, ())]
        frontier = 0
        while frontier <= max_len:
            if all(r.finished for r in rays):
                break
            active = [r for r in rays if not r.finished and len(r.tokens) == frontier]
            if not active:
                frontier += 1
                continue
            waiting = [r for r in rays if r.finished or len(r.tokens) != frontier]
            pool = waiting + _expand_pool(model, vocab, x, enc, active)
            pool = _merge_equal(pool, frontier, events)
            rays = _prune(pool, beam_size)
            for ray in rays:
                _settle(model, ray)
            frontier += 1
    return BeamResult(_to_candidates(rays), events)


def beam_decode_merge_at_end(
    model: SpanCopyModel,
    vocab: Vocab,
    x: list[str] | tuple[str, ...],
    beam_size: int,
    max_len: int | None = None,
) -> BeamResult:
    """Action-synchronous beam that treats every action path as its own ray.

    No merging happens during search, so duplicated prefixes burn beam slots;
    equal token sequences are only grouped after search ends (recorded as
    step -1 merge events).  Kept as the ablation baseline."""
    n = len(x)
    if n == 0:
        raise ValueError("cannot decode an empty input")
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_len is None:
        max_len = default_max_len(n)
    with ad.no_grad():
        enc = model.encode(vocab.ids(x))
        init = model.initial_state(enc)
        rays = [_Ray((), 0.0, init, (), False, ())]
        while True:
            active = [r for r in rays if not r.finished and len(r.tokens) <= max_len]
            if not active:
                break
            keep = [r for r in rays if r not in active]
            pool = keep + _expand_pool(model, vocab, x, enc, active)
            pool.sort(key=lambda r: (-r.log_prob, r.tokens, _path_key(r.actions)))
            rays = pool[:beam_size]
            for ray in rays:
                _settle(model, ray)
    events: list[MergeEvent] = []
    merged = _merge_equal(rays, -1, events)
    return BeamResult(_to_candidates(merged), events)


def _path_key(actions: tuple[Action, ...]) -> tuple:
    return tuple(
        (0, a.token_id, 0) if isinstance(a, Gen) else (1, a.start, a.end) for a in actions
    )


def decode(
    model: SpanCopyModel,
    vocab: Vocab,
    x: list[str] | tuple[str, ...],
    beam_size: int = 20,
    max_len: int | None = None,
    merge: str = "during",
) -> BeamResult:
    if merge == "during":
        return beam_decode(model, vocab, x, beam_size, max_len)
    if merge == "end":
        return beam_decode_merge_at_end(model, vocab, x, beam_size, max_len)
    raise ValueError(f"merge must be 'during' or 'end', got {merge!r}")
