"""Encoder-decoder with a joint generate-or-copy action distribution.

Architecture: a bidirectional multi-layer GRU encoder, a single-layer GRU
decoder whose state depends only on the tokens consumed so far, multiplicative
attention, and one softmax over all actions: every vocab token plus every
contiguous input span (i, j), i < j.  A span's score is bilinear in the
decoder's attended state and the concatenated encoder states at the span's
first and last token, which factors as start[i] + end[j-1]; the factored form
is what the training objective exploits, while decoding materializes the full
[n, n] matrix.

Copying a span of length L advances the decoder exactly like emitting those L
tokens one at a time, so any two action paths that produce the same token
prefix leave the decoder in bit-identical states.  Beam-search merging relies
on that.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, START_ID, SplitMix64, mix64


class ModelError(ValueError):
    """Invalid model configuration or checkpoint mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    enc_hidden: int = 64
    enc_layers: int = 2
    dec_hidden: int = 64
    dropout: float = 0.2
    tie_embeddings: bool = True
    # None allows spans of any length; 1 restricts copying to single tokens
    # (the token-pointer baseline).  Other caps are not supported.
    max_copy_len: int | None = None
    precision: str = "float64"
    init_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ModelError(f"vocab_size must be >= 4, got {self.vocab_size}")
        for name in ("embed_dim", "enc_hidden", "enc_layers", "dec_hidden"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_copy_len not in (None, 1):
            raise ModelError(f"max_copy_len must be None or 1, got {self.max_copy_len}")
        if self.precision not in ("float32", "float64"):
            raise ModelError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def ctx_dim(self) -> int:
        return 2 * self.enc_hidden

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Gen:
    token_id: int


@dataclass(frozen=True)
class Copy:
    start: int
    end: int  # exclusive; end > start, zero-length spans do not exist

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ModelError(f"invalid span [{self.start}, {self.end})")


Action = Gen | Copy


def action_len(a: Action) -> int:
    return 1 if isinstance(a, Gen) else a.end - a.start


def action_surfaces(a: Action, x: Sequence[str], vocab) -> tuple[str, ...]:
    """Tokens the action emits.  Copies keep the true input surfaces."""
    if isinstance(a, Gen):
        return (vocab.surface(a.token_id),)
    return tuple(x[a.start : a.end])


@dataclass
class ActionDistribution:
    """log q over V vocab actions and an [n, n] span table.

    Span entry (i, j-1) holds Copy(i, j); cells below the diagonal (and, for
    a restricted model, above the allowed length) are -inf.  All finite
    entries of both parts jointly sum to probability one.
    """

    log_q_vocab: Tensor
    log_q_span: Tensor

    def log_prob(self, a: Action) -> float:
        if isinstance(a, Gen):
            return float(self.log_q_vocab.data[a.token_id])
        return float(self.log_q_span.data[a.start, a.end - 1])

    def normalization_defect(self) -> float:
        flat = np.concatenate([self.log_q_vocab.data.ravel(), self.log_q_span.data.ravel()])
        finite = flat[np.isfinite(flat)]
        m = finite.max()
        return abs(m + np.log(np.exp(finite - m).sum()))


@dataclass
class EncoderOutputs:
    contextual: Tensor  # [n, ctx] single example, [B, n, ctx] batched
    summary: Tensor  # [dec_hidden] or [B, dec_hidden]


@dataclass(frozen=True)
class DecoderState:
    hidden: Tensor  # [dec_hidden]
    tokens_consumed: int


_GATES = ("z", "r", "n")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter table; iteration order is the init draw order."""
    v, e, h, d, c = cfg.vocab_size, cfg.embed_dim, cfg.enc_hidden, cfg.dec_hidden, cfg.ctx_dim
    shapes: dict[str, tuple[int, ...]] = {"embed.E": (v, e)}
    for layer in range(cfg.enc_layers):
        indim = e if layer == 0 else c
        for direction in ("fwd", "bwd"):
            p = f"enc.l{layer}.{direction}."
            for gate in _GATES:
                shapes[p + f"W_{gate}"] = (h, indim)
            for gate in _GATES:
                shapes[p + f"U_{gate}"] = (h, h)
            for gate in _GATES:
                shapes[p + f"b_{gate}"] = (h,)
    shapes["enc.bridge.W"] = (d, c)
    shapes["enc.bridge.b"] = (d,)
    for gate in _GATES:
        shapes[f"dec.W_{gate}"] = (d, e)
    for gate in _GATES:
        shapes[f"dec.U_{gate}"] = (d, d)
    for gate in _GATES:
        shapes[f"dec.b_{gate}"] = (d,)
    shapes["attn.W_a"] = (d, c)
    shapes["attn.W_c"] = (d, d + c)
    shapes["attn.b_c"] = (d,)
    shapes["span.W_start"] = (d, c)
    shapes["span.W_end"] = (d, c)
    if cfg.tie_embeddings:
        shapes["out.W_proj"] = (e, d)
    else:
        shapes["out.W"] = (v, d)
    shapes["out.b"] = (v,)
    return shapes


def init_parameters(cfg: ModelConfig) -> dict[str, Tensor]:
    """Deterministic init: matrices uniform in +-1/sqrt(fan_in) drawn from a
    splitmix64 stream seeded by init_seed; biases zero."""
    rng = SplitMix64(mix64(cfg.init_seed) ^ 0xA11CE5EED)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = Tensor(np.zeros(shape, dtype=cfg.dtype), requires_grad=True)
            continue
        bound = 1.0 / np.sqrt(shape[-1])
        size = int(np.prod(shape))
        vals = np.empty(size, dtype=np.float64)
        for i in range(size):
            u = (rng.next_u64() >> 11) * 2.0**-53
            vals[i] = (2.0 * u - 1.0) * bound
        params[name] = Tensor(vals.reshape(shape).astype(cfg.dtype), requires_grad=True)
    return params


class SpanCopyModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            params = init_parameters(config)
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ModelError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
                )
        self.params = params
        # Score mask: PAD and START are never generable actions.
        self._vocab_mask = np.zeros(config.vocab_size, dtype=bool)
        self._vocab_mask[[PAD_ID, START_ID]] = True

    # -- parameter plumbing

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _cell(self, prefix: str, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        return ad.gru_cell(
            x, h,
            p[prefix + "W_z"], p[prefix + "W_r"], p[prefix + "W_n"],
            p[prefix + "U_z"], p[prefix + "U_r"], p[prefix + "U_n"],
            p[prefix + "b_z"], p[prefix + "b_r"], p[prefix + "b_n"],
        )

    # -- encoder

    def encode_batch(
        self, x_ids: np.ndarray, train: bool = False, rng: np.random.Generator | None = None
    ) -> EncoderOutputs:
        """x_ids: [B, n] int ids (out-of-vocab already collapsed to UNK)."""
        x_ids = np.asarray(x_ids, dtype=np.int64)
        bsz, n = x_ids.shape
        if n == 0:
            raise ModelError("cannot encode an empty input sequence")
        cfg = self.config
        inp = ad.embed_lookup(self._p("embed.E"), x_ids)  # [B, n, E]
        fwd_states: list[Tensor] = []
        bwd_states: list[Tensor] = []
        for layer in range(cfg.enc_layers):
            indim = inp.shape[-1]
            xs = [ad.reshape(ad.narrow(inp, 1, t, 1), (bsz, indim)) for t in range(n)]
            h = Tensor(np.zeros((bsz, cfg.enc_hidden), dtype=cfg.dtype))
            fwd_states = []
            for t in range(n):
                h = self._cell(f"enc.l{layer}.fwd.", xs[t], h)
                fwd_states.append(h)
            h = Tensor(np.zeros((bsz, cfg.enc_hidden), dtype=cfg.dtype))
            bwd_states = [h] * n
            for t in range(n - 1, -1, -1):
                h = self._cell(f"enc.l{layer}.bwd.", xs[t], h)
                bwd_states[t] = h
            out = ad.concat([ad.stack(fwd_states, 1), ad.stack(bwd_states, 1)], 2)
            if layer < cfg.enc_layers - 1:
                inp = ad.dropout(out, cfg.dropout, train, rng)
            else:
                inp = out
        last = ad.concat([fwd_states[-1], bwd_states[0]], 1)  # [B, ctx]
        summary = ad.tanh(
            ad.add(ad.matmul(last, self._p("enc.bridge.W"), transpose_b=True), self._p("enc.bridge.b"))
        )
        return EncoderOutputs(contextual=inp, summary=summary)

    def encode(
        self, x_ids: Sequence[int], train: bool = False, rng: np.random.Generator | None = None
    ) -> EncoderOutputs:
        enc = self.encode_batch(np.asarray([list(x_ids)], dtype=np.int64), train, rng)
        n = len(x_ids)
        return EncoderOutputs(
            contextual=ad.reshape(enc.contextual, (n, self.config.ctx_dim)),
            summary=ad.reshape(enc.summary, (self.config.dec_hidden,)),
        )

    # -- decoder state

    def initial_state(self, enc: EncoderOutputs) -> DecoderState:
        h = ad.reshape(enc.summary, (1, self.config.dec_hidden))
        emb = ad.embed_lookup(self._p("embed.E"), np.asarray([START_ID]))
        h = self._cell("dec.", emb, h)
        return DecoderState(hidden=ad.reshape(h, (self.config.dec_hidden,)), tokens_consumed=0)

    def decoder_advance(self, state: DecoderState, token_id: int) -> DecoderState:
        emb = ad.embed_lookup(self._p("embed.E"), np.asarray([token_id]))
        h = ad.reshape(state.hidden, (1, self.config.dec_hidden))
        h = self._cell("dec.", emb, h)
        return DecoderState(
            hidden=ad.reshape(h, (self.config.dec_hidden,)),
            tokens_consumed=state.tokens_consumed + 1,
        )

    def advance_with_tokens(self, state: DecoderState, token_ids: Sequence[int]) -> DecoderState:
        for tid in token_ids:
            state = self.decoder_advance(state, tid)
        return state

    def forced_states(self, summary: Tensor, dec_in: np.ndarray) -> Tensor:
        """Teacher-forced decoder states.

        dec_in: [B, K] ids whose first column is START; returns [B, K, d]
        where slot k is the state after consuming dec_in[:, :k+1].
        """
        dec_in = np.asarray(dec_in, dtype=np.int64)
        bsz, k_steps = dec_in.shape
        emb = ad.embed_lookup(self._p("embed.E"), dec_in)  # [B, K, E]
        h = summary
        states = []
        for k in range(k_steps):
            x = ad.reshape(ad.narrow(emb, 1, k, 1), (bsz, self.config.embed_dim))
            h = self._cell("dec.", x, h)
            states.append(h)
        return ad.stack(states, 1)

    # -- attention

    def attend_batch(
        self,
        hidden: Tensor,
        ctx: Tensor,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """hidden [B, K, d], ctx [B, n, C] -> attended state [B, K, d]."""
        hp = ad.matmul(hidden, self._p("attn.W_a"))  # [B, K, C]
        scores = ad.bmm_t(hp, ctx)  # [B, K, n]
        weights = ad.exp(ad.log_softmax(scores, axis=-1))
        pooled = ad.bmm(weights, ctx)  # [B, K, C]
        mixed = ad.concat([pooled, hidden], 2)
        ht = ad.tanh(
            ad.add(ad.matmul(mixed, self._p("attn.W_c"), transpose_b=True), self._p("attn.b_c"))
        )
        return ad.dropout(ht, self.config.dropout, train, rng)

    def attend_states(self, hidden: Tensor, enc: EncoderOutputs) -> Tensor:
        """hidden [R, d] against a single example's ctx [n, C] -> [R, d]."""
        hp = ad.matmul(hidden, self._p("attn.W_a"))  # [R, C]
        scores = ad.matmul(hp, enc.contextual, transpose_b=True)  # [R, n]
        weights = ad.exp(ad.log_softmax(scores, axis=-1))
        pooled = ad.matmul(weights, enc.contextual)  # [R, C]
        mixed = ad.concat([pooled, hidden], 1)
        return ad.tanh(
            ad.add(ad.matmul(mixed, self._p("attn.W_c"), transpose_b=True), self._p("attn.b_c"))
        )

    def attention_context(self, state: DecoderState, enc: EncoderOutputs) -> Tensor:
        h = ad.reshape(state.hidden, (1, self.config.dec_hidden))
        return ad.reshape(self.attend_states(h, enc), (self.config.dec_hidden,))

    def attention_weights(self, state: DecoderState, enc: EncoderOutputs) -> np.ndarray:
        hp = ad.matmul(ad.reshape(state.hidden, (1, -1)), self._p("attn.W_a"))
        scores = ad.matmul(hp, enc.contextual, transpose_b=True)
        return np.exp(ad.log_softmax(scores, axis=-1).data[0])

    # -- action scores

    def _vocab_scores(self, ht: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            proj = ad.matmul(ht, self._p("out.W_proj"), transpose_b=True)
            vs = ad.matmul(proj, self._p("embed.E"), transpose_b=True)
        else:
            vs = ad.matmul(ht, self._p("out.W"), transpose_b=True)
        vs = ad.add(vs, self._p("out.b"))
        return ad.masked_fill(vs, self._vocab_mask, ad.NEG_INF)

    def _span_invalid_mask(self, n: int) -> np.ndarray:
        i = np.arange(n)[:, None]
        jm1 = np.arange(n)[None, :]
        invalid = jm1 < i
        if self.config.max_copy_len is not None:
            invalid |= (jm1 - i + 1) > self.config.max_copy_len
        return invalid

    def action_scores_many(self, ht: Tensor, enc: EncoderOutputs) -> tuple[Tensor, Tensor]:
        """Full action distributions for R states against one example.

        ht [R, d], enc.contextual [n, C] -> (log_q_vocab [R, V],
        log_q_span [R, n, n]) normalized jointly by one softmax.
        """
        n = enc.contextual.shape[0]
        r = ht.shape[0]
        vs = self._vocab_scores(ht)  # [R, V]
        a = ad.matmul(ht, ad.matmul(enc.contextual, self._p("span.W_start"), transpose_b=True), transpose_b=True)
        c = ad.matmul(ht, ad.matmul(enc.contextual, self._p("span.W_end"), transpose_b=True), transpose_b=True)
        span = ad.add(ad.reshape(a, (r, n, 1)), ad.reshape(c, (r, 1, n)))
        span = ad.masked_fill(span, self._span_invalid_mask(n)[None, :, :], ad.NEG_INF)
        flat = ad.concat([vs, ad.reshape(span, (r, n * n))], 1)
        logq = ad.log_softmax(flat, axis=-1)
        v = self.config.vocab_size
        return ad.narrow(logq, 1, 0, v), ad.reshape(ad.narrow(logq, 1, v, n * n), (r, n, n))

    def action_scores(self, state_attended: Tensor, enc: EncoderOutputs) -> ActionDistribution:
        ht = ad.reshape(state_attended, (1, self.config.dec_hidden))
        lqv, lqs = self.action_scores_many(ht, enc)
        n = enc.contextual.shape[0]
        return ActionDistribution(
            log_q_vocab=ad.reshape(lqv, (self.config.vocab_size,)),
            log_q_span=ad.reshape(lqs, (n, n)),
        )

    def score_components(self, ht: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Factored scores for the training objective.

        ht [B, K, d], ctx [B, n, C] -> (vocab scores [B, K, V], span start
        scores [B, K, n], span end scores [B, K, n], log normalizer [B, K]).
        log q(Gen(t)) = vs[..., t] - z;  log q(Copy(i, j)) = a[..., i] +
        c[..., j-1] - z.  The normalizer folds all spans in via a cumulative
        log-sum-exp over start scores, which keeps the whole step linear in n.
        """
        a_proj = ad.matmul(ctx, self._p("span.W_start"), transpose_b=True)  # [B, n, d]
        c_proj = ad.matmul(ctx, self._p("span.W_end"), transpose_b=True)
        a = ad.bmm_t(ht, a_proj)  # [B, K, n]
        c = ad.bmm_t(ht, c_proj)
        vs = self._vocab_scores(ht)  # [B, K, V]
        vocab_lse = ad.logsumexp(vs, axis=-1)
        if self.config.max_copy_len == 1:
            span_lse = ad.logsumexp(ad.add(a, c), axis=-1)
        else:
            span_lse = ad.logsumexp(ad.add(c, ad.cumlogsumexp(a)), axis=-1)
        z = ad.logaddexp(vocab_lse, span_lse)
        return vs, a, c, z

    # -- persistence

    def save(self, path, header_extra: dict | None = None) -> None:
        extra = {"config": asdict(self.config)}
        if header_extra:
            extra.update(header_extra)
        ad.save_checkpoint(path, self.params, header_extra=extra)

    @classmethod
    def load(cls, path) -> "SpanCopyModel":
        arrays, header = ad.load_checkpoint(path)
        if "config" not in header:
            raise ModelError(f"{path}: checkpoint header lacks a model config")
        cfg = ModelConfig(**header["config"])
        params = {k: Tensor(v.astype(cfg.dtype), requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, params)
