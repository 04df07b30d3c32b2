"""Attention-based encoder-decoder over word/subword units (WSUs).

Per decoder step ``t`` (1-based, teacher forced)::

    s_t = GRU_dec(s_{t-1}, e_{t-1} + g_{t-1})       # e_0 = emb(<sos>), s_0 = g_0 = 0
    g_t, alpha_t = attend(s_t, H)
    P(. | y_<t, X) = softmax((s_t + g_t) W_out + b_out)

Parameter names: ``enc.*`` (bidirectional GRU stack, layer norm, 2d->d
projection), ``att.*``, ``dec.*`` (GRU stack and label embedding) and
``out.*``.  A *head* is any mapping holding ``att.*``, ``dec.*`` and
``out.*``; the character AED reuses these functions with its own head on
top of the WSU encoder.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError

SOS = 0
EOS = 1
LN_EPS = 1e-5
MASK_FILL = -1e30


@dataclass(frozen=True)
class AedConfig:
    """Model shape.  Defaults are the desk-scale toy sizes."""

    feat_dim: int = 24
    vocab_size: int = 66
    enc_layers: int = 2
    enc_hidden: int = 32
    dec_layers: int = 2
    dim: int = 32
    att_dim: int = 32
    init_scale: float = 0.08

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ContractError(f"AedConfig.{k} must be positive, got {v!r}")
        if self.vocab_size < 3:
            raise ContractError("vocabulary must hold <sos>, <eos> and at least one unit")


def init_encoder(cfg: AedConfig, rng: np.random.Generator) -> nn.ParamSet:
    p = nn.ParamSet()
    width = cfg.feat_dim
    for i in range(cfg.enc_layers):
        p.update(nn.init_gru(rng, width, cfg.enc_hidden, f"enc.l{i}.fwd", cfg.init_scale))
        p.update(nn.init_gru(rng, width, cfg.enc_hidden, f"enc.l{i}.bwd", cfg.init_scale))
        p.update(nn.init_layer_norm(2 * cfg.enc_hidden, f"enc.l{i}.ln"))
        width = 2 * cfg.enc_hidden
    p.update(nn.init_linear(rng, width, cfg.dim, "enc.proj", cfg.init_scale))
    return p


def init_head(cfg: AedConfig, vocab_size: int, rng: np.random.Generator) -> nn.ParamSet:
    """Attention, decoder and output layer for a vocabulary of ``vocab_size``."""
    d, a, s = cfg.dim, cfg.att_dim, cfg.init_scale
    p = nn.ParamSet()
    p["att.W_q"] = nn._param(rng, (d, a), "att.W_q", s)
    p["att.W_k"] = nn._param(rng, (d, a), "att.W_k", s)
    p["att.b"] = nn._zeros((a,), "att.b")
    p["att.v"] = nn._param(rng, (a, 1), "att.v", s)
    p.update(nn.init_embedding(rng, vocab_size, d, "dec.emb", s))
    for i in range(cfg.dec_layers):
        p.update(nn.init_gru(rng, d, d, f"dec.l{i}", s))
    p.update(nn.init_linear(rng, d, vocab_size, "out", s))
    return p


def init_aed_params(cfg: AedConfig, seed: int | np.random.Generator = 0) -> nn.ParamSet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = init_encoder(cfg, rng)
    p.update(init_head(cfg, cfg.vocab_size, rng))
    return p


def _count_layers(params: Mapping[str, Tensor], prefix: str, leaf: str) -> int:
    n = 0
    while f"{prefix}.l{n}.{leaf}" in params:
        n += 1
    return n


def vocab_size_of(head: Mapping[str, Tensor]) -> int:
    return head["out.W"].shape[1]


# ----------------------------------------------------------------------------
# encoder
# ----------------------------------------------------------------------------


@dataclass
class EncodedFeatures:
    H: Tensor
    T: int


def encode_batch(x, params: Mapping[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Encode padded frames ``(B, T, F)`` into ``(B, T, d)`` features."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError(f"encoder input must be a nonempty (B, T, F) batch, got {x.shape}")
    enc = nn.ParamSet(params).scope("enc")
    n = _count_layers(params, "enc", "ln.gain")
    h = nn.bigru_encoder_stack(x, enc, n, mask, LN_EPS)
    return nn.linear(h, nn.ParamSet(enc).scope("proj"))


def encode(X, params: Mapping[str, Tensor]) -> EncodedFeatures:
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError(f"encode expects a nonempty (T, F) frame matrix, got {X.shape}")
    H = encode_batch(X[None], params)
    return EncodedFeatures(H.reshape(H.shape[1:]), X.shape[0])


# ----------------------------------------------------------------------------
# attention / decoder
# ----------------------------------------------------------------------------


class Attention:
    """Additive attention over a fixed encoding; keys are projected once."""

    def __init__(self, H: Tensor, head: Mapping[str, Tensor], mask: np.ndarray | None = None):
        if H.ndim != 3:
            raise ShapeError(f"attention memory must be (B, T, d), got {H.shape}")
        if H.shape[1] == 0:
            raise ContractError("attention over an empty encoding")
        self.W_q, self.b, self.v = head["att.W_q"], head["att.b"], head["att.v"]
        if H.shape[-1] != head["att.W_k"].shape[0]:
            raise ShapeError(f"attention: feature width {H.shape[-1]} vs W_k {head['att.W_k'].shape}")
        self.H = H
        self.keys = H @ head["att.W_k"]
        self.bias = None if mask is None else np.where(mask > 0, 0.0, MASK_FILL)

    def __call__(self, s: Tensor) -> tuple[Tensor, Tensor]:
        B, T, d = self.H.shape
        n = s.shape[0]
        if s.shape[-1] != self.W_q.shape[0]:
            raise ShapeError(f"attention: query width {s.shape[-1]} vs W_q {self.W_q.shape}")
        q = s @ self.W_q + self.b
        e = ad.tanh(self.keys + q.reshape(n, 1, q.shape[-1]))
        scores = (e @ self.v).reshape(n, T)
        if self.bias is not None:
            scores = scores + self.bias
        alpha = ad.softmax(scores)
        g = (alpha.reshape(n, 1, T) @ self.H).reshape(n, d)
        return g, alpha


def attend(s, H, head: Mapping[str, Tensor], mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Context vector ``g = sum_i alpha_i h_i`` with ``alpha = softmax(v . tanh(W_q s + W_k h_i + b))``.

    Accepts an unbatched query ``(d,)`` with memory ``(T, d)``, or batched
    ``(B, d)`` with ``(B, T, d)``.
    """
    s, H = ad.as_tensor(s), ad.as_tensor(H)
    if s.ndim == 1:
        if H.ndim != 2:
            raise ShapeError(f"unbatched query needs (T, d) memory, got {H.shape}")
        g, alpha = Attention(H.reshape(1, *H.shape), head)(s.reshape(1, s.shape[0]))
        return g.reshape(g.shape[1:]), alpha.reshape(alpha.shape[1:])
    return Attention(H, head, mask)(s)


class Decoder:
    """Decoder GRU stack with fused gate weights, built once per pass."""

    def __init__(self, head: Mapping[str, Tensor]):
        ps = nn.ParamSet(head)
        n = _count_layers(head, "dec", "U_z")
        if n == 0:
            raise ContractError("decoder has no GRU layers")
        self.cells = [nn.FusedGru(ps.scope(f"dec.l{i}")) for i in range(n)]
        self.d = self.cells[0].d
        self.emb = head["dec.emb"]
        self.W_out, self.b_out = head["out.W"], head["out.b"]

    def step(self, states: Sequence[Tensor], x: Tensor) -> list[Tensor]:
        if len(states) != len(self.cells):
            raise ContractError(f"expected {len(self.cells)} decoder states, got {len(states)}")
        new = []
        inp = x
        for cell, h in zip(self.cells, states):
            if h.shape[-1] != cell.d:
                raise ShapeError(f"decoder state width {h.shape[-1]} != {cell.d}")
            xw = cell.project(inp)
            d = cell.d
            inp = cell.step(xw[..., :d], xw[..., d:2 * d], xw[..., 2 * d:], h)
            new.append(inp)
        return new

    def logits(self, s: Tensor, g: Tensor) -> Tensor:
        return (s + g) @ self.W_out + self.b_out


def decoder_step(states: Sequence[Tensor], e_prev, g_prev, head: Mapping[str, Tensor]) -> list[Tensor]:
    """Advance the decoder stack on input ``e_prev + g_prev``.

    ``states`` holds one state per decoder layer; the returned list's last
    entry is ``s_t``.
    """
    e_prev, g_prev = ad.as_tensor(e_prev), ad.as_tensor(g_prev)
    if e_prev.shape != g_prev.shape:
        raise ShapeError(f"decoder_step: embedding {e_prev.shape} vs context {g_prev.shape}")
    return Decoder(head).step([ad.as_tensor(s) for s in states], e_prev + g_prev)


def output_distribution(s, g, head: Mapping[str, Tensor]) -> Tensor:
    """Posterior over the vocabulary, ``softmax((s + g) W_out + b_out)``."""
    s, g = ad.as_tensor(s), ad.as_tensor(g)
    if s.shape != g.shape or s.shape[-1] != head["out.W"].shape[0]:
        raise ShapeError(f"output_distribution: s {s.shape}, g {g.shape}, W_out {head['out.W'].shape}")
    return ad.softmax((s + g) @ head["out.W"] + head["out.b"])


@dataclass
class DecoderTrace:
    """Teacher-forced decoder pass over a batch."""

    log_probs: Tensor  # (B, L, V)
    logits: list[Tensor]  # per step (B, V)
    features: list[Tensor]  # per step (B, d): s_t + g_t
    alphas: list[Tensor]  # per step (B, T)

    def stacked_features(self) -> Tensor:
        return ad.stack(self.features, axis=1)


def run_decoder(H: Tensor, y_in: np.ndarray, head: Mapping[str, Tensor],
                mask: np.ndarray | None = None) -> DecoderTrace:
    """Teacher-forced decoding of ``(B, L)`` input labels against ``(B, T, d)`` features."""
    y_in = np.asarray(y_in, dtype=np.int64)
    B, L = y_in.shape
    dec = Decoder(head)
    att = Attention(H, head, mask)
    if H.shape[-1] != dec.d:
        raise ShapeError(f"encoder width {H.shape[-1]} != decoder width {dec.d}")
    E = ad.embedding(dec.emb, y_in)
    zero = Tensor(np.zeros((B, dec.d)))
    states = [zero] * len(dec.cells)
    g = zero
    log_probs, logits, feats, alphas = [], [], [], []
    for t in range(L):
        states = dec.step(states, E[:, t] + g)
        s = states[-1]
        g, alpha = att(s)
        f = s + g
        z = f @ dec.W_out + dec.b_out
        log_probs.append(ad.log_softmax(z))
        logits.append(z)
        feats.append(f)
        alphas.append(alpha)
    return DecoderTrace(ad.stack(log_probs, axis=1), logits, feats, alphas)


def _check_labels(Y: Sequence[int], vocab: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.int64)
    if Y.ndim != 1 or Y.size == 0:
        raise ContractError("label sequence must be a nonempty 1-D sequence")
    if Y.min() < 0 or Y.max() >= vocab:
        raise ContractError(f"label id outside vocabulary [0, {vocab})")
    if Y[-1] != EOS:
        raise ContractError("label sequence must end with <eos>")
    return Y


def aed_forward(X, Y: Sequence[int], params: Mapping[str, Tensor],
                head: Mapping[str, Tensor] | None = None) -> Tensor:
    """Teacher-forced log-posteriors ``(|Y|, V)`` for one utterance.

    ``exp`` of a row is the posterior at that step.  ``head`` defaults to
    the WSU head stored in ``params``.
    """
    head = params if head is None else head
    Y = _check_labels(Y, vocab_size_of(head))
    H = encode(X, params).H
    y_in = np.concatenate([[SOS], Y[:-1]])[None]
    trace = run_decoder(H.reshape(1, *H.shape), y_in, head)
    return trace.log_probs.reshape(trace.log_probs.shape[1:])


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def one_hot(ids, vocab: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (vocab,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def cross_entropy(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """``-sum(targets * log_probs)`` over every axis.

    Every label-level loss in the package goes through here: hard labels
    are one-hot rows, padded steps are zero rows.
    """
    if log_probs.shape != np.shape(targets):
        raise ShapeError(f"cross_entropy: log-probs {log_probs.shape} vs targets {np.shape(targets)}")
    return -(log_probs * targets).sum()


def aed_loss(log_posteriors: Tensor, Y: Sequence[int]) -> Tensor:
    """``-sum_t log P(y_t | y_<t, X)`` for one utterance."""
    log_posteriors = ad.as_tensor(log_posteriors)
    Y = np.asarray(Y, dtype=np.int64)
    if log_posteriors.ndim != 2 or log_posteriors.shape[0] != Y.size:
        raise ShapeError(f"aed_loss: {log_posteriors.shape} log-posteriors for {Y.size} labels")
    if not np.all(np.isfinite(log_posteriors.data[np.arange(Y.size), Y])):
        raise DomainError("zero posterior at a target label")
    return cross_entropy(log_posteriors, one_hot(Y, log_posteriors.shape[1]))


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    """Right-padded utterances.  Masks are ``None`` when nothing is padded."""

    x: np.ndarray  # (B, T, F)
    x_mask: np.ndarray | None  # (B, T)
    y_in: np.ndarray  # (B, L) <sos>-shifted labels
    y_out: np.ndarray  # (B, L)
    y_mask: np.ndarray  # (B, L)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def targets(self, vocab: int) -> np.ndarray:
        """One-hot targets with padded steps zeroed."""
        return one_hot(self.y_out, vocab) * self.y_mask[..., None]


def make_batch(xs: Sequence[np.ndarray], ys: Sequence[Sequence[int]]) -> Batch:
    if len(xs) != len(ys) or not xs:
        raise ContractError("make_batch needs equally many (>0) inputs and label sequences")
    T = max(x.shape[0] for x in xs)
    L = max(len(y) for y in ys)
    B, F = len(xs), xs[0].shape[1]
    x = np.zeros((B, T, F))
    x_mask = np.zeros((B, T))
    y_in = np.full((B, L), EOS, dtype=np.int64)
    y_out = np.full((B, L), EOS, dtype=np.int64)
    y_mask = np.zeros((B, L))
    for i, (xi, yi) in enumerate(zip(xs, ys)):
        yi = np.asarray(yi, dtype=np.int64)
        if yi.size == 0 or yi[-1] != EOS:
            raise ContractError("label sequences must be nonempty and end with <eos>")
        x[i, :len(xi)] = xi
        x_mask[i, :len(xi)] = 1.0
        y_out[i, :len(yi)] = yi
        y_in[i, 0] = SOS
        y_in[i, 1:len(yi)] = yi[:-1]
        y_mask[i, :len(yi)] = 1.0
    return Batch(x, None if x_mask.all() else x_mask, y_in, y_out, y_mask)


def forward_batch(params: Mapping[str, Tensor], batch: Batch,
                  head: Mapping[str, Tensor] | None = None) -> DecoderTrace:
    H = encode_batch(batch.x, params, batch.x_mask)
    return run_decoder(H, batch.y_in, params if head is None else head, batch.x_mask)


def batch_nll(params: Mapping[str, Tensor], batch: Batch,
              head: Mapping[str, Tensor] | None = None) -> Tensor:
    head = params if head is None else head
    trace = forward_batch(params, batch, head)
    return cross_entropy(trace.log_probs, batch.targets(vocab_size_of(head)))


# ----------------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------------


@dataclass
class DecodeHypothesis:
    tokens: list[int]
    log_prob: float

    @property
    def labels(self) -> list[int]:
        """Tokens with the trailing ``<eos>`` removed."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


def _decode_setup(X, params, head):
    head = params if head is None else head
    H = encode(X, params).H
    Hb = H.reshape(1, *H.shape)
    return head, Hb, Decoder(head), Attention(Hb, head)


def greedy_decode(X, params: Mapping[str, Tensor], max_len: int | None = None,
                  head: Mapping[str, Tensor] | None = None) -> DecodeHypothesis:
    """Feed back the argmax token each step until ``<eos>`` or ``max_len`` tokens.

    ``max_len`` defaults to the encoded length plus one.
    """
    with ad.no_grad():
        head, Hb, dec, att = _decode_setup(X, params, head)
        max_len = Hb.shape[1] + 1 if max_len is None else max_len
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        states = [Tensor(np.zeros((1, dec.d)))] * len(dec.cells)
        g = Tensor(np.zeros((1, dec.d)))
        tok, score, tokens = SOS, 0.0, []
        for _ in range(max_len):
            e = Tensor(dec.emb.data[[tok]])
            states = dec.step(states, e + g)
            g, _ = att(states[-1])
            lp = ad._log_softmax_np(dec.logits(states[-1], g).data)[0]
            tok = int(np.argmax(lp))
            score = score + lp[tok]
            tokens.append(tok)
            if tok == EOS:
                break
    return DecodeHypothesis(tokens, float(score))


def beam_decode(X, params: Mapping[str, Tensor], beam_width: int, max_len: int | None = None,
                head: Mapping[str, Tensor] | None = None) -> DecodeHypothesis:
    """Beam search ranked by total log-probability (no length normalisation).

    Each step keeps the ``beam_width`` best expansions; those ending in
    ``<eos>`` retire to the finished pool.  Ties are broken by the step
    log-probability and then by token id, so width 1 reproduces
    :func:`greedy_decode` exactly.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    with ad.no_grad():
        head, Hb, dec, att = _decode_setup(X, params, head)
        max_len = Hb.shape[1] + 1 if max_len is None else max_len
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        n_layers = len(dec.cells)
        alive = [([], 0.0)]
        states = [np.zeros((1, dec.d))] * n_layers
        g = np.zeros((1, dec.d))
        last = np.array([SOS])
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            new_states = dec.step([Tensor(s) for s in states], Tensor(dec.emb.data[last] + g))
            g_t, _ = att(new_states[-1])
            lp = ad._log_softmax_np(dec.logits(new_states[-1], g_t).data)
            scores = np.array([sc for _, sc in alive])[:, None] + lp
            V = lp.shape[1]
            order = np.lexsort((-lp.reshape(-1), -scores.reshape(-1)))[:beam_width]
            keep_rows, keep_tok, next_alive = [], [], []
            for flat in order:
                row, tok = divmod(int(flat), V)
                hyp = (alive[row][0] + [tok], float(scores[row, tok]))
                if tok == EOS:
                    finished.append(hyp)
                else:
                    next_alive.append(hyp)
                    keep_rows.append(row)
                    keep_tok.append(tok)
            alive = next_alive
            if not alive:
                break
            states = [s.data[keep_rows] for s in new_states]
            g = g_t.data[keep_rows]
            last = np.array(keep_tok)
            if finished and max(sc for _, sc in finished) >= max(sc for _, sc in alive):
                break
        pool = finished + alive
    best = max(pool, key=lambda h: h[1])
    return DecodeHypothesis(best[0], best[1])
