"""Speaker adaptation of a trained SI model: KLD regularisation, adversarial
speaker adaptation (ASA) and multi-task learning with a character decoder (MTL).

All three start from a deep copy of the SI parameters and update with plain
SGD on losses summed over the utterances of a batch.  The SI model is only
ever read.

Deep features ``f_t = s_t + g_t`` are the interface between the feature
extractor (encoder, attention, decoder GRUs) and the classifier (the output
layer ``out.*``).
"""

from __future__ import annotations

import logging
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import aed
from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Lexicon, Utterance
from .errors import ContractError, ShapeError
from .nn import ParamSet
from .train import SGD, Adam, check_finite, clip_grad_norm, epoch_batches

log = logging.getLogger(__name__)

METHODS = ("kld", "asa", "mtl")
SUPERVISION = ("sup", "unsup")
DEFAULT_WEIGHTS = {"kld": 0.2, "asa": 0.5, "mtl": 0.5}
CLASSIFIER_PREFIX = "out."


@dataclass(frozen=True)
class AdaptJob:
    """One adaptation run.

    ``weight`` is rho for KLD, lambda for ASA and beta for MTL; ``None``
    picks the method's default.
    """

    method: str
    weight: float | None = None
    supervision: str = "sup"
    lr: float = 3e-5
    epochs: int = 8
    batch_size: int = 5
    seed: int = 0
    disc_lr: float = 1e-3
    disc_hidden: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown adaptation method {self.method!r}; choose from {METHODS}")
        if self.supervision not in SUPERVISION:
            raise ContractError(f"supervision must be one of {SUPERVISION}, got {self.supervision!r}")
        if self.weight is None:
            object.__setattr__(self, "weight", DEFAULT_WEIGHTS[self.method])
        w = float(self.weight)
        object.__setattr__(self, "weight", w)
        if self.method == "asa":
            if not w >= 0:
                raise ContractError(f"adversarial weight must be >= 0, got {w!r}")
        elif not 0.0 <= w <= 1.0:
            raise ContractError(f"{self.method} weight must lie in [0, 1], got {w!r}")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.disc_hidden < 1:
            raise ContractError("epochs must be >= 0, batch_size and disc_hidden >= 1")

    def streams(self) -> tuple[int, np.random.Generator]:
        """Batch-order seed and discriminator-init generator, independent of each other."""
        order, disc = np.random.SeedSequence(self.seed).spawn(2)
        return int(order.generate_state(1)[0]), np.random.default_rng(disc)


@dataclass
class AdaptResult:
    params: ParamSet
    history: list[float] = field(default_factory=list)
    n_utterances: int = 0
    disc_history: list[float] = field(default_factory=list)


# ----------------------------------------------------------------------------
# feature split
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSplit:
    """Feature extractor = everything but ``out.*``; classifier = ``out.*``."""

    feature: ParamSet
    classifier: ParamSet


def feature_split(params: Mapping[str, Tensor]) -> FeatureSplit:
    ps = ParamSet(params)
    classifier = ps.select(CLASSIFIER_PREFIX)
    feature = ParamSet((k, v) for k, v in ps.items() if k not in classifier)
    if not classifier or not feature:
        raise ContractError("parameters do not split into feature extractor and output layer")
    return FeatureSplit(feature, classifier)


# ----------------------------------------------------------------------------
# KLD
# ----------------------------------------------------------------------------


def _check_weight(w: float, what: str) -> float:
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"{what} must lie in [0, 1], got {w!r}")
    return w


def interpolated_target(y, si_posterior, rho: float) -> np.ndarray:
    """``(1 - rho) * onehot(y) + rho * si_posterior`` along the last axis."""
    rho = _check_weight(rho, "rho")
    si_posterior = np.asarray(si_posterior, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if si_posterior.shape[:-1] != y.shape:
        raise ShapeError(f"labels {y.shape} vs posteriors {si_posterior.shape}")
    if not np.allclose(si_posterior.sum(axis=-1), 1.0, atol=1e-9):
        raise ContractError("SI posteriors must sum to 1")
    return (1.0 - rho) * aed.one_hot(y, si_posterior.shape[-1]) + rho * si_posterior


def kld_adapt_loss(sd_log_posteriors: Tensor, si_posteriors, Y, rho: float,
                   mask: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of SD log-posteriors against interpolated targets.

    Works per utterance (``(L, V)`` with ``Y`` of length ``L``) or on a
    padded batch (``(B, L, V)`` with a ``(B, L)`` mask).
    """
    targets = interpolated_target(Y, si_posteriors, rho)
    if mask is not None:
        targets = targets * mask[..., None]
    return aed.cross_entropy(ad.as_tensor(sd_log_posteriors), targets)


def _require(utterances: Sequence) -> None:
    if not utterances:
        raise ContractError("empty adaptation set")


def _sd_copy(si: Mapping[str, Tensor]) -> ParamSet:
    return ParamSet(si).copy().set_requires_grad(True)


def _pad(rows: Sequence[np.ndarray], L: int) -> np.ndarray:
    out = np.zeros((len(rows), L) + rows[0].shape[1:])
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _teacher_forced(params: Mapping[str, Tensor], utterances: Sequence[Utterance]):
    """Per-utterance SI posteriors and deep features under teacher forcing."""
    batch = aed.make_batch([u.X for u in utterances], [u.Y for u in utterances])
    with ad.no_grad():
        trace = aed.forward_batch(params, batch)
    post = np.exp(trace.log_probs.data)
    feats = trace.stacked_features().data
    lens = [len(u.Y) for u in utterances]
    return [post[i, :n] for i, n in enumerate(lens)], [feats[i, :n] for i, n in enumerate(lens)]


def _batches(utterances: Sequence[Utterance], job: AdaptJob, order_seed: int, epoch: int):
    for idx in epoch_batches(len(utterances), job.batch_size, order_seed, epoch):
        batch = aed.make_batch([utterances[i].X for i in idx], [utterances[i].Y for i in idx])
        yield idx, batch


def kld_adapt(si: Mapping[str, Tensor], utterances: Sequence[Utterance], job: AdaptJob) -> AdaptResult:
    """SGD on the KLD-regularised loss; every SD parameter is updated."""
    _require(utterances)
    if job.method != "kld":
        raise ContractError(f"kld_adapt given a {job.method!r} job")
    sd = _sd_copy(si)
    rho = job.weight
    si_post = _teacher_forced(si, utterances)[0] if rho > 0 else None
    order_seed, _ = job.streams()
    opt = SGD(list(sd.values()), job.lr)
    vocab = aed.vocab_size_of(sd)
    history = []
    for epoch in range(job.epochs):
        total = 0.0
        for idx, batch in _batches(utterances, job, order_seed, epoch):
            sd.zero_grad()
            with ad.Tape() as tape:
                lp = aed.forward_batch(sd, batch).log_probs
                if si_post is None:
                    loss = aed.cross_entropy(lp, batch.targets(vocab))
                else:
                    post = _pad([si_post[i] for i in idx], lp.shape[1])
                    post[batch.y_mask == 0] = 1.0 / vocab
                    loss = kld_adapt_loss(lp, post, batch.y_out, rho, batch.y_mask)
            total += check_finite(loss.item(), "KLD adaptation loss")
            tape.backward(loss)
            opt.step()
        history.append(total / len(utterances))
    return AdaptResult(sd, history, len(utterances))


# ----------------------------------------------------------------------------
# ASA
# ----------------------------------------------------------------------------


def init_discriminator(d: int, hidden: int, rng: np.random.Generator) -> ParamSet:
    return nn.init_discriminator(rng, d, hidden)


def discriminator_loss(F_sd: Tensor, F_si, disc: Mapping[str, Tensor],
                       mask: np.ndarray | None = None) -> Tensor:
    """``-sum_t [log D(f_t^SD) + log(1 - D(f_t^SI))]`` with ``D`` = P(feature is SD).

    Features are ``(..., d)``; ``mask`` (matching the leading axes) drops
    padded steps.
    """
    F_sd, F_si = ad.as_tensor(F_sd), ad.as_tensor(F_si)
    if F_sd.shape != F_si.shape:
        raise ShapeError(f"SD features {F_sd.shape} vs SI features {F_si.shape}")
    ll = ad.log_sigmoid(nn.feedforward_discriminator_body(F_sd, disc)) \
        + ad.log_sigmoid(-nn.feedforward_discriminator_body(F_si, disc))
    if mask is not None:
        if mask.shape != ll.shape:
            raise ShapeError(f"mask {mask.shape} vs feature steps {ll.shape}")
        ll = ll * mask
    return -ll.sum()


def asa_objective(sd: Mapping[str, Tensor], disc: Mapping[str, Tensor], batch: aed.Batch,
                  F_si: np.ndarray, lam: float, reversal: str = "explicit") -> Tensor:
    """Phase-(a) objective whose gradient w.r.t. SD is that of ``L_AED - lam * L_DISC``.

    ``reversal="explicit"`` builds that expression directly.  ``"grl"``
    instead feeds the SD features through a gradient-reversal layer into
    ``L_DISC`` and adds it, which gives the same SD gradient (the returned
    value then differs by the sign of the adversarial term).
    """
    trace = aed.forward_batch(sd, batch)
    l_aed = aed.cross_entropy(trace.log_probs, batch.targets(aed.vocab_size_of(sd)))
    F_sd = trace.stacked_features()
    if reversal == "explicit":
        return l_aed - discriminator_loss(F_sd, F_si, disc, batch.y_mask) * lam
    if reversal == "grl":
        return l_aed + discriminator_loss(ad.grad_reverse(F_sd, lam), F_si, disc, batch.y_mask)
    raise ContractError(f"unknown reversal mode {reversal!r}")


def asa_round(sd: ParamSet, disc: ParamSet, batch: aed.Batch, F_si: np.ndarray, job: AdaptJob,
              sd_opt: SGD | None = None, disc_opt: SGD | None = None) -> tuple[float, float]:
    """One alternating round: (a) SD step with D frozen, then (b) D step with SD frozen.

    Returns the phase-(a) objective and the phase-(b) discriminator loss.
    """
    sd_opt = sd_opt or SGD(list(sd.values()), job.lr)
    disc_opt = disc_opt or SGD(list(disc.values()), job.disc_lr)
    disc.set_requires_grad(False)
    sd.zero_grad()
    with ad.Tape() as tape:
        obj = asa_objective(sd, disc, batch, F_si, job.weight)
    value = check_finite(obj.item(), "ASA objective")
    tape.backward(obj)
    sd_opt.step()

    with ad.no_grad():
        F_sd = aed.forward_batch(sd, batch).stacked_features().data
    disc.set_requires_grad(True)
    disc.zero_grad()
    with ad.Tape() as tape:
        l_disc = discriminator_loss(F_sd, F_si, disc, batch.y_mask)
    d_value = check_finite(l_disc.item(), "discriminator loss")
    tape.backward(l_disc)
    disc_opt.step()
    return value, d_value


def asa_adapt(si: Mapping[str, Tensor], utterances: Sequence[Utterance], job: AdaptJob) -> AdaptResult:
    """Adversarial adaptation; the discriminator is discarded afterwards."""
    _require(utterances)
    if job.method != "asa":
        raise ContractError(f"asa_adapt given a {job.method!r} job")
    sd = _sd_copy(si)
    order_seed, disc_rng = job.streams()
    disc = init_discriminator(sd["out.W"].shape[0], job.disc_hidden, disc_rng)
    si_feats = _teacher_forced(si, utterances)[1]
    sd_opt = SGD(list(sd.values()), job.lr)
    disc_opt = SGD(list(disc.values()), job.disc_lr)
    history, disc_history = [], []
    for epoch in range(job.epochs):
        total = d_total = 0.0
        for idx, batch in _batches(utterances, job, order_seed, epoch):
            F_si = _pad([si_feats[i] for i in idx], batch.y_out.shape[1])
            value, d_value = asa_round(sd, disc, batch, F_si, job, sd_opt, disc_opt)
            total += value
            d_total += d_value
        history.append(total / len(utterances))
        disc_history.append(d_total / len(utterances))
    return AdaptResult(sd, history, len(utterances), disc_history)


# ----------------------------------------------------------------------------
# MTL
# ----------------------------------------------------------------------------


@dataclass
class CharAed:
    """Character AED sharing (by reference) the encoder of a WSU model."""

    encoder: ParamSet
    head: ParamSet

    @property
    def params(self) -> ParamSet:
        return ParamSet({**self.encoder, **self.head})

    @property
    def n_char(self) -> int:
        return aed.vocab_size_of(self.head)


def init_char_aed(si: Mapping[str, Tensor], n_char: int, seed: int = 0,
                  init_scale: float = nn.INIT_SCALE) -> CharAed:
    """Fresh character head shaped like the WSU head, on top of ``si``'s encoder."""
    ps = ParamSet(si)
    d, a = ps["enc.proj.W"].shape[1], ps["att.W_q"].shape[1]
    n_dec = sum(1 for k in ps if k.startswith("dec.l") and k.endswith(".U_z"))
    cfg = aed.AedConfig(feat_dim=ps["enc.l0.fwd.W_z"].shape[0], vocab_size=n_char,
                        enc_hidden=ps["enc.l0.fwd.U_z"].shape[0], dec_layers=n_dec,
                        dim=d, att_dim=a, init_scale=init_scale)
    head = aed.init_head(cfg, n_char, np.random.default_rng(seed))
    return CharAed(ps.select("enc."), head)


def char_batch(utterances: Sequence[Utterance], n_char: int | None = None) -> aed.Batch:
    if n_char is not None:
        for u in utterances:
            if min(u.C) < 0 or max(u.C) >= n_char:
                raise ContractError(f"character label outside vocabulary in {u.uid}")
    return aed.make_batch([u.X for u in utterances], [u.C for u in utterances])


def train_char_decoder(char: CharAed, utterances: Sequence[Utterance], epochs: int,
                       batch_size: int = 32, lr: float = 4e-3, seed: int = 0, clip: float = 5.0,
                       optimizer: Adam | None = None, start_epoch: int = 0) -> list[float]:
    """Fit the character head with the encoder frozen; updates ``char.head`` in place.

    Encoder outputs are computed once up front, so nothing ever touches the
    encoder tensors or their gradient buffers.
    """
    if not utterances:
        raise ContractError("empty training set")
    for u in utterances:
        if not u.C:
            raise ContractError(f"utterance {u.uid} has no character labels")
    n_char = char.n_char
    char_batch(utterances, n_char)
    with ad.no_grad():
        H = [aed.encode(u.X, char.encoder).H.data for u in utterances]
    head = char.head
    opt = optimizer or Adam(list(head.values()), lr)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        total = 0.0
        for idx in epoch_batches(len(utterances), batch_size, seed, epoch):
            batch = char_batch([utterances[i] for i in idx])
            Hb = Tensor(_pad([H[i] for i in idx], batch.x.shape[1]))
            head.zero_grad()
            with ad.Tape() as tape:
                trace = aed.run_decoder(Hb, batch.y_in, head, batch.x_mask)
                loss = aed.cross_entropy(trace.log_probs, batch.targets(n_char))
            total += check_finite(loss.item(), f"character loss at epoch {epoch}")
            tape.backward(loss)
            clip_grad_norm(opt.params, clip * len(idx))
            opt.step()
        history.append(total / len(utterances))
        log.info("char epoch %d loss %.4f", epoch, history[-1])
    return history


def mtl_objective(sd: Mapping[str, Tensor], char_head: Mapping[str, Tensor], wsu: aed.Batch,
                  chars: aed.Batch, beta: float) -> Tensor:
    """``beta * L_WSU + (1 - beta) * L_CHR`` over one shared encoder pass."""
    beta = _check_weight(beta, "beta")
    if wsu.x.shape != chars.x.shape:
        raise ShapeError("WSU and character batches must share their frames")
    H = aed.encode_batch(wsu.x, sd, wsu.x_mask)
    l_wsu = aed.cross_entropy(aed.run_decoder(H, wsu.y_in, sd, wsu.x_mask).log_probs,
                              wsu.targets(aed.vocab_size_of(sd)))
    l_chr = aed.cross_entropy(aed.run_decoder(H, chars.y_in, char_head, chars.x_mask).log_probs,
                              chars.targets(aed.vocab_size_of(char_head)))
    return l_wsu * beta + l_chr * (1.0 - beta)


def mtl_adapt(si: Mapping[str, Tensor], char: CharAed, utterances: Sequence[Utterance],
              job: AdaptJob) -> AdaptResult:
    """Adapt the encoder alone; WSU and character heads stay frozen.

    The returned model is the adapted encoder with the SI attention,
    decoder and output layer.
    """
    _require(utterances)
    if job.method != "mtl":
        raise ContractError(f"mtl_adapt given a {job.method!r} job")
    for u in utterances:
        if not u.C:
            raise ContractError(f"utterance {u.uid} has no character labels")
    sd = _sd_copy(si)
    enc = sd.select("enc.")
    for k, v in sd.items():
        if k not in enc:
            v.requires_grad = False
    head = char.head.copy().set_requires_grad(False)
    char_batch(utterances, char.n_char)
    order_seed, _ = job.streams()
    opt = SGD(list(enc.values()), job.lr)
    history = []
    for epoch in range(job.epochs):
        total = 0.0
        for idx, batch in _batches(utterances, job, order_seed, epoch):
            chars = char_batch([utterances[i] for i in idx])
            enc.zero_grad()
            with ad.Tape() as tape:
                loss = mtl_objective(sd, head, batch, chars, job.weight)
            total += check_finite(loss.item(), "MTL objective")
            tape.backward(loss)
            opt.step()
        history.append(total / len(utterances))
    return AdaptResult(sd.set_requires_grad(True), history, len(utterances))


# ----------------------------------------------------------------------------
# unsupervised labels and dispatch
# ----------------------------------------------------------------------------


def unsupervised_labels(si: Mapping[str, Tensor], X, lexicon: Lexicon,
                        beam_width: int = 1) -> tuple[list[int], list[int]]:
    """One-best WSU labels (ending in ``<eos>``) and their character expansion.

    ``<sos>`` is never a target, so any emitted by a poorly trained model are dropped.
    """
    hyp = aed.greedy_decode(X, si) if beam_width == 1 else aed.beam_decode(X, si, beam_width)
    Y = [t for t in hyp.labels if t != aed.SOS] + [aed.EOS]
    return Y, lexicon.expand(Y)


def pseudo_label(si: Mapping[str, Tensor], utterances: Sequence[Utterance], lexicon: Lexicon,
                 beam_width: int = 1) -> list[Utterance]:
    """Replace reference labels with SI decodes; empty decodes are skipped."""
    out = []
    for u in utterances:
        Y, C = unsupervised_labels(si, u.X, lexicon, beam_width)
        if len(Y) == 1:
            warnings.warn(f"empty decode for {u.uid}; utterance skipped", stacklevel=2)
            continue
        out.append(replace(u, Y=Y, C=C))
    return out


def adapt(si: Mapping[str, Tensor], utterances: Sequence[Utterance], job: AdaptJob,
          char: CharAed | None = None, lexicon: Lexicon | None = None) -> AdaptResult:
    """Run ``job`` on ``utterances``, pseudo-labelling them first when unsupervised."""
    _require(utterances)
    if job.supervision == "unsup":
        if lexicon is None:
            raise ContractError("unsupervised adaptation needs the lexicon")
        utterances = pseudo_label(si, utterances, lexicon)
        if not utterances:
            raise ContractError("every adaptation utterance decoded to nothing")
    if job.method == "kld":
        return kld_adapt(si, utterances, job)
    if job.method == "asa":
        return asa_adapt(si, utterances, job)
    if char is None:
        raise ContractError("MTL adaptation needs a trained character decoder")
    return mtl_adapt(si, char, utterances, job)
