"""Finite-difference checks of every training objective on a toy model."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import adapt, aed
from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamSet, init_discriminator

THRESHOLD = 1e-4
# larger than the training init so that no sampled gradient is small enough to drown in roundoff
TOY_INIT = 0.5


def toy_setup(seed: int = 0):
    """Toy SI/SD models, character head, discriminator and a two-utterance batch."""
    rng = np.random.default_rng(seed)
    cfg = aed.AedConfig(feat_dim=4, vocab_size=12, enc_layers=2, enc_hidden=8, dec_layers=2,
                        dim=8, att_dim=8, init_scale=TOY_INIT)
    si = aed.init_aed_params(cfg, rng)
    sd = si.copy()
    for v in sd.values():
        v.data += 0.05 * rng.normal(size=v.shape)
    char = adapt.CharAed(sd.select("enc."), aed.init_head(cfg, 10, rng))
    disc = init_discriminator(rng, cfg.dim, 8, scale=TOY_INIT)
    xs = [rng.normal(size=(6, 4)), rng.normal(size=(5, 4))]
    ys = [[3, 7, 5, aed.EOS], [4, 9, aed.EOS]]
    cs = [[4, 8, 2, 6, 9, aed.EOS], [3, 5, 7, aed.EOS]]
    return si, sd, char, disc, aed.make_batch(xs, ys), aed.make_batch(xs, cs)


def toy_gradchecks(seed: int = 0, epsilon: float = 1e-5) -> dict[str, float]:
    """Largest relative gradient error for each objective, keyed by name."""
    si, sd, char, disc, wsu, chars = toy_setup(seed)
    with ad.no_grad():
        si_trace = aed.forward_batch(si, wsu)
    si_post = np.exp(si_trace.log_probs.data)
    si_feat = si_trace.stacked_features().data
    X0, Y0 = wsu.x[0], list(wsu.y_out[0])

    def aed_wsu() -> Tensor:
        return aed.aed_loss(aed.aed_forward(X0, Y0, sd), Y0)

    def kld() -> Tensor:
        lp = aed.forward_batch(sd, wsu).log_probs
        return adapt.kld_adapt_loss(lp, si_post, wsu.y_out, 0.2, wsu.y_mask)

    def disc_loss() -> Tensor:
        feats = aed.forward_batch(sd, wsu).stacked_features()
        return adapt.discriminator_loss(feats, si_feat, disc, wsu.y_mask)

    def asa() -> Tensor:
        return adapt.asa_objective(sd, disc, wsu, si_feat, 0.5)

    def char_loss() -> Tensor:
        return aed.batch_nll(char.params, chars, char.head)

    def mtl() -> Tensor:
        return adapt.mtl_objective(sd, char.head, wsu, chars, 0.5)

    enc = sd.select("enc.")
    checks: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {
        "aed_wsu": (aed_wsu, list(sd.values())),
        "kld": (kld, list(sd.values())),
        "disc": (disc_loss, list(disc.values()) + list(ParamSet(sd).select("enc.", "att.", "dec.").values())),
        "asa": (asa, list(sd.values())),
        "aed_char": (char_loss, list(char.head.values())),
        "mtl": (mtl, list(enc.values())),
    }
    return {name: ad.finite_diff_check(fn, params, epsilon=epsilon, seed=seed)
            for name, (fn, params) in checks.items()}
