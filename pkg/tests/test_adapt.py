import hashlib
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from aedadapt import adapt, aed
from aedadapt import autodiff as ad
from aedadapt.adapt import AdaptJob
from aedadapt.autodiff import Tensor
from aedadapt.data import Utterance, default_lexicon
from aedadapt.errors import ContractError
from aedadapt.nn import ParamSet
from aedadapt.train import SGD, train_si

LEX = default_lexicon(n_letters=3, n_wsu=5)  # 7 WSU ids, 6 char ids
CFG = aed.AedConfig(feat_dim=4, vocab_size=LEX.n_wsu, enc_layers=1, enc_hidden=4, dec_layers=1, dim=5,
                    att_dim=5, init_scale=0.4)


def make_si(seed=0):
    return aed.init_aed_params(CFG, seed)


def make_utts(n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        words = list(rng.integers(2, LEX.n_wsu, size=int(rng.integers(1, 4))))
        Y = [int(w) for w in words] + [aed.EOS]
        out.append(Utterance(f"s_{i}", "s", rng.normal(size=(int(rng.integers(3, 7)), 4)), Y, LEX.expand(Y)))
    return out


def make_char(si, seed=1):
    char = adapt.init_char_aed(si, LEX.n_char, seed=seed, init_scale=0.4)
    return char


def digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def grads(params, fn):
    params = ParamSet(params)
    params.zero_grad()
    with ad.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return {k: v.grad.copy() for k, v in params.items()}


class TestAdaptJob:
    def test_defaults(self):
        assert AdaptJob("kld").weight == 0.2
        assert AdaptJob("asa").weight == 0.5
        assert AdaptJob("mtl").weight == 0.5

    @pytest.mark.parametrize("method,weight", [("kld", 1.5), ("kld", -0.1), ("mtl", 2.0), ("asa", -0.5)])
    def test_weight_range(self, method, weight):
        with pytest.raises(ContractError):
            AdaptJob(method, weight)

    def test_asa_weight_may_exceed_one(self):
        assert AdaptJob("asa", 3.0).weight == 3.0

    def test_unknown_method(self):
        with pytest.raises(ContractError):
            AdaptJob("fmllr")

    def test_streams_are_deterministic(self):
        a, b = AdaptJob("asa", seed=3).streams(), AdaptJob("asa", seed=3).streams()
        assert a[0] == b[0]
        assert a[1].random() == b[1].random()


def test_feature_split():
    split = adapt.feature_split(make_si())
    assert set(split.classifier) == {"out.W", "out.b"}
    assert not set(split.classifier) & set(split.feature)
    assert len(split.feature) + 2 == len(make_si())


class TestInterpolatedTarget:
    def test_rho_zero_is_one_hot(self):
        np.testing.assert_array_equal(adapt.interpolated_target(1, [0.5, 0.3, 0.2], 0.0), [0, 1, 0])

    def test_rho_one_is_si(self):
        np.testing.assert_array_equal(adapt.interpolated_target(1, [0.5, 0.3, 0.2], 1.0), [0.5, 0.3, 0.2])

    def test_hand_example(self):
        np.testing.assert_allclose(adapt.interpolated_target(1, [0.5, 0.3, 0.2], 0.2), [0.10, 0.86, 0.04],
                                   rtol=0, atol=1e-15)

    @pytest.mark.parametrize("rho", [-0.01, 1.01])
    def test_rho_range(self, rho):
        with pytest.raises(ContractError):
            adapt.interpolated_target(0, [0.5, 0.5], rho)

    @given(st.floats(0, 1), st.integers(0, 5), st.integers(0, 2**16))
    def test_is_distribution(self, rho, y, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(6))
        t = adapt.interpolated_target(y, p, rho)
        assert np.all(t >= 0)
        assert abs(t.sum() - 1) < 1e-12
        assert t[y] >= p[y] - 1e-15


class TestKldLoss:
    def test_rho_zero_equals_ce(self, rng):
        lp = np.log(rng.dirichlet(np.ones(7), size=3))
        Y = [3, 4, aed.EOS]
        si = rng.dirichlet(np.ones(7), size=3)
        assert adapt.kld_adapt_loss(Tensor(lp), si, Y, 0.0).item() == aed.aed_loss(Tensor(lp), Y).item()

    def test_rho_one_same_model_is_entropy(self, rng):
        p = rng.dirichlet(np.ones(7), size=4)
        want = -(p * np.log(p)).sum()
        assert adapt.kld_adapt_loss(Tensor(np.log(p)), p, [2, 3, 4, 1], 1.0).item() == pytest.approx(want, rel=1e-13)

    def test_double_sum_oracle(self, rng):
        sd = rng.dirichlet(np.ones(5), size=3)
        si = rng.dirichlet(np.ones(5), size=3)
        Y, rho = [4, 2, 1], 0.35
        want = 0.0
        for t in range(3):
            for u in range(5):
                want -= ((1 - rho) * (u == Y[t]) + rho * si[t, u]) * np.log(sd[t, u])
        got = adapt.kld_adapt_loss(Tensor(np.log(sd)), si, Y, rho).item()
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


    @pytest.mark.parametrize("rho", [0.0, 0.2, 0.5, 0.8, 1.0])
    def test_rearrangement(self, rho, rng):
        sd = rng.dirichlet(np.ones(6), size=4)
        si = rng.dirichlet(np.ones(6), size=4)
        Y = [2, 5, 3, 1]
        nll = -np.log(sd[np.arange(4), Y]).sum()
        ce = -(si * np.log(sd)).sum()
        got = adapt.kld_adapt_loss(Tensor(np.log(sd)), si, Y, rho).item()
        assert got == pytest.approx((1 - rho) * nll + rho * ce, rel=1e-12, abs=1e-10)


class TestKldAdapt:
    def test_zero_epochs_is_copy(self):
        si = make_si()
        res = adapt.kld_adapt(si, make_utts(), AdaptJob("kld", epochs=0))
        assert digest(res.params) == digest(si)
        assert res.params["out.W"] is not si["out.W"]

    def test_empty_set(self):
        with pytest.raises(ContractError):
            adapt.kld_adapt(make_si(), [], AdaptJob("kld"))

    def test_rho_one_gradient_vanishes_at_si(self):
        si = make_si()
        sd = si.copy().set_requires_grad(True)
        u = make_utts(1)[0]
        with ad.no_grad():
            p_si = np.exp(aed.aed_forward(u.X, u.Y, si).data)
        g = grads(sd, lambda: adapt.kld_adapt_loss(aed.aed_forward(u.X, u.Y, sd), p_si, u.Y, 1.0))
        assert max(np.abs(v).max() for v in g.values()) < 1e-10

    def test_single_step_oracle(self):
        si = make_si()
        u = make_utts(1)[0]
        job = AdaptJob("kld", 0.3, lr=0.05, epochs=1, batch_size=1)
        res = adapt.kld_adapt(si, [u], job)
        ref = si.copy().set_requires_grad(True)
        p_si = np.exp(oracles.aed_log_posteriors(u.X, u.Y, {k: v.data for k, v in si.items()}))
        g = grads(ref, lambda: adapt.kld_adapt_loss(aed.aed_forward(u.X, u.Y, ref), p_si, u.Y, 0.3))
        for k in si:
            np.testing.assert_allclose(res.params[k].data, si[k].data - 0.05 * g[k], rtol=0, atol=1e-14)

    def test_si_untouched(self):
        si = make_si()
        before = digest(si)
        adapt.kld_adapt(si, make_utts(), AdaptJob("kld", lr=0.1, epochs=2))
        assert digest(si) == before


def disc_params(seed=0, d=CFG.dim, hidden=6):
    return adapt.init_discriminator(d, hidden, np.random.default_rng(seed))


class TestDiscriminatorLoss:
    def test_zero_output_layer(self, rng):
        disc = disc_params()
        disc["out.W"].data[:] = 0.0
        F = rng.normal(size=(4, CFG.dim))
        loss = adapt.discriminator_loss(Tensor(F), rng.normal(size=(4, CFG.dim)), disc).item()
        assert loss == pytest.approx(4 * 2 * np.log(2), rel=1e-15)

    def test_identical_models_give_identical_features(self):
        si = make_si()
        sd = si.copy()
        batch = aed.make_batch([u.X for u in make_utts()], [u.Y for u in make_utts()])
        a = aed.forward_batch(si, batch).stacked_features().data
        b = aed.forward_batch(sd, batch).stacked_features().data
        assert a.tobytes() == b.tobytes()

    def test_bce_oracle(self, rng):
        disc = disc_params()
        F_sd, F_si = rng.normal(size=(3, CFG.dim)), rng.normal(size=(3, CFG.dim))
        a = {k: v.data for k, v in disc.items()}

        def D(f):
            h = np.tanh(np.tanh(f @ a["l0.W"] + a["l0.b"]) @ a["l1.W"] + a["l1.b"])
            return oracles.sig((h @ a["out.W"] + a["out.b"])[0])

        want = -sum(np.log(D(x)) + np.log(1 - D(y)) for x, y in zip(F_sd, F_si))
        assert adapt.discriminator_loss(Tensor(F_sd), F_si, disc).item() == pytest.approx(want, rel=1e-12)

    def test_mask_drops_padding(self, rng):
        disc = disc_params()
        F_sd, F_si = rng.normal(size=(2, 3, CFG.dim)), rng.normal(size=(2, 3, CFG.dim))
        mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
        got = adapt.discriminator_loss(Tensor(F_sd), F_si, disc, mask).item()
        want = sum(adapt.discriminator_loss(Tensor(F_sd[i, :n]), F_si[i, :n], disc).item()
                   for i, n in [(0, 2), (1, 1)])
        assert got == pytest.approx(want, rel=1e-13)


def si_features(si, utts):
    batch = aed.make_batch([u.X for u in utts], [u.Y for u in utts])
    with ad.no_grad():
        return batch, aed.forward_batch(si, batch).stacked_features().data


class TestAsa:
    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            adapt.asa_adapt(make_si(), make_utts(), AdaptJob("asa", -1.0))

    def test_lambda_zero_matches_plain_retraining(self):
        si, utts = make_si(), make_utts(4)
        kw = dict(lr=0.02, epochs=2, batch_size=2, seed=5)
        a = adapt.asa_adapt(si, utts, AdaptJob("asa", 0.0, **kw))
        k = adapt.kld_adapt(si, utts, AdaptJob("kld", 0.0, **kw))
        assert digest(a.params) == digest(k.params)
        assert a.history == k.history
        assert len(a.disc_history) == 2

    @pytest.mark.parametrize("lam", [0.5, 0.3, 2.0])
    def test_gradient_reversal(self, lam):
        si, utts = make_si(), make_utts()
        batch, F_si = si_features(si, utts)
        sd = si.copy().set_requires_grad(True)
        for v in sd.values():
            v.data += 0.05 * np.random.default_rng(2).normal(size=v.shape)
        disc = disc_params().set_requires_grad(False)
        explicit = grads(sd, lambda: adapt.asa_objective(sd, disc, batch, F_si, lam))
        grl = grads(sd, lambda: adapt.asa_objective(sd, disc, batch, F_si, lam, reversal="grl"))
        l_aed = grads(sd, lambda: aed.batch_nll(sd, batch))
        l_disc = grads(sd, lambda: adapt.discriminator_loss(aed.forward_batch(sd, batch).stacked_features(),
                                                            F_si, disc, batch.y_mask))
        for k in sd:
            np.testing.assert_allclose(grl[k], explicit[k], rtol=0, atol=1e-13)
            np.testing.assert_allclose(explicit[k], l_aed[k] - lam * l_disc[k], rtol=0, atol=1e-13)
        if lam == 0.5:  # power-of-two scaling is exact
            assert all(np.array_equal(grl[k], explicit[k]) for k in sd)
        # the reversed term never reaches the classifier
        assert all(np.array_equal(grl[k], l_aed[k]) for k in ("out.W", "out.b"))

    def test_one_round_vs_two_phase_oracle(self):
        si, utts = make_si(), make_utts(2)
        batch, F_si = si_features(si, utts)
        job = AdaptJob("asa", 0.5, lr=0.03, disc_lr=0.2)
        sd, disc = si.copy().set_requires_grad(True), disc_params()
        sd_ref, disc_ref = sd.copy(), disc.copy()
        frozen = disc_ref.copy().set_requires_grad(False)
        want_value = adapt.asa_objective(sd_ref, frozen, batch, F_si, 0.5).item()
        value, d_value = adapt.asa_round(sd, disc, batch, F_si, job)

        # phase a: SD descends on L_AED - lam * L_DISC with D held fixed
        g = grads(sd_ref, lambda: aed.batch_nll(sd_ref, batch))
        gd = grads(sd_ref, lambda: adapt.discriminator_loss(
            aed.forward_batch(sd_ref, batch).stacked_features(), F_si, frozen, batch.y_mask))
        for k, v in sd_ref.items():
            v.data = v.data - 0.03 * (g[k] - 0.5 * gd[k])
        # phase b: D descends on L_DISC against the updated SD features
        F_sd = aed.forward_batch(sd_ref, batch).stacked_features().data
        gdisc = grads(disc_ref, lambda: adapt.discriminator_loss(Tensor(F_sd), F_si, disc_ref, batch.y_mask))
        for k, v in disc_ref.items():
            v.data = v.data - 0.2 * gdisc[k]

        for k in sd:
            np.testing.assert_allclose(sd[k].data, sd_ref[k].data, rtol=0, atol=1e-14)
        for k in disc:
            np.testing.assert_allclose(disc[k].data, disc_ref[k].data, rtol=0, atol=1e-14)
        assert value == want_value
        assert d_value == adapt.discriminator_loss(Tensor(F_sd), F_si, frozen, batch.y_mask).item()

    def test_adversarial_term_moves_features(self):
        si, utts = make_si(), make_utts(3)
        kw = dict(lr=0.02, epochs=2, batch_size=3, seed=1)
        a = adapt.asa_adapt(si, utts, AdaptJob("asa", 1.0, **kw))
        k = adapt.kld_adapt(si, utts, AdaptJob("kld", 0.0, **kw))
        assert digest(a.params) != digest(k.params)
        assert all(np.isfinite(a.params[name].data).all() for name in a.params)


class TestCharDecoder:
    def test_zero_epochs(self):
        si = make_si()
        char = make_char(si)
        before = digest(char.head)
        assert adapt.train_char_decoder(char, make_utts(), 0) == []
        assert digest(char.head) == before

    def test_encoder_frozen(self):
        si = make_si()
        before = digest(si)
        char = make_char(si)
        hist = adapt.train_char_decoder(char, make_utts(4), 3, batch_size=2, lr=0.01)
        assert digest(si) == before
        assert digest(char.encoder) == digest(si.select("enc."))
        assert len(hist) == 3

    def test_single_step_oracle(self):
        si, utts = make_si(), make_utts(2)
        char = make_char(si)
        ref = char.head.copy()
        opt = SGD(list(char.head.values()), 0.05)
        adapt.train_char_decoder(char, utts, 1, batch_size=2, clip=1e9, optimizer=opt)
        batch = adapt.char_batch(utts)
        enc = si.copy().set_requires_grad(False)
        g = grads(ref, lambda: aed.batch_nll(enc, batch, ref))
        for k in ref:
            np.testing.assert_allclose(char.head[k].data, ref[k].data - 0.05 * g[k], rtol=0, atol=1e-14)

    def test_label_out_of_vocab(self):
        si = make_si()
        utts = make_utts(1)
        utts[0].C = [LEX.n_char + 2, aed.EOS]
        with pytest.raises(ContractError):
            adapt.train_char_decoder(make_char(si), utts, 1)

    def test_loss_decreases(self):
        si, utts = make_si(), make_utts(4)
        hist = adapt.train_char_decoder(make_char(si), utts, 15, batch_size=4, lr=0.02)
        assert hist[-1] < hist[0]


class TestMtl:
    def setup_method(self):
        self.si = make_si()
        self.char = make_char(self.si)
        self.utts = make_utts(3)
        self.wsu = aed.make_batch([u.X for u in self.utts], [u.Y for u in self.utts])
        self.chars = adapt.char_batch(self.utts)
        self.sd = self.si.copy().set_requires_grad(True)
        self.head = self.char.head.copy().set_requires_grad(False)

    def enc_grads(self, fn):
        g = grads(self.sd, fn)
        return {k: v for k, v in g.items() if k.startswith("enc.")}

    def test_beta_one_is_pure_wsu(self):
        sd, head = self.sd, self.head
        got = self.enc_grads(lambda: adapt.mtl_objective(sd, head, self.wsu, self.chars, 1.0))
        want = self.enc_grads(lambda: aed.batch_nll(sd, self.wsu))
        assert all(np.array_equal(got[k], want[k]) for k in want)
        value = adapt.mtl_objective(sd, head, self.wsu, self.chars, 1.0).item()
        assert value == aed.batch_nll(sd, self.wsu).item()

    def test_beta_zero_is_pure_char(self):
        sd, head = self.sd, self.head
        got = grads(sd, lambda: adapt.mtl_objective(sd, head, self.wsu, self.chars, 0.0))
        want = grads(sd, lambda: aed.batch_nll(sd, self.chars, head))
        for k in sd:
            if k.startswith("enc."):
                assert np.array_equal(got[k], want[k])
            else:
                assert not got[k].any()

    def test_half_step_oracle(self):
        job = AdaptJob("mtl", 0.5, lr=0.04, epochs=1, batch_size=3)
        res = adapt.mtl_adapt(self.si, self.char, self.utts, job)
        sd, head = self.sd, self.head
        gw = self.enc_grads(lambda: aed.batch_nll(sd, self.wsu))
        gc = self.enc_grads(lambda: aed.batch_nll(sd, self.chars, head))
        for k, v in self.si.items():
            want = v.data - 0.04 * (0.5 * gw[k] + 0.5 * gc[k]) if k in gw else v.data
            np.testing.assert_allclose(res.params[k].data, want, rtol=0, atol=1e-12)

    def test_heads_untouched(self):
        res = adapt.mtl_adapt(self.si, self.char, self.utts, AdaptJob("mtl", 0.5, lr=0.05, epochs=2))
        head_keys = [k for k in self.si if not k.startswith("enc.")]
        assert all(np.array_equal(res.params[k].data, self.si[k].data) for k in head_keys)
        assert any(not np.array_equal(res.params[k].data, self.si[k].data) for k in self.si if k.startswith("enc."))
        assert digest(self.char.head) == digest(make_char(make_si()).head)

    def test_missing_char_labels(self):
        self.utts[1].C = []
        with pytest.raises(ContractError):
            adapt.mtl_adapt(self.si, self.char, self.utts, AdaptJob("mtl"))

    def test_dispatch_needs_char_model(self):
        with pytest.raises(ContractError):
            adapt.adapt(self.si, self.utts, AdaptJob("mtl"))


class TestUnsupervised:
    @given(st.integers(0, 2**16))
    def test_chars_are_expansion(self, seed):
        si = make_si(seed % 5)
        X = np.random.default_rng(seed).normal(size=(4, 4))
        Y, C = adapt.unsupervised_labels(si, X, LEX)
        assert Y[-1] == aed.EOS
        assert C == LEX.expand(Y)

    def test_empty_decode_is_skipped(self):
        si = make_si()
        si["out.b"].data[aed.EOS] = 1e3
        utts = make_utts(3)
        with pytest.warns(UserWarning, match="empty decode"):
            out = adapt.pseudo_label(si, utts, LEX)
        assert out == []
        si["out.b"].data[aed.EOS] = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            out = adapt.pseudo_label(make_si(), utts, LEX)
        assert len(out) <= 3

    def test_one_empty_decode_shrinks_set_by_one(self, monkeypatch):
        utts = make_utts(3)
        real = adapt.unsupervised_labels

        def rigged(si, X, lexicon, beam_width=1):
            return ([aed.EOS], [aed.EOS]) if X is utts[1].X else real(si, X, lexicon, beam_width)

        monkeypatch.setattr(adapt, "unsupervised_labels", rigged)
        with pytest.warns(UserWarning, match="s_1"):
            out = adapt.pseudo_label(make_si(), utts, LEX)
        assert [u.uid for u in out] == ["s_0", "s_2"]

    def test_fitted_model_reproduces_reference(self):
        si = make_si()
        u = make_utts(1)[0]
        train_si(si, [u], 150, batch_size=1, lr=0.03, clip=1e9)
        Y, C = adapt.unsupervised_labels(si, u.X, LEX)
        assert Y == u.Y and C == u.C

    def test_unsup_without_lexicon(self):
        with pytest.raises(ContractError):
            adapt.adapt(make_si(), make_utts(), AdaptJob("kld", supervision="unsup"))
