import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aedadapt import aed
from aedadapt.autodiff import Tensor
from aedadapt.data import CorpusConfig, generate_corpus
from aedadapt.errors import ContractError, DivergenceError
from aedadapt.train import SGD, Adam, clip_grad_norm, cosine_lr, epoch_batches, train_si

SMALL = CorpusConfig(n_train_speakers=2, n_heldout_speakers=1, train_utts=6, matched_test_utts=1,
                     heldout_test_utts=1, adapt_utts=1, max_words=3)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SMALL, seed=2)


def model(corpus):
    cfg = aed.AedConfig(feat_dim=SMALL.feat_dim, vocab_size=corpus.lexicon.n_wsu, enc_layers=1, enc_hidden=6,
                        dec_layers=1, dim=6, att_dim=6)
    return aed.init_aed_params(cfg, 0)


def test_resume_is_bitwise(corpus):
    a = model(corpus)
    hist = train_si(a, corpus.train, 4, batch_size=4, lr=1e-2, min_lr=1e-3)
    b = model(corpus)
    opt = Adam(list(b.values()), 1e-2)
    h1 = train_si(b, corpus.train, 2, batch_size=4, lr=1e-2, optimizer=opt, total_epochs=4, min_lr=1e-3)
    h2 = train_si(b, corpus.train, 2, batch_size=4, lr=1e-2, optimizer=opt, start_epoch=2, total_epochs=4,
                  min_lr=1e-3)
    assert hist == h1 + h2
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_loss_decreases(corpus):
    hist = train_si(model(corpus), corpus.train, 8, batch_size=4, lr=1e-2)
    assert hist[-1] < 0.8 * hist[0]


def test_divergence_is_reported(corpus):
    p = model(corpus)
    p["out.b"].data[0] = np.nan
    with pytest.raises(DivergenceError):
        train_si(p, corpus.train, 1)


def test_empty_training_set(corpus):
    with pytest.raises(ContractError):
        train_si(model(corpus), [], 1)


def test_on_epoch_callback(corpus):
    seen = []
    hist = train_si(model(corpus), corpus.train, 2, batch_size=6, on_epoch=lambda e, l: seen.append((e, l)))
    assert seen == list(enumerate(hist))


class TestOptimisers:
    def test_sgd(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        SGD([p], 0.1).step()
        np.testing.assert_array_equal(p.data, [0.95, 2.1])

    def test_adam_first_step_is_signed_lr(self):
        p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        p.grad = np.array([1e-3, -5.0, 0.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)

    def test_bad_lr(self):
        with pytest.raises(ContractError):
            SGD([], 0.0)
        with pytest.raises(ContractError):
            Adam([], -1.0)

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        np.testing.assert_allclose(p.grad, [0.6, 0.8])
        assert clip_grad_norm([p], 10.0) == pytest.approx(1.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 100), st.integers(0, 5))
def test_epoch_batches_partition(n, bs, seed, epoch):
    batches = epoch_batches(n, bs, seed, epoch)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(b) == bs for b in batches[:-1]) and 1 <= len(batches[-1]) <= bs
    assert all(np.array_equal(a, b) for a, b in zip(batches, epoch_batches(n, bs, seed, epoch)))


def test_cosine_lr():
    assert cosine_lr(1.0, 0.1, 0, 5) == 1.0
    assert cosine_lr(1.0, 0.1, 4, 5) == pytest.approx(0.1)
    assert cosine_lr(1.0, 0.1, 2, 5) == pytest.approx(0.55)
    lrs = [cosine_lr(1.0, 0.1, e, 7) for e in range(7)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
