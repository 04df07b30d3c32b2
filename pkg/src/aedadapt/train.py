"""Optimisers and the speaker-independent training loop."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np

from . import aed
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DivergenceError
from .nn import ParamSet

log = logging.getLogger(__name__)


class SGD:
    """Plain gradient descent: ``p <- p - lr * grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr!r}")
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr!r}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def cosine_lr(lr: float, min_lr: float, epoch: int, total_epochs: int) -> float:
    frac = min(epoch / max(total_epochs - 1, 1), 1.0)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + np.cos(np.pi * frac))


def check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} is not finite ({value!r})")
    return value


def train_si(
    params: ParamSet,
    utterances: Sequence,
    epochs: int,
    batch_size: int = 16,
    lr: float = 3e-3,
    seed: int = 0,
    clip: float = 5.0,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
    total_epochs: int | None = None,
    min_lr: float | None = None,
) -> list[float]:
    """Minimise the summed WSU cross-entropy with Adam; returns per-epoch mean loss per utterance.

    With ``min_lr`` set, the learning rate follows a cosine from ``lr`` down
    to ``min_lr`` over ``total_epochs`` (default ``start_epoch + epochs``).
    Pass the optimiser of an earlier run plus ``start_epoch`` and
    ``total_epochs`` to resume.
    """
    if not utterances:
        raise ContractError("empty training set")
    opt = optimizer or Adam(list(params.values()), lr)
    vocab = aed.vocab_size_of(params)
    history = []
    total_epochs = start_epoch + epochs if total_epochs is None else total_epochs
    for epoch in range(start_epoch, start_epoch + epochs):
        if min_lr is not None:
            opt.lr = cosine_lr(lr, min_lr, epoch, total_epochs)
        total = 0.0
        for idx in epoch_batches(len(utterances), batch_size, seed, epoch):
            batch = aed.make_batch([utterances[i].X for i in idx], [utterances[i].Y for i in idx])
            params.zero_grad()
            with ad.Tape() as tape:
                trace = aed.forward_batch(params, batch)
                loss = aed.cross_entropy(trace.log_probs, batch.targets(vocab))
            total += check_finite(loss.item(), f"training loss at epoch {epoch}")
            tape.backward(loss)
            clip_grad_norm(opt.params, clip * len(idx))
            opt.step()
        history.append(total / len(utterances))
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history
