"""End-to-end protocol: corpus, SI model, character decoder, adaptation grid."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from . import aed
from .adapt import CharAed, init_char_aed, train_char_decoder
from .config import Config
from .data import Corpus, generate_corpus
from .experiment import ExperimentGrid, ExperimentReport, run_experiment, speaker_counts
from .metrics import Counts
from .nn import ParamSet
from .train import Adam, train_si

log = logging.getLogger(__name__)


def build_si(corpus: Corpus, cfg: Config) -> ParamSet:
    acfg = cfg.model.aed_config(corpus.config.feat_dim, corpus.lexicon.n_wsu)
    return aed.init_aed_params(acfg, cfg.train.seed)


def fit_si(params: ParamSet, corpus: Corpus, cfg: Config, optimizer: Adam | None = None,
           start_epoch: int = 0, epochs: int | None = None) -> tuple[list[float], Adam]:
    t = cfg.train
    opt = optimizer or Adam(list(params.values()), t.lr)
    hist = train_si(params, corpus.train, t.epochs if epochs is None else epochs, batch_size=t.batch_size,
                    lr=t.lr, seed=t.seed, clip=t.clip, optimizer=opt, start_epoch=start_epoch,
                    total_epochs=t.epochs, min_lr=t.min_lr)
    return hist, opt


def fit_char(si: ParamSet, corpus: Corpus, cfg: Config) -> tuple[CharAed, list[float]]:
    c = cfg.char
    char = init_char_aed(si, corpus.lexicon.n_char, seed=c.seed, init_scale=cfg.model.init_scale)
    hist = train_char_decoder(char, corpus.train, c.epochs, batch_size=c.batch_size, lr=c.lr,
                              seed=c.seed, clip=c.clip)
    return char, hist


def matched_wer(params, corpus: Corpus) -> float:
    total = Counts()
    for s in corpus.train_speakers:
        total = total + speaker_counts(params, corpus.test[s])
    return total.wer


@dataclass
class ProtocolResult:
    corpus: Corpus
    si: ParamSet
    char: CharAed
    report: ExperimentReport
    si_history: list[float]
    char_history: list[float]
    matched_wer: float
    timings: dict[str, float] = field(default_factory=dict)


def run_protocol(cfg: Config | None = None, seed: int = 0, grid: ExperimentGrid | None = None) -> ProtocolResult:
    """Generate data, train SI and character models, then run the adaptation grid."""
    cfg = cfg or Config()
    grid = grid or cfg.grid
    timings = {}
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.corpus, seed)
    si = build_si(corpus, cfg)
    si_hist, _ = fit_si(si, corpus, cfg)
    timings["si"] = time.perf_counter() - t0
    log.info("SI trained: final loss %.4f", si_hist[-1] if si_hist else float("nan"))

    t1 = time.perf_counter()
    needs_char = bool(grid.weights.get("mtl"))
    if needs_char:
        char, char_hist = fit_char(si, corpus, cfg)
    else:
        char, char_hist = init_char_aed(si, corpus.lexicon.n_char), []
    timings["char"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    matched = matched_wer(si, corpus)
    report = run_experiment(grid, corpus, si, char)
    timings["grid"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    log.info("protocol done in %.1fs", timings["total"])
    return ProtocolResult(corpus, si, char, report, si_hist, char_hist, matched, timings)
