"""Adaptation grid over held-out speakers and its WER report.

Every cell adapts the same SI model to each held-out speaker, once per
seed, then decodes that speaker's test set.  Cell WER is the median over
seeds of the WER pooled across speakers.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aed
from .adapt import DEFAULT_WEIGHTS, METHODS, SUPERVISION, AdaptJob, CharAed, adapt, pseudo_label
from .autodiff import Tensor
from .data import Corpus, Utterance
from .errors import ContractError
from .metrics import Counts, score

log = logging.getLogger(__name__)

SYMBOLS = {"kld": "ρ", "asa": "λ", "mtl": "β"}
LABELS = {"kld": "KLD", "asa": "ASA", "mtl": "MTL"}


@dataclass(frozen=True)
class ExperimentGrid:
    """Methods x weights x adaptation-set sizes x supervision modes, repeated per seed."""

    weights: Mapping[str, tuple[float, ...]] = field(
        default_factory=lambda: {m: (w,) for m, w in DEFAULT_WEIGHTS.items()})
    sizes: tuple[int, ...] = (20,)
    supervision: tuple[str, ...] = SUPERVISION
    seeds: tuple[int, ...] = (0, 1, 2)
    speakers: tuple[str, ...] | None = None
    lr: float = AdaptJob.lr
    epochs: int = AdaptJob.epochs
    batch_size: int = AdaptJob.batch_size
    disc_lr: float = AdaptJob.disc_lr
    disc_hidden: int = AdaptJob.disc_hidden
    beam_width: int = 1

    def __post_init__(self):
        unknown = set(self.weights) - set(METHODS)
        if unknown:
            raise ContractError(f"unknown methods in grid: {sorted(unknown)}")
        if set(self.supervision) - set(SUPERVISION):
            raise ContractError(f"supervision modes must come from {SUPERVISION}")
        if any(n < 1 for n in self.sizes) or not self.sizes:
            raise ContractError("adaptation-set sizes must be positive")
        if not self.seeds:
            raise ContractError("at least one seed required")
        # validate every weight up front so a bad grid fails before any work
        for m, ws in self.weights.items():
            for w in ws:
                self.job(m, w, "sup", 0)

    def job(self, method: str, weight: float, supervision: str, seed: int) -> AdaptJob:
        return AdaptJob(method, weight, supervision, lr=self.lr, epochs=self.epochs,
                        batch_size=self.batch_size, seed=seed, disc_lr=self.disc_lr,
                        disc_hidden=self.disc_hidden)

    def cells(self) -> list[tuple[str, float, str, int]]:
        return [(m, w, sup, n) for m in METHODS for w in self.weights.get(m, ())
                for sup in self.supervision for n in self.sizes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {m: list(ws) for m, ws in self.weights.items()}
        for k in ("sizes", "supervision", "seeds"):
            d[k] = list(d[k])
        d["speakers"] = None if self.speakers is None else list(self.speakers)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentGrid":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown grid keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = {m: tuple(float(w) for w in ws) for m, ws in d["weights"].items()}
        for k in ("sizes", "supervision", "seeds"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("speakers") is not None:
            d["speakers"] = tuple(d["speakers"])
        return cls(**d)


def cell_key(method: str, weight: float, supervision: str, size: int) -> str:
    return f"{method}|{weight!r}|{supervision}|{size}"


def decode_set(params: Mapping[str, Tensor], utterances: Sequence[Utterance],
               beam_width: int = 1) -> list[list[int]]:
    if beam_width == 1:
        return [aed.greedy_decode(u.X, params).labels for u in utterances]
    return [aed.beam_decode(u.X, params, beam_width).labels for u in utterances]


def speaker_counts(params, utterances: Sequence[Utterance], beam_width: int = 1) -> Counts:
    hyps = decode_set(params, utterances, beam_width)
    return score([u.words for u in utterances], hyps).total


@dataclass
class ExperimentReport:
    grid: ExperimentGrid
    si: dict[str, Counts]
    # cell key -> seed -> speaker -> counts, or an error message
    runs: dict[str, dict[int, dict[str, Counts] | str]]

    def si_wer(self, speaker: str | None = None) -> float:
        if speaker is not None:
            return self.si[speaker].wer
        return _pooled(self.si.values()).wer

    def seed_wers(self, key: str, speaker: str | None = None) -> list[float]:
        out = []
        for per_spk in self.runs[key].values():
            if isinstance(per_spk, str):
                continue
            out.append(per_spk[speaker].wer if speaker else _pooled(per_spk.values()).wer)
        return out

    def cell_wer(self, key: str, speaker: str | None = None) -> float | None:
        w = self.seed_wers(key, speaker)
        return float(np.median(w)) if w else None

    def errors(self) -> dict[str, str]:
        return {f"{k}|seed={s}": v for k, runs in self.runs.items() for s, v in runs.items()
                if isinstance(v, str)}

    def to_dict(self) -> dict:
        speakers = sorted(self.si)
        cells = {}
        for (m, w, sup, n) in self.grid.cells():
            key = cell_key(m, w, sup, n)
            runs = {}
            for seed, per_spk in self.runs[key].items():
                if isinstance(per_spk, str):
                    runs[str(seed)] = {"error": per_spk}
                else:
                    pooled = _pooled(per_spk.values())
                    runs[str(seed)] = {"wer": pooled.wer, "counts": pooled.to_dict(),
                                       "per_speaker": {s: {"wer": c.wer, **c.to_dict()}
                                                       for s, c in sorted(per_spk.items())}}
            cells[key] = {
                "config": {"method": m, "weight": w, "supervision": sup, "size": n},
                "wer": self.cell_wer(key),
                "per_speaker_wer": {s: self.cell_wer(key, s) for s in speakers},
                "seeds": runs,
            }
        si = _pooled(self.si.values())
        return {
            "grid": self.grid.to_dict(),
            "si": {"wer": si.wer, "counts": si.to_dict(),
                   "per_speaker": {s: {"wer": c.wer, **c.to_dict()} for s, c in sorted(self.si.items())}},
            "cells": cells,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_markdown(self) -> str:
        cols = [(sup, n) for sup in self.grid.supervision for n in self.grid.sizes]
        names = {"sup": "Supervised", "unsup": "Unsupervised"}
        header = "| Method | Weight | " + " | ".join(f"{names[s]} {n}" for s, n in cols) + " |"
        lines = [header, "|" + "---|" * (len(cols) + 2)]
        si = f"{self.si_wer():.2f}"
        lines.append("| SI | - | " + " | ".join(si for _ in cols) + " |")
        rows = [(m, w) for m in METHODS for w in self.grid.weights.get(m, ())]
        table = {(m, w, c): self.cell_wer(cell_key(m, w, *c)) for m, w in rows for c in cols}
        best = {}
        for c in cols:
            vals = [v for (m, w, cc), v in table.items() if cc == c and v is not None]
            best[c] = min(vals) if vals else None
        for m, w in rows:
            cells = []
            for c in cols:
                v = table[(m, w, c)]
                if v is None:
                    cells.append("failed")
                elif v == best[c]:
                    cells.append(f"**{v:.2f}**")
                else:
                    cells.append(f"{v:.2f}")
            lines.append(f"| {LABELS[m]} | {SYMBOLS[m]}={w:g} | " + " | ".join(cells) + " |")
        out = "WER (%) on held-out speakers; best adapted result per column in bold.\n\n" + "\n".join(lines) + "\n"
        errs = self.errors()
        if errs:
            out += "\nFailed runs:\n\n" + "\n".join(f"- `{k}`: {v}" for k, v in sorted(errs.items())) + "\n"
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.md").write_text(self.to_markdown())
        return out


def _pooled(counts) -> Counts:
    total = Counts()
    for c in counts:
        total = total + c
    return total


def run_experiment(grid: ExperimentGrid, corpus: Corpus, si: Mapping[str, Tensor],
                   char: CharAed | None = None) -> ExperimentReport:
    """Adapt, decode and score every (cell, seed, speaker); failures are recorded, not raised."""
    speakers = list(grid.speakers or corpus.heldout_speakers)
    missing = [s for s in speakers if s not in corpus.adapt]
    if missing:
        raise ContractError(f"no adaptation data for speakers {missing}")
    if aed.vocab_size_of(si) != corpus.lexicon.n_wsu:
        raise ContractError("SI model vocabulary does not match the corpus lexicon")
    if char is not None and char.n_char != corpus.lexicon.n_char:
        raise ContractError("character model vocabulary does not match the corpus lexicon")
    for n in grid.sizes:
        for s in speakers:
            if len(corpus.adapt[s]) < n:
                raise ContractError(f"speaker {s} has {len(corpus.adapt[s])} adaptation utterances, grid asks for {n}")

    si_counts = {s: speaker_counts(si, corpus.test[s], grid.beam_width) for s in speakers}
    unsup_sets: dict[tuple[str, int], list[Utterance]] = {}
    runs: dict[str, dict] = {}
    for (m, w, sup, n) in grid.cells():
        key = cell_key(m, w, sup, n)
        runs[key] = {}
        for seed in grid.seeds:
            per_spk: dict[str, Counts] = {}
            try:
                for s in speakers:
                    data = corpus.adapt[s][:n]
                    if sup == "unsup":
                        if (s, n) not in unsup_sets:
                            unsup_sets[(s, n)] = pseudo_label(si, data, corpus.lexicon)
                        data = unsup_sets[(s, n)]
                    job = grid.job(m, w, "sup", seed)
                    result = adapt(si, data, job, char=char)
                    per_spk[s] = speaker_counts(result.params, corpus.test[s], grid.beam_width)
                runs[key][seed] = per_spk
            except (ArithmeticError, ValueError, RuntimeError) as e:
                log.warning("cell %s seed %d failed: %s", key, seed, e)
                runs[key][seed] = f"{type(e).__name__}: {e}"
            log.info("cell %s seed %d done", key, seed)
    return ExperimentReport(grid, si_counts, runs)
