"""Word error rate over WSU tokens."""

from __future__ import annotations

from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> tuple[int, int, int]:
    """Substitutions, deletions and insertions of a minimum-cost alignment.

    Among minimum-cost alignments the one with the fewest deletions plus
    insertions wins, so a substitution is preferred to a delete/insert pair.
    """
    n, m = len(ref), len(hyp)
    # each cell holds (cost, deletions + insertions, deletions, insertions)
    prev = [(j, j, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, i, 0)]
        for j in range(1, m + 1):
            c, g, d, ins = prev[j - 1]
            hit = ref[i - 1] == hyp[j - 1]
            best = (c + (0 if hit else 1), g, d, ins)
            c, g, d, ins = prev[j]
            best = min(best, (c + 1, g + 1, d + 1, ins))
            c, g, d, ins = cur[j - 1]
            best = min(best, (c + 1, g + 1, d, ins + 1))
            cur.append(best)
        prev = cur
    cost, _, d, ins = prev[m]
    return cost - d - ins, d, ins


@dataclass
class Counts:
    S: int = 0
    D: int = 0
    I: int = 0  # noqa: E741
    N: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.S + other.S, self.D + other.D, self.I + other.I, self.N + other.N)

    @property
    def errors(self) -> int:
        return self.S + self.D + self.I

    @property
    def wer(self) -> float:
        if self.N == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return 100.0 * self.errors / self.N

    def to_dict(self) -> dict:
        return {"S": self.S, "D": self.D, "I": self.I, "N": self.N}


@dataclass
class ScoreReport:
    per_speaker: dict[str, Counts] = field(default_factory=dict)

    @property
    def total(self) -> Counts:
        out = Counts()
        for c in self.per_speaker.values():
            out = out + c
        return out

    @property
    def wer(self) -> float:
        return self.total.wer

    def speaker_wer(self, speaker: str) -> float:
        return self.per_speaker[speaker].wer

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "counts": self.total.to_dict(),
            "per_speaker": {k: {"wer": v.wer, **v.to_dict()} for k, v in sorted(self.per_speaker.items())},
        }


def score(refs: Sequence[Sequence[Hashable]], hyps: Sequence[Sequence[Hashable]],
          speakers: Sequence[str] | None = None) -> ScoreReport:
    """Score hypotheses against references; ``speakers`` labels each pair (default one group)."""
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if speakers is None:
        speakers = ["all"] * len(refs)
    elif len(speakers) != len(refs):
        raise ContractError("one speaker label per reference required")
    report = ScoreReport()
    for ref, hyp, spk in zip(refs, hyps, speakers):
        s, d, i = edit_distance(list(ref), list(hyp))
        report.per_speaker[spk] = report.per_speaker.get(spk, Counts()) + Counts(s, d, i, len(ref))
    return report


def relative_reduction(baseline: float, adapted: float) -> float:
    """Relative WER reduction in percent."""
    return float(np.nan) if baseline == 0 else 100.0 * (baseline - adapted) / baseline
