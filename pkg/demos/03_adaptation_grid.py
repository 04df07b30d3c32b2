"""Adapt the SI model to each held-out speaker with KLD, ASA and MTL.

This runs the whole protocol: corpus, SI model, character decoder on the
frozen SI encoder, then every method at its default weight with 10 and 20
adaptation utterances, supervised and unsupervised, over three seeds.  The
result is the same table that `aedadapt experiment` writes.

Expect roughly ten minutes of CPU time with the default configuration.
"""

import argparse
import logging

from aedadapt.adapt import DEFAULT_WEIGHTS, METHODS
from aedadapt.config import Config
from aedadapt.experiment import ExperimentGrid, cell_key
from aedadapt.metrics import relative_reduction
from aedadapt.pipeline import run_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="also write report.json and report.md here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    result = run_protocol(Config(), seed=0, grid=ExperimentGrid(sizes=(10, 20)))
    rep = result.report
    print(f"\nmatched SI WER {result.matched_wer:.2f}%, held-out SI WER {rep.si_wer():.2f}%\n")
    print(rep.to_markdown())

    si = rep.si_wer()
    for m in METHODS:
        w = DEFAULT_WEIGHTS[m]
        for sup in ("sup", "unsup"):
            wer = rep.cell_wer(cell_key(m, w, sup, 20))
            print(f"{m} {sup:5s} 20 utts: {wer:.2f}% ({relative_reduction(si, wer):+.1f}% relative)")
    print("\ntimings:", {k: round(v) for k, v in result.timings.items()})
    if args.out:
        rep.write(args.out)


if __name__ == "__main__":
    main()
