"""Train a speaker-independent model and measure the speaker-shift gap.

The synthetic corpus gives each training speaker a mild affine distortion
of shared unit prototypes and each held-out speaker a strong one.  A model
trained on the first group transcribes its own speakers well and the
held-out speakers much worse; that gap is what adaptation tries to close.

Pass --epochs to trade accuracy for time (the default matches the
library default, about five minutes on a laptop CPU).
"""

import argparse
import logging
from dataclasses import replace

from aedadapt.config import Config
from aedadapt.data import coverage_report, generate_corpus
from aedadapt.experiment import speaker_counts
from aedadapt.pipeline import build_si, fit_si, matched_wer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=Config().train.epochs)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = Config()
    cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    corpus = generate_corpus(cfg.corpus, seed=0)
    print(f"{len(corpus.train)} training utterances from {len(corpus.train_speakers)} speakers; "
          f"held-out speakers {corpus.heldout_speakers}")

    # Word units follow a Zipf law, so a 20-utterance adaptation set sees few of
    # them while seeing every character.
    for s in corpus.heldout_speakers:
        cov = coverage_report(corpus.adapt[s], corpus.lexicon)
        print(f"  {s}: WSU coverage {cov['wsu_coverage']:.0%}, character coverage {cov['char_coverage']:.0%}")

    si = build_si(corpus, cfg)
    fit_si(si, corpus, cfg)
    print(f"\nmatched-speaker WER: {matched_wer(si, corpus):.2f}%")
    for s in corpus.heldout_speakers:
        print(f"held-out {s} WER:    {speaker_counts(si, corpus.test[s]).wer:.2f}%")


if __name__ == "__main__":
    main()
