"""Command-line entry point.

Commands: gen-data, train-si, train-char, adapt, decode, score, experiment,
gradcheck.  Exit codes: 0 success, 1 usage or config error, 2 numeric
failure, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import aed, storage
from .adapt import AdaptJob, CharAed, adapt, init_char_aed
from .config import Config, load_config
from .data import Lexicon, generate_corpus
from .errors import ContractError, DivergenceError, DomainError, OracleInvalidError
from .experiment import decode_set, run_experiment
from .gradcheck import THRESHOLD, toy_gradchecks
from .metrics import score
from .nn import ParamSet
from .pipeline import fit_char, fit_si
from .train import Adam

log = logging.getLogger("aedadapt")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
WEIGHT_ALIASES = {"rho": "kld", "alpha": "asa", "beta": "mtl"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _config(args) -> Config:
    return load_config(args.config)


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _model_config(ckpt: storage.Checkpoint) -> dict:
    try:
        return ckpt.config["aed"]
    except KeyError:
        raise ContractError("checkpoint carries no model config") from None


def _load_wsu(path, corpus_lexicon: Lexicon | None = None, kinds=("SI-WSU", "SD-WSU")) -> tuple[ParamSet, dict]:
    ckpt = storage.load_checkpoint(path, kinds)
    acfg = aed.AedConfig(**_model_config(ckpt))
    ckpt.check_shapes(aed.init_aed_params(acfg, 0))
    if corpus_lexicon is not None and ckpt.config.get("lexicon") != corpus_lexicon.to_dict():
        raise ContractError(f"checkpoint {path} was trained on a different lexicon")
    return ckpt.params(), ckpt.config


def _load_char(path, si: ParamSet, lexicon: Lexicon) -> CharAed:
    ckpt = storage.load_checkpoint(path, "CHAR")
    if ckpt.config.get("lexicon") != lexicon.to_dict():
        raise ContractError(f"character checkpoint {path} was trained on a different lexicon")
    char = init_char_aed(si, lexicon.n_char)
    head = ckpt.params()
    head = ParamSet((k, v) for k, v in head.items() if not k.startswith("enc."))
    storage.Checkpoint(ckpt.kind, {k: v.data for k, v in head.items()}).check_shapes(char.head)
    return CharAed(char.encoder, head)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_transcripts(path: Path, uids, token_lists, lexicon: Lexicon) -> None:
    vocab = lexicon.wsu_vocab
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{u}\t{' '.join(vocab[t] for t in toks)}\n" for u, toks in zip(uids, token_lists)))


def _read_transcripts(path) -> dict[str, list[str]]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise ContractError(f"transcript file {path} not found") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        uid, _, text = line.partition("\t")
        if uid in out:
            raise ContractError(f"{path}:{n}: duplicate utterance id {uid!r}")
        out[uid] = text.split()
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    corpus = generate_corpus(cfg.corpus, args.seed if args.seed is not None else 0)
    storage.save_corpus(corpus, _out(args))
    return EXIT_OK


def cmd_train_si(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    corpus = storage.load_corpus(args.corpus)
    acfg = cfg.model.aed_config(corpus.config.feat_dim, corpus.lexicon.n_wsu)
    params = aed.init_aed_params(acfg, cfg.train.seed)
    opt = Adam(list(params.values()), cfg.train.lr)
    start, history = 0, []
    if args.resume:
        ckpt = storage.load_checkpoint(args.resume, "SI-WSU")
        ckpt.check_shapes(params)
        if ckpt.config.get("train") != asdict(cfg.train):
            raise ContractError("resume needs the same training config as the checkpoint")
        for k, v in ckpt.params().items():
            params[k].data[...] = v.data
        storage.restore_optimizer(opt, ckpt)
        start, history = int(ckpt.state["epoch"]), list(ckpt.state["history"])
    stop = cfg.train.epochs if args.stop_after is None else min(args.stop_after, cfg.train.epochs)
    if stop < start:
        raise ContractError(f"checkpoint is already at epoch {start}")
    hist, opt = fit_si(params, corpus, cfg, optimizer=opt, start_epoch=start, epochs=stop - start)
    for e, loss in enumerate(hist, start):
        log.info("epoch %d train loss %.6f", e, loss)
    history += hist
    arrays = {**params.arrays(), **storage.optimizer_arrays(opt)}
    conf = {"aed": asdict(acfg), "lexicon": corpus.lexicon.to_dict(), "train": asdict(cfg.train)}
    storage.save_checkpoint(_out(args), "SI-WSU", arrays, conf,
                            {"seed": cfg.train.seed, "epoch": stop, "opt_t": opt.t, "history": history})
    return EXIT_OK


def cmd_train_char(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, char=replace(cfg.char, seed=args.seed))
    corpus = storage.load_corpus(args.corpus)
    si, si_conf = _load_wsu(args.si, corpus.lexicon, ("SI-WSU",))
    char, hist = fit_char(si, corpus, cfg)
    for e, loss in enumerate(hist):
        log.info("char epoch %d loss %.6f", e, loss)
    conf = {"aed": si_conf["aed"], "lexicon": corpus.lexicon.to_dict(), "char": asdict(cfg.char)}
    storage.save_checkpoint(_out(args), "CHAR", char.params, conf,
                            {"seed": cfg.char.seed, "epoch": cfg.char.epochs, "history": hist})
    return EXIT_OK


def _weight(args) -> float | None:
    given = {k: getattr(args, k) for k in ("weight", *WEIGHT_ALIASES) if getattr(args, k) is not None}
    if len(given) > 1:
        raise UsageError(f"give the weight once, got {sorted(given)}")
    if not given:
        return None
    (name, value), = given.items()
    if name in WEIGHT_ALIASES and WEIGHT_ALIASES[name] != args.method:
        raise UsageError(f"--{name} is the {WEIGHT_ALIASES[name]} weight; use --weight for {args.method}")
    return value


def cmd_adapt(args) -> int:
    if args.method is None:
        raise UsageError("--method is required")
    cfg = _config(args)
    corpus = storage.load_corpus(args.corpus)
    si, si_conf = _load_wsu(args.si, corpus.lexicon, ("SI-WSU",))
    char = None
    if args.method == "mtl":
        if not args.char:
            raise UsageError("--char is required for MTL adaptation")
        char = _load_char(args.char, si, corpus.lexicon)
    speaker = args.speaker or corpus.heldout_speakers[0]
    if speaker not in corpus.adapt:
        raise UsageError(f"no adaptation set for speaker {speaker!r}; choose from {sorted(corpus.adapt)}")
    n = args.n_utts or len(corpus.adapt[speaker])
    if n > len(corpus.adapt[speaker]):
        raise UsageError(f"speaker {speaker} has only {len(corpus.adapt[speaker])} adaptation utterances")
    g = cfg.grid
    job = AdaptJob(args.method, _weight(args), args.supervision, lr=g.lr, epochs=g.epochs,
                   batch_size=g.batch_size, seed=args.seed or 0, disc_lr=g.disc_lr, disc_hidden=g.disc_hidden)
    result = adapt(si, corpus.adapt[speaker][:n], job, char=char, lexicon=corpus.lexicon)
    out = _out(args)
    storage.save_checkpoint(out, "SD-WSU", result.params,
                            {"aed": si_conf["aed"], "lexicon": corpus.lexicon.to_dict()},
                            {"seed": job.seed, "epoch": job.epochs})
    _write_json(out / "job.json", {"job": asdict(job), "speaker": speaker, "n_utts": n,
                                   "n_used": result.n_utterances, "loss": result.history,
                                   "disc_loss": result.disc_history})
    return EXIT_OK


def cmd_decode(args) -> int:
    corpus = storage.load_corpus(args.corpus)
    speakers = [args.speaker] if args.speaker else corpus.heldout_speakers
    if args.split == "train":
        utts = [u for u in corpus.train if u.speaker in speakers]
    else:
        pool = corpus.adapt if args.split == "adapt" else corpus.test
        utts = [u for s in speakers for u in pool.get(s, [])]
    if not utts:
        raise UsageError(f"no {args.split} utterances for speakers {speakers}")
    if args.reference:
        hyps = [u.words for u in utts]
    else:
        if not args.model:
            raise UsageError("--model is required unless --reference is given")
        params, _ = _load_wsu(args.model, corpus.lexicon)
        hyps = decode_set(params, utts, args.beam)
    _write_transcripts(_out(args), [u.uid for u in utts], hyps, corpus.lexicon)
    return EXIT_OK


def cmd_score(args) -> int:
    refs, hyps = _read_transcripts(args.ref), _read_transcripts(args.hyp)
    if refs.keys() != hyps.keys():
        raise ContractError(f"reference and hypothesis files cover different utterances "
                            f"({len(refs.keys() ^ hyps.keys())} unmatched)")
    uids = sorted(refs)
    report = score([refs[u] for u in uids], [hyps[u] for u in uids], [u.split("-")[0] for u in uids])
    print(f"WER {report.wer:.2f}% ({report.total.errors}/{report.total.N}; "
          f"S={report.total.S} D={report.total.D} I={report.total.I})")
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    grid = cfg.grid if args.seed is None else replace(cfg.grid, seeds=(args.seed,))
    corpus = storage.load_corpus(args.corpus)
    si, _ = _load_wsu(args.si, corpus.lexicon, ("SI-WSU",))
    char = None
    if grid.weights.get("mtl"):
        if not args.char:
            raise UsageError("the grid has MTL cells; --char is required")
        char = _load_char(args.char, si, corpus.lexicon)
    report = run_experiment(grid, corpus, si, char)
    report.write(_out(args))
    print(report.to_markdown())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = toy_gradchecks(args.seed or 0)
    failed = False
    for name, err in errors.items():
        ok = err < THRESHOLD
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
    return EXIT_VERIFY if failed else EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aedadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config file (flags override its values)")
        sp.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")
        if out:
            sp.add_argument("--out", help="output directory or file")
        return sp

    common(sub.add_parser("gen-data", help="generate a synthetic corpus directory"))

    sp = common(sub.add_parser("train-si", help="train the speaker-independent WSU model"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--resume", help="SI checkpoint to continue from")
    sp.add_argument("--stop-after", type=int, help="stop once this many epochs are done")

    sp = common(sub.add_parser("train-char", help="train the character decoder on the frozen SI encoder"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--si", required=True)

    sp = common(sub.add_parser("adapt", help="adapt the SI model to one held-out speaker"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--si", required=True)
    sp.add_argument("--char", help="character checkpoint (MTL only)")
    sp.add_argument("--method", choices=("kld", "asa", "mtl"))
    sp.add_argument("--weight", type=float)
    sp.add_argument("--rho", type=float, help="alias of --weight for KLD")
    sp.add_argument("--alpha", type=float, help="alias of --weight for ASA")
    sp.add_argument("--beta", type=float, help="alias of --weight for MTL")
    sp.add_argument("--supervision", choices=("sup", "unsup"), default="sup")
    sp.add_argument("--speaker")
    sp.add_argument("--n-utts", type=int)

    sp = common(sub.add_parser("decode", help="write one-best transcripts"), out=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", help="SI or SD checkpoint")
    sp.add_argument("--split", choices=("test", "adapt", "train"), default="test")
    sp.add_argument("--speaker")
    sp.add_argument("--beam", type=int, default=1)
    sp.add_argument("--reference", action="store_true", help="write the reference transcripts instead")

    sp = sub.add_parser("score", help="WER of a hypothesis file against a reference file")
    sp.add_argument("ref")
    sp.add_argument("hyp")
    sp.add_argument("--out", help="write the score report as JSON")

    sp = common(sub.add_parser("experiment", help="run the adaptation grid and write report.json/report.md"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--si", required=True)
    sp.add_argument("--char")

    common(sub.add_parser("gradcheck", help="finite-difference check of every objective"), out=False)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "train-si": cmd_train_si, "train-char": cmd_train_char, "adapt": cmd_adapt,
    "decode": cmd_decode, "score": cmd_score, "experiment": cmd_experiment, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = getattr(args, "seed", None)
    if seed is not None and not 0 <= seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, DomainError, FloatingPointError, OracleInvalidError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
