import json

import pytest

from aedadapt import cli, storage
from aedadapt.errors import DivergenceError

TINY = {
    "corpus": {"n_train_speakers": 2, "n_heldout_speakers": 2, "train_utts": 8, "matched_test_utts": 2,
               "heldout_test_utts": 3, "adapt_utts": 4, "max_words": 4},
    "model": {"enc_layers": 1, "enc_hidden": 6, "dec_layers": 1, "dim": 6, "att_dim": 6},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.01, "min_lr": 0.001},
    "char": {"epochs": 1, "batch_size": 8},
    "grid": {"sizes": [2], "seeds": [0, 1], "epochs": 1, "batch_size": 2, "lr": 0.001},
}


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert cli.main(["gen-data", *c, "--seed", "5", "--out", str(root / "corpus")]) == 0
    assert cli.main(["train-si", *c, "--corpus", str(root / "corpus"), "--out", str(root / "si")]) == 0
    assert cli.main(["train-char", *c, "--corpus", str(root / "corpus"), "--si", str(root / "si"),
                     "--out", str(root / "char")]) == 0
    return root, c


def run(work, *argv):
    root, c = work
    return cli.main([argv[0], *c, *argv[1:]])


def test_gen_data_is_reproducible(work, tmp_path):
    root, c = work
    assert cli.main(["gen-data", *c, "--seed", "5", "--out", str(tmp_path / "again")]) == 0
    assert files(root / "corpus") == files(tmp_path / "again")
    manifest = json.loads((root / "corpus" / "manifest.json").read_text())
    assert set(manifest["splits"]) == {"train", "adapt", "test"}


def test_train_si_resume_is_bitwise(work):
    root, _ = work
    corpus = str(root / "corpus")
    assert run(work, "train-si", "--corpus", corpus, "--stop-after", "1", "--out", str(root / "half")) == 0
    assert run(work, "train-si", "--corpus", corpus, "--resume", str(root / "half"), "--out", str(root / "rest")) == 0
    assert files(root / "rest") == files(root / "si")
    state = storage.load_checkpoint(root / "si").state
    assert state["epoch"] == 2 and len(state["history"]) == 2


def test_char_training_keeps_si_encoder(work):
    root, _ = work
    si = storage.load_checkpoint(root / "si").arrays
    char = storage.load_checkpoint(root / "char", "CHAR").arrays
    enc = [k for k in si if k.startswith("enc.")]
    assert enc and all(char[k].tobytes() == si[k].tobytes() for k in enc)


def test_adapt_methods_and_aliases(work):
    root, _ = work
    base = ["--corpus", str(root / "corpus"), "--si", str(root / "si")]
    assert run(work, "adapt", *base, "--method", "kld", "--rho", "0.3", "--n-utts", "2",
               "--out", str(root / "kld")) == 0
    job = json.loads((root / "kld" / "job.json").read_text())
    assert job["job"]["weight"] == 0.3 and job["n_utts"] == 2 and len(job["loss"]) == 1
    assert run(work, "adapt", *base, "--method", "asa", "--alpha", "0.5", "--out", str(root / "asa")) == 0
    assert len(json.loads((root / "asa" / "job.json").read_text())["disc_loss"]) == 1
    assert run(work, "adapt", *base, "--method", "mtl", "--char", str(root / "char"), "--beta", "0.5",
               "--supervision", "unsup", "--out", str(root / "mtl")) == 0
    sd = storage.load_checkpoint(root / "mtl", "SD-WSU")
    assert sd.config["lexicon"] == storage.load_checkpoint(root / "si").config["lexicon"]


@pytest.mark.parametrize("extra", [
    ["--method", "kld", "--alpha", "0.5"],
    ["--method", "kld", "--rho", "0.1", "--weight", "0.2"],
    ["--method", "mtl"],
    ["--method", "kld", "--rho", "1.5"],
    ["--method", "kld", "--speaker", "tr00"],
    ["--method", "kld", "--n-utts", "50"],
    ["--weight", "0.1"],
])
def test_adapt_usage_errors(work, extra, tmp_path):
    root, _ = work
    code = run(work, "adapt", "--corpus", str(root / "corpus"), "--si", str(root / "si"), *extra,
               "--out", str(tmp_path / "x"))
    assert code == 1


def test_decode_and_score(work, capsys):
    root, _ = work
    corpus = str(root / "corpus")
    assert run(work, "decode", "--corpus", corpus, "--reference", "--out", str(root / "ref.tsv")) == 0
    assert run(work, "decode", "--corpus", corpus, "--model", str(root / "si"), "--out", str(root / "hyp.tsv")) == 0
    assert run(work, "decode", "--corpus", corpus, "--model", str(root / "si"), "--beam", "1",
               "--out", str(root / "hyp1.tsv")) == 0
    assert (root / "hyp.tsv").read_bytes() == (root / "hyp1.tsv").read_bytes()
    lines = (root / "ref.tsv").read_text().splitlines()
    assert len(lines) == 6 and lines[0].startswith("ho00-test-0000\t")
    capsys.readouterr()
    assert cli.main(["score", str(root / "ref.tsv"), str(root / "ref.tsv"), "--out", str(root / "s.json")]) == 0
    assert capsys.readouterr().out.startswith("WER 0.00%")
    assert cli.main(["score", str(root / "ref.tsv"), str(root / "hyp.tsv"), "--out", str(root / "s.json")]) == 0
    report = json.loads((root / "s.json").read_text())
    assert set(report["per_speaker"]) == {"ho00", "ho01"}


def test_score_mismatched_files(work, tmp_path):
    root, _ = work
    (tmp_path / "h.tsv").write_text("ho00-test-0000\ta b\n")
    assert cli.main(["score", str(root / "ref.tsv"), str(tmp_path / "h.tsv")]) == 1
    assert cli.main(["score", str(tmp_path / "missing.tsv"), str(tmp_path / "h.tsv")]) == 1


@pytest.mark.filterwarnings("ignore:empty decode")
def test_experiment_reruns_identically(work):
    root, _ = work
    base = ["--corpus", str(root / "corpus"), "--si", str(root / "si"), "--char", str(root / "char"), "--seed", "3"]
    assert run(work, "experiment", *base, "--out", str(root / "e1")) == 0
    assert run(work, "experiment", *base, "--out", str(root / "e2")) == 0
    assert files(root / "e1") == files(root / "e2")
    doc = json.loads((root / "e1" / "report.json").read_text())
    assert doc["grid"]["seeds"] == [3]


def test_experiment_needs_char_for_mtl(work, tmp_path):
    root, _ = work
    assert run(work, "experiment", "--corpus", str(root / "corpus"), "--si", str(root / "si"),
               "--out", str(tmp_path)) == 1


def test_checkpoint_kind_and_lexicon_checked(work, tmp_path):
    root, c = work
    assert run(work, "train-char", "--corpus", str(root / "corpus"), "--si", str(root / "char"),
               "--out", str(tmp_path / "c")) == 1
    other = dict(TINY, corpus={**TINY["corpus"], "n_letters": 10, "n_wsu": 40})
    (tmp_path / "other.json").write_text(json.dumps(other))
    assert cli.main(["gen-data", "--config", str(tmp_path / "other.json"), "--out", str(tmp_path / "oc")]) == 0
    assert run(work, "adapt", "--corpus", str(tmp_path / "oc"), "--si", str(root / "si"), "--method", "kld",
               "--out", str(tmp_path / "a")) == 1


def test_gradcheck_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "toy_gradchecks", lambda seed=0: {"kld": 1e-7, "asa": 3e-6})
    assert cli.main(["gradcheck"]) == 0
    monkeypatch.setattr(cli, "toy_gradchecks", lambda seed=0: {"kld": 1e-7, "asa": 3e-3})
    assert cli.main(["gradcheck"]) == 3
    out = capsys.readouterr().out
    assert "FAIL asa" in out and "PASS kld" in out


def test_generic_usage_errors(tmp_path):
    assert cli.main(["gen-data", "--seed", "-1", "--out", str(tmp_path)]) == 1
    assert cli.main(["gen-data"]) == 1
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 1


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(args):
        raise DivergenceError("loss is nan")

    monkeypatch.setitem(cli.COMMANDS, "gen-data", boom)
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 2
