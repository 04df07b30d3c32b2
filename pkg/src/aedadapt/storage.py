"""On-disk formats: parameter checkpoints and corpus directories.

Both are a ``manifest.json`` next to raw little-endian float64 blobs.
Manifests are written with sorted keys so that saving the same content
twice produces identical bytes.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import Corpus, CorpusConfig, Lexicon, SpeakerProfile, Utterance
from .errors import ContractError, ShapeError
from .nn import ParamSet

FORMAT_VERSION = 1
KINDS = ("SI-WSU", "SD-WSU", "CHAR", "DISC")
MANIFEST = "manifest.json"
BLOB = "params.bin"
DTYPE = np.dtype("<f8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ContractError(f"missing {path}") from None
    except json.JSONDecodeError as e:
        raise ContractError(f"malformed {path}: {e}") from None


def _pack(arrays: Mapping[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.astype(DTYPE).tobytes())
        offset += a.size
    return entries, b"".join(chunks)


def _unpack(entries: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    flat = np.frombuffer(blob, dtype=DTYPE)
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > flat.size:
            raise ShapeError(f"entry {e['name']} runs past the end of the blob")
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if expected != flat.size:
        raise ShapeError(f"blob holds {flat.size} values, manifest describes {expected}")
    return out


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def params(self, prefix: str = "") -> ParamSet:
        """Trainable tensors for entries not under ``opt.`` (optionally one prefix only)."""
        return ParamSet(
            (k, Tensor(v.copy(), requires_grad=True, name=k)) for k, v in self.arrays.items()
            if not k.startswith("opt.") and k.startswith(prefix)
        )

    def check_shapes(self, reference: Mapping[str, Tensor | np.ndarray]) -> None:
        """Reject checkpoints whose parameters differ in names or shapes from ``reference``."""
        mine = {k: v.shape for k, v in self.arrays.items() if not k.startswith("opt.")}
        theirs = {k: tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for k, v in reference.items()}
        if mine.keys() != theirs.keys():
            missing, extra = sorted(theirs.keys() - mine.keys()), sorted(mine.keys() - theirs.keys())
            raise ShapeError(f"checkpoint parameter names differ: missing {missing[:4]}, unexpected {extra[:4]}")
        bad = [k for k in mine if mine[k] != theirs[k]]
        if bad:
            k = bad[0]
            raise ShapeError(f"checkpoint shape mismatch for {k}: {mine[k]} vs expected {theirs[k]}")


def save_checkpoint(path, kind: str, arrays: Mapping[str, Tensor | np.ndarray],
                    config: Mapping | None = None, state: Mapping | None = None) -> Path:
    """Write ``arrays`` (tensors or ndarrays, in the given order) to directory ``path``."""
    if kind not in KINDS:
        raise ContractError(f"checkpoint kind must be one of {KINDS}, got {kind!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    raw = {k: (v.data if isinstance(v, Tensor) else v) for k, v in arrays.items()}
    entries, blob = _pack(raw)
    manifest = {"version": FORMAT_VERSION, "kind": kind, "blob": BLOB, "entries": entries,
                "config": dict(config or {}), "state": dict(state or {})}
    (path / BLOB).write_bytes(blob)
    _write_json(path / MANIFEST, manifest)
    return path


def load_checkpoint(path, kind: str | tuple[str, ...] | None = None) -> Checkpoint:
    path = Path(path)
    m = _read_json(path / MANIFEST)
    if m.get("version") != FORMAT_VERSION:
        raise ContractError(f"checkpoint version {m.get('version')!r} is not {FORMAT_VERSION}")
    kinds = (kind,) if isinstance(kind, str) else kind
    if kinds is not None and m.get("kind") not in kinds:
        raise ContractError(f"expected a {'/'.join(kinds)} checkpoint, found {m.get('kind')!r}")
    try:
        blob = (path / m["blob"]).read_bytes()
    except FileNotFoundError:
        raise ContractError(f"checkpoint blob missing in {path}") from None
    return Checkpoint(m["kind"], _unpack(m["entries"], blob), m["config"], m["state"])


def optimizer_arrays(opt) -> dict[str, np.ndarray]:
    """Adam moments keyed ``opt.m.<i>`` / ``opt.v.<i>`` in parameter order."""
    out = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"opt.m.{i}"] = m
        out[f"opt.v.{i}"] = v
    return out


def restore_optimizer(opt, ckpt: Checkpoint) -> None:
    for i in range(len(opt.params)):
        try:
            opt.m[i][...] = ckpt.arrays[f"opt.m.{i}"]
            opt.v[i][...] = ckpt.arrays[f"opt.v.{i}"]
        except KeyError:
            raise ContractError("checkpoint carries no optimiser state to resume from") from None
    opt.t = int(ckpt.state["opt_t"])


# ----------------------------------------------------------------------------
# corpus directories
# ----------------------------------------------------------------------------


def _utt_index(utts: list[Utterance], offset: int) -> tuple[list[dict], list[np.ndarray], int]:
    index, frames = [], []
    for u in utts:
        index.append({"uid": u.uid, "speaker": u.speaker, "frames": u.X.shape[0], "offset": offset,
                      "Y": [int(y) for y in u.Y], "C": [int(c) for c in u.C]})
        frames.append(u.X)
        offset += u.X.size
    return index, frames, offset


def save_corpus(corpus: Corpus, path) -> Path:
    """One binary per split (``train``, ``adapt``, ``test``) plus the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = {"train": corpus.train,
              "adapt": [u for s in corpus.heldout_speakers for u in corpus.adapt[s]],
              "test": [u for s in corpus.train_speakers + corpus.heldout_speakers for u in corpus.test[s]]}
    index = {}
    for name, utts in splits.items():
        entries, frames, _ = _utt_index(utts, 0)
        index[name] = entries
        blob = b"".join(np.asarray(f, dtype=np.float64).astype(DTYPE).tobytes() for f in frames)
        (path / f"{name}.bin").write_bytes(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "seed": corpus.seed,
        "config": corpus.config.to_dict(),
        "lexicon": corpus.lexicon.to_dict(),
        "train_speakers": corpus.train_speakers,
        "heldout_speakers": corpus.heldout_speakers,
        "speakers": {n: {"A": s.A.tolist(), "b": s.b.tolist(), "tempo": s.tempo, "noise": s.noise}
                     for n, s in corpus.speakers.items()},
        "splits": index,
    }
    _write_json(path / MANIFEST, manifest)
    return path


def load_corpus(path) -> Corpus:
    path = Path(path)
    m = _read_json(path / MANIFEST)
    if m.get("version") != FORMAT_VERSION:
        raise ContractError(f"corpus version {m.get('version')!r} is not {FORMAT_VERSION}")
    cfg = CorpusConfig.from_dict(m["config"])
    splits = {}
    for name, entries in m["splits"].items():
        flat = np.frombuffer((path / f"{name}.bin").read_bytes(), dtype=DTYPE)
        utts = []
        for e in entries:
            n = e["frames"] * cfg.feat_dim
            X = flat[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["frames"], cfg.feat_dim)
            utts.append(Utterance(e["uid"], e["speaker"], X, list(e["Y"]), list(e["C"])))
        splits[name] = utts
    speakers = {n: SpeakerProfile(n, np.array(s["A"]), np.array(s["b"]), s["tempo"], s["noise"])
                for n, s in m["speakers"].items()}
    adapt = {s: [u for u in splits["adapt"] if u.speaker == s] for s in m["heldout_speakers"]}
    test = {s: [u for u in splits["test"] if u.speaker == s] for s in speakers}
    return Corpus(cfg, m["seed"], Lexicon.from_dict(m["lexicon"]), speakers, splits["train"], adapt, test,
                  list(m["train_speakers"]), list(m["heldout_speakers"]))
