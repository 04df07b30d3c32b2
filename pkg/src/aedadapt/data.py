"""Synthetic multi-speaker corpus and frame stacking.

Every WSU owns a prototype feature vector.  An utterance is a sequence of
WSUs, each held for a few frames of noisy prototype, pushed through the
speaker's affine transform ``x -> A x + b`` and then stacked/strided.
Training speakers get mild transforms, held-out speakers stronger ones, so
a speaker-independent model trained on the former degrades on the latter.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .aed import EOS
from .errors import ContractError

BOUNDARY = "_"
RESERVED = ("<sos>", "<eos>")
LEXICON_SEED = 20190415


@dataclass(frozen=True)
class Lexicon:
    """WSU and character inventories plus the WSU -> characters expansion."""

    letters: tuple[str, ...]
    units: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.units)) != len(self.units):
            raise ContractError("WSU inventory has duplicates")
        missing = set("".join(self.units)) - set(self.letters)
        if missing:
            raise ContractError(f"WSUs use characters outside the inventory: {sorted(missing)}")

    @property
    def wsu_vocab(self) -> tuple[str, ...]:
        return RESERVED + self.units

    @property
    def char_vocab(self) -> tuple[str, ...]:
        return RESERVED + (BOUNDARY,) + self.letters

    @property
    def n_wsu(self) -> int:
        return len(self.wsu_vocab)

    @property
    def n_char(self) -> int:
        return len(self.char_vocab)

    def expand(self, wsu_ids: Iterable[int]) -> list[int]:
        """Character ids for a WSU id sequence, boundary-separated, ending in ``<eos>``.

        A trailing ``<eos>`` in the input is ignored.
        """
        char_index = {c: i for i, c in enumerate(self.char_vocab)}
        words = [int(w) for w in wsu_ids]
        if words and words[-1] == EOS:
            words = words[:-1]
        out: list[int] = []
        for j, w in enumerate(words):
            if w < len(RESERVED) or w >= self.n_wsu:
                raise ContractError(f"WSU id {w} is not an expandable unit")
            if j:
                out.append(char_index[BOUNDARY])
            out.extend(char_index[c] for c in self.wsu_vocab[w])
        out.append(EOS)
        return out

    def to_dict(self) -> dict:
        return {"letters": list(self.letters), "units": list(self.units)}

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicon":
        return cls(tuple(d["letters"]), tuple(d["units"]))


def default_lexicon(n_letters: int = 12, n_wsu: int = 64) -> Lexicon:
    """Fixed toy inventory: every letter alone, then distinct 2-4 letter units."""
    if n_letters < 1 or n_letters > 26:
        raise ContractError("n_letters must be in [1, 26]")
    if n_wsu < n_letters:
        raise ContractError("need at least one WSU per letter")
    letters = tuple("abcdefghijklmnopqrstuvwxyz"[:n_letters])
    rng = np.random.default_rng(LEXICON_SEED)
    units = list(letters)
    seen = set(units)
    while len(units) < n_wsu:
        n = int(rng.integers(2, 5))
        u = "".join(rng.choice(letters, size=n))
        if u not in seen:
            seen.add(u)
            units.append(u)
    return Lexicon(letters, tuple(units))


@dataclass
class SpeakerProfile:
    speaker: str
    A: np.ndarray
    b: np.ndarray
    tempo: float
    noise: float

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return raw @ self.A.T + self.b


@dataclass
class Utterance:
    uid: str
    speaker: str
    X: np.ndarray  # stacked frames (T, stack * raw_dim)
    Y: list[int]  # WSU ids ending in <eos>
    C: list[int]  # char ids ending in <eos>

    @property
    def words(self) -> list[int]:
        return self.Y[:-1]


@dataclass(frozen=True)
class CorpusConfig:
    n_train_speakers: int = 8
    n_heldout_speakers: int = 3
    train_utts: int = 250
    matched_test_utts: int = 12
    heldout_test_utts: int = 30
    adapt_utts: int = 20
    n_letters: int = 12
    n_wsu: int = 64
    raw_dim: int = 8
    stack: int = 3
    stride: int = 3
    min_words: int = 2
    max_words: int = 8
    min_dur: int = 2
    max_dur: int = 5
    zipf_exponent: float = 1.3
    proto_scale: float = 1.5
    train_shift: float = 0.15
    train_offset: float = 0.1
    heldout_shift: float = 0.5
    heldout_offset: float = 0.4
    tempo_range: tuple[float, float] = (0.8, 1.25)
    noise_range: tuple[float, float] = (0.05, 0.1)

    def __post_init__(self):
        if self.n_train_speakers < 2:
            raise ContractError("need at least 2 training speakers")
        if self.n_heldout_speakers < 1:
            raise ContractError("need at least 1 held-out speaker")
        if not 1 <= self.min_words <= self.max_words:
            raise ContractError("bad utterance length range")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ContractError("bad duration range")
        if self.stack < 1 or self.stride < 1:
            raise ContractError("stack and stride must be >= 1")

    @property
    def feat_dim(self) -> int:
        return self.stack * self.raw_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tempo_range"] = list(self.tempo_range)
        d["noise_range"] = list(self.noise_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown corpus config keys: {sorted(unknown)}")
        for k in ("tempo_range", "noise_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    lexicon: Lexicon
    speakers: dict[str, SpeakerProfile]
    train: list[Utterance]
    adapt: dict[str, list[Utterance]]
    test: dict[str, list[Utterance]]
    train_speakers: list[str] = field(default_factory=list)
    heldout_speakers: list[str] = field(default_factory=list)


def stack_frames(raw: np.ndarray, stack: int, stride: int) -> np.ndarray:
    """Concatenate ``stack`` consecutive frames every ``stride`` frames.

    Output frame ``k`` holds ``raw[k*stride : k*stride + stack]``, with zeros
    for positions past the end of the input.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if stack < 1 or stride < 1:
        raise ContractError("stack and stride must be >= 1")
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ContractError(f"stack_frames needs a nonempty (N, d) array, got {raw.shape}")
    n, d = raw.shape
    n_out = math.ceil(n / stride)
    padded = np.zeros((n_out * stride + stack, d))
    padded[:n] = raw
    idx = np.arange(n_out)[:, None] * stride + np.arange(stack)[None, :]
    return padded[idx].reshape(n_out, stack * d)


def _transform(rng, dim: int, shift: float, offset: float) -> tuple[np.ndarray, np.ndarray]:
    while True:
        A = np.eye(dim) + shift * rng.normal(size=(dim, dim)) / math.sqrt(dim)
        if np.linalg.cond(A) < 50:
            return A, offset * rng.normal(size=dim)


def make_speaker(rng, name: str, cfg: CorpusConfig, heldout: bool) -> SpeakerProfile:
    shift, offset = (cfg.heldout_shift, cfg.heldout_offset) if heldout else (cfg.train_shift, cfg.train_offset)
    A, b = _transform(rng, cfg.raw_dim, shift, offset)
    tempo = float(rng.uniform(*cfg.tempo_range))
    noise = float(rng.uniform(*cfg.noise_range))
    return SpeakerProfile(name, A, b, tempo, noise)


def unit_probabilities(n_units: int, exponent: float) -> np.ndarray:
    """Zipf-like unigram distribution over WSUs (rank 1 most frequent)."""
    w = 1.0 / np.arange(1, n_units + 1) ** exponent
    return w / w.sum()


def sample_words(rng, cfg: CorpusConfig, probs: np.ndarray) -> list[int]:
    """WSU ids (offset past the reserved tokens) with no immediate repeats."""
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    words: list[int] = []
    while len(words) < n:
        w = int(rng.choice(len(probs), p=probs)) + len(RESERVED)
        if not words or w != words[-1]:
            words.append(w)
    return words


def render_frames(rng, words: Sequence[int], prototypes: np.ndarray, speaker: SpeakerProfile,
                  cfg: CorpusConfig) -> np.ndarray:
    """Raw frames for ``words``; durations count stacked frames, scaled by tempo."""
    segs = []
    for w in words:
        dur = int(rng.integers(cfg.min_dur, cfg.max_dur + 1))
        n_raw = max(cfg.stride, int(round(dur * speaker.tempo * cfg.stride)))
        proto = prototypes[w - len(RESERVED)]
        segs.append(proto + speaker.noise * rng.normal(size=(n_raw, cfg.raw_dim)))
    return speaker.apply(np.concatenate(segs, axis=0))


def make_utterance(rng, uid: str, speaker: SpeakerProfile, cfg: CorpusConfig, lexicon: Lexicon,
                   prototypes: np.ndarray, probs: np.ndarray) -> Utterance:
    words = sample_words(rng, cfg, probs)
    raw = render_frames(rng, words, prototypes, speaker, cfg)
    X = stack_frames(raw, cfg.stack, cfg.stride)
    Y = words + [EOS]
    return Utterance(uid, speaker.speaker, X, Y, lexicon.expand(Y))


def generate_corpus(config: CorpusConfig | None = None, seed: int = 0) -> Corpus:
    """Build train, per-speaker adaptation and per-speaker test sets.

    Pure function of ``(config, seed)``.  Training speakers get matched test
    sets; held-out speakers get disjoint adaptation and test sets.
    """
    cfg = config or CorpusConfig()
    lexicon = default_lexicon(cfg.n_letters, cfg.n_wsu)
    root = np.random.SeedSequence(seed)
    proto_ss, spk_ss, utt_ss = root.spawn(3)
    prototypes = cfg.proto_scale * np.random.default_rng(proto_ss).normal(size=(cfg.n_wsu, cfg.raw_dim))
    probs = unit_probabilities(cfg.n_wsu, cfg.zipf_exponent)
    # frequency ranks are shuffled so that unit frequency is unrelated to spelling length
    probs = probs[np.random.default_rng(proto_ss.spawn(1)[0]).permutation(cfg.n_wsu)]

    spk_rng = np.random.default_rng(spk_ss)
    train_names = [f"tr{i:02d}" for i in range(cfg.n_train_speakers)]
    held_names = [f"ho{i:02d}" for i in range(cfg.n_heldout_speakers)]
    speakers = {n: make_speaker(spk_rng, n, cfg, heldout=False) for n in train_names}
    speakers.update({n: make_speaker(spk_rng, n, cfg, heldout=True) for n in held_names})

    streams = iter(utt_ss.spawn(2 * len(speakers)))

    def batch(name: str, split: str, count: int) -> list[Utterance]:
        rng = np.random.default_rng(next(streams))
        return [make_utterance(rng, f"{name}-{split}-{i:04d}", speakers[name], cfg, lexicon, prototypes, probs)
                for i in range(count)]

    train, adapt, test = [], {}, {}
    for name in train_names:
        train.extend(batch(name, "train", cfg.train_utts))
        test[name] = batch(name, "test", cfg.matched_test_utts)
    for name in held_names:
        adapt[name] = batch(name, "adapt", cfg.adapt_utts)
        test[name] = batch(name, "test", cfg.heldout_test_utts)
        overlap = {u.uid for u in adapt[name]} & {u.uid for u in test[name]}
        if overlap:
            raise ContractError(f"adaptation/test overlap for speaker {name}: {sorted(overlap)[:3]}")
    return Corpus(cfg, seed, lexicon, speakers, train, adapt, test, train_names, held_names)


def coverage_report(utterances: Sequence[Utterance], lexicon: Lexicon) -> dict[str, float]:
    """Fraction of WSUs and of characters (reserved tokens excluded) seen at least once."""
    if not utterances:
        raise ContractError("coverage_report needs a nonempty set")
    wsu_seen = {w for u in utterances for w in u.Y if w >= len(RESERVED)}
    char_seen = {c for u in utterances for c in u.C if c >= len(RESERVED)}
    return {
        "wsu_coverage": len(wsu_seen) / (lexicon.n_wsu - len(RESERVED)),
        "char_coverage": len(char_seen) / (lexicon.n_char - len(RESERVED)),
    }
