"""Synthetic audio-visual toy corpus and its perturbations.

Each content word owns fixed hidden audio and video renderings; an utterance
is the per-frame concatenation of its words' renderings plus Gaussian
emission noise.  A word's frames share a base vector and differ by a smaller
per-frame variation, so a word reads as one sustained sound.  Audio runs at
twice the video frame rate per word, matching 50 fps audio vs 25 fps video.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assembly import content_word
from .autograd import DegenerateInputError, ParameterError
from .nn import ConfigError

TOKENIZER_CAPACITY = 100
SNR_LEVELS_DB = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, math.inf)
CORPUS_FORMAT = "avsr-toy-corpus/1"
FEATURE_MAGIC = b"AVF1"
SPLITS = ("train", "valid", "test")


@dataclass
class ToyCorpusSpec:
    vocab_size: int = 32
    min_words: int = 4
    max_words: int = 16
    audio_frames_per_word: int = 2
    video_frames_per_word: int = 1
    d_audio: int = 32
    d_video: int = 32
    emission_noise_std: float = 0.5
    frame_variation: float = 0.5  # per-frame deviation from the word's base vector
    no_adjacent_repeats: bool = True
    seed: int = 0
    n_train: int = 2000
    n_valid: int = 100
    n_test: int = 200

    def validate(self) -> None:
        if not 1 <= self.vocab_size <= TOKENIZER_CAPACITY:
            raise ConfigError(f"vocab_size must be in [1, {TOKENIZER_CAPACITY}], got {self.vocab_size}")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError(f"bad utterance length range [{self.min_words}, {self.max_words}]")
        if self.audio_frames_per_word < 1 or self.video_frames_per_word < 1:
            raise ConfigError("frames per word must be positive")
        if self.emission_noise_std < 0 or self.frame_variation < 0:
            raise ConfigError("emission_noise_std and frame_variation must be non-negative")
        if self.no_adjacent_repeats and self.vocab_size < 2 and self.max_words > 1:
            raise ConfigError("no_adjacent_repeats needs at least two words")
        if min(self.n_train, self.n_valid, self.n_test) < 0 or self.n_train + self.n_valid + self.n_test < 1:
            raise ConfigError("split sizes must be non-negative and not all zero")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    uid: str
    words: np.ndarray  # content symbol indices
    audio: np.ndarray  # [T_a, d_audio]
    video: np.ndarray  # [T_v, d_video]
    snr_db: float = math.inf
    split: str = "train"

    def text(self) -> list[str]:
        return [content_word(int(w)) for w in self.words]


@dataclass
class NoiseSpec:
    snr_levels_db: tuple[float, ...] = SNR_LEVELS_DB
    n_talkers: int = 5

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.snr_levels_db[rng.integers(len(self.snr_levels_db))])


def word_tables(spec: ToyCorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-word renderings [vocab, frames_per_word, d] for audio and video."""
    rng = np.random.default_rng([spec.seed, 0])
    tables = []
    for frames, d in ((spec.audio_frames_per_word, spec.d_audio), (spec.video_frames_per_word, spec.d_video)):
        base = rng.normal(size=(spec.vocab_size, 1, d))
        tables.append(base + spec.frame_variation * rng.normal(size=(spec.vocab_size, frames, d)))
    return tables[0], tables[1]


def sample_words(rng: np.random.Generator, n: int, vocab_size: int, no_adjacent_repeats: bool) -> np.ndarray:
    """``n`` uniform word indices; optionally each differs from its predecessor."""
    if not no_adjacent_repeats:
        return rng.integers(0, vocab_size, n)
    words = np.empty(n, dtype=np.int64)
    words[0] = rng.integers(0, vocab_size)
    for i in range(1, n):
        w = int(rng.integers(0, vocab_size - 1))
        words[i] = w + (w >= words[i - 1])
    return words


def render(words: np.ndarray, spec: ToyCorpusSpec, tables, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    audio_tab, video_tab = tables
    a = audio_tab[words].reshape(-1, spec.d_audio)
    v = video_tab[words].reshape(-1, spec.d_video)
    if spec.emission_noise_std > 0:
        a = a + spec.emission_noise_std * rng.normal(size=a.shape)
        v = v + spec.emission_noise_std * rng.normal(size=v.shape)
    return a.astype(np.float32), v.astype(np.float32)


def generate_corpus(spec: ToyCorpusSpec, n_utterances: int | None = None) -> list[Utterance]:
    """Deterministic corpus; the first ``n_train`` utterances are train, then valid, then test.

    Utterance ``i`` draws from its own generator seeded by (seed, 1, i), so
    any prefix of the corpus is reproducible independently of its length.
    """
    spec.validate()
    n = n_utterances if n_utterances is not None else spec.n_train + spec.n_valid + spec.n_test
    if n < 1:
        raise ParameterError("n_utterances must be >= 1")
    tables = word_tables(spec)
    bounds = np.cumsum([spec.n_train, spec.n_valid, spec.n_test])
    out = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, 1, i])
        length = int(rng.integers(spec.min_words, spec.max_words + 1))
        words = sample_words(rng, length, spec.vocab_size, spec.no_adjacent_repeats)
        audio, video = render(words, spec, tables, rng)
        split = SPLITS[min(int(np.searchsorted(bounds, i, side="right")), 2)]
        out.append(Utterance(f"utt{i:06d}", words, audio, video, math.inf, split))
    return out


def split_corpus(utts: list[Utterance]) -> dict[str, list[Utterance]]:
    return {s: [u for u in utts if u.split == s] for s in SPLITS}


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def mix_noise_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """``clean + g * noise`` with ``g`` set so that 10 log10(P_clean / P_gnoise) = snr_db.

    Powers are mean squared values.  ``snr_db = inf`` returns ``clean`` untouched.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return clean
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    if clean.shape != noise.shape:
        raise ParameterError(f"clean {clean.shape} and noise {noise.shape} shapes differ")
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0:
        raise DegenerateInputError("clean signal has zero power")
    if p_noise == 0:
        raise DegenerateInputError("noise has zero power; finite SNR is unreachable")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    out = clean.astype(np.float64) + gain * noise.astype(np.float64)
    return out.astype(clean.dtype)


def babble_noise(length: int, pool: list[np.ndarray], rng: np.random.Generator, n_talkers: int = 5,
                 exclude: int | None = None) -> np.ndarray:
    """Mean of ``n_talkers`` other utterances' features, each cyclically
    tiled and started at a random offset to cover ``length`` frames.

    ``exclude`` names the pool index of the target utterance itself, which is
    never drawn as a talker.
    """
    n_pool = len(pool) - (exclude is not None)
    if n_pool < 1:
        raise DegenerateInputError("babble needs at least one other utterance")
    acc = np.zeros((length, pool[0].shape[1]), dtype=np.float64)
    for j in rng.integers(0, n_pool, n_talkers):
        j = int(j)
        if exclude is not None and j >= exclude:
            j += 1
        src = pool[j]
        offset = int(rng.integers(src.shape[0]))
        idx = (offset + np.arange(length)) % src.shape[0]
        acc += src[idx]
    return (acc / n_talkers).astype(np.float32)


def z_normalize(features: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit standard deviation over the whole utterance."""
    x = np.asarray(features, dtype=np.float64)
    if x.size < 2:
        raise ParameterError("z-normalisation needs at least two values")
    std = x.std()
    out = (x - x.mean()) / max(std, eps)
    return out.astype(features.dtype)


def adaptive_time_mask(features: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Replace up to ``floor(rho*T)`` frames, in ``max(1, T // 25)`` spans,
    with the utterance mean frame."""
    if not 0 <= rho < 1:
        raise ParameterError(f"rho must be in [0, 1), got {rho}")
    T = features.shape[0]
    budget = int(math.floor(rho * T))
    out = features.copy()
    if budget == 0:
        return out
    n_spans = max(1, T // 25)
    max_width = budget // n_spans
    if max_width == 0:
        return out
    fill = features.mean(axis=0)
    for _ in range(n_spans):
        width = int(rng.integers(0, max_width + 1))
        if width == 0:
            continue
        start = int(rng.integers(0, T - width + 1))
        out[start:start + width] = fill
    return out


# -- on-disk format ------------------------------------------------------------

def write_features(path: Path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(x.tobytes())


def read_features(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_corpus(utts: list[Utterance], spec: ToyCorpusSpec, directory) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    with open(directory / "corpus.json", "w") as fh:
        json.dump({"format": CORPUS_FORMAT, "spec": spec.to_dict()}, fh, indent=2, sort_keys=True)
    with open(directory / "manifest.jsonl", "w") as fh:
        for u in utts:
            write_features(directory / "features" / f"{u.uid}.audio.f32", u.audio)
            write_features(directory / "features" / f"{u.uid}.video.f32", u.video)
            rec = {"id": u.uid, "words": " ".join(u.text()), "snr_db": None if math.isinf(u.snr_db) else u.snr_db,
                   "split": u.split}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return directory


def load_corpus(directory) -> tuple[list[Utterance], ToyCorpusSpec]:
    directory = Path(directory)
    with open(directory / "corpus.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{directory}: unknown corpus format {meta.get('format')!r}")
    spec = ToyCorpusSpec(**meta["spec"])
    utts = []
    with open(directory / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            words = np.array([int(w[1:]) for w in rec["words"].split()], dtype=np.int64)
            audio = read_features(directory / "features" / f"{rec['id']}.audio.f32")
            video = read_features(directory / "features" / f"{rec['id']}.video.f32")
            snr = math.inf if rec["snr_db"] is None else float(rec["snr_db"])
            utts.append(Utterance(rec["id"], words, audio, video, snr, rec["split"]))
    return utts, spec
