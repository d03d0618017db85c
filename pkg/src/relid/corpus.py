"""Synthetic multi-language feature corpora, speech activity masking and CMVN.

Frames are drawn from language-specific diagonal GMM sources that share a
common base mixture (so languages behave like dialects of one family), plus a
low-rank per-utterance session shift. Noise is added in feature space at a
controlled variance ratio, either over the whole utterance or only over its
first half.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from relid._binio import FormatError, Reader, f32, read_bytes, write_bytes

CLEAN_SNR_DB = 999.0
NOISE_MODES = ("clean", "full", "partial")
NOISE_TYPES = ("gaussian", "talker")
_FEATURE_MAGIC = b"RLID"
_FEATURE_VERSION = 1


@dataclass
class FeatureSequence:
    """A T x D matrix of frame features with a voicing mask.

    Frames are stored as float32, the precision of the on-disk format.
    """

    frames: np.ndarray
    hop_ms: int = 10
    voiced: np.ndarray | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be a nonempty T x D matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if self.hop_ms <= 0:
            raise ValueError("hop_ms must be positive")
        self.frames = frames
        if self.voiced is None:
            self.voiced = np.ones(frames.shape[0], dtype=bool)
        else:
            self.voiced = np.asarray(self.voiced, dtype=bool)
            if self.voiced.shape != (frames.shape[0],):
                raise ValueError("voiced mask length must equal the number of frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.hop_ms / 1000.0

    def voiced_frames(self) -> np.ndarray:
        return self.frames[self.voiced].astype(np.float64)

    def slice(self, start: int, stop: int) -> "FeatureSequence":
        return FeatureSequence(self.frames[start:stop], self.hop_ms, self.voiced[start:stop])


@dataclass
class Utterance:
    id: str
    language: int
    features: FeatureSequence
    snr_trace: np.ndarray | None = None

    def __post_init__(self):
        if self.snr_trace is not None:
            self.snr_trace = np.asarray(self.snr_trace, dtype=np.float32)
            if self.snr_trace.shape != (self.features.num_frames,):
                raise ValueError("snr_trace length must equal the number of frames")

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        same_snr = (self.snr_trace is None and other.snr_trace is None) or (
            self.snr_trace is not None
            and other.snr_trace is not None
            and np.array_equal(self.snr_trace, other.snr_trace)
        )
        return (
            self.id == other.id
            and self.language == other.language
            and self.features.hop_ms == other.features.hop_ms
            and np.array_equal(self.features.frames, other.features.frames)
            and np.array_equal(self.features.voiced, other.features.voiced)
            and same_snr
        )


@dataclass
class CorpusConfig:
    num_languages: int = 3
    utts_per_language: int = 40
    duration_s: tuple[float, float] = (10.0, 10.0)
    feature_dim: int = 20
    source_components: int = 16
    noise: str = "clean"
    snr_db: float = 10.0
    seed: int = 0
    split: str = "train"
    hop_ms: int = 10
    # distance between language sources relative to the base mixture spread
    language_spread: float = 0.35
    # per-utterance low-rank session shift of the source means
    session_spread: float = 0.35
    session_rank: int = 4
    noise_color: float = 1.0
    # range of the per-dimension variances of the source components
    component_var: tuple[float, float] = (0.3, 0.7)
    # "gaussian": coloured white noise; "talker": a centred competing speaker
    # drawn from a randomly chosen language source
    noise_type: str = "gaussian"
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.num_languages < 2:
            raise ValueError("num_languages must be at least 2")
        lo, hi = self.duration_s
        if not (lo > 0 and hi > 0 and lo <= hi):
            raise ValueError(f"invalid duration range {self.duration_s}")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"noise must be one of {NOISE_MODES}, got {self.noise!r}")
        if self.noise_type not in NOISE_TYPES:
            raise ValueError(f"noise_type must be one of {NOISE_TYPES}, got {self.noise_type!r}")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.utts_per_language < 1 or self.feature_dim < 1 or self.source_components < 1:
            raise ValueError("corpus sizes must be positive")


@dataclass
class LanguageSource:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    # C x D x rank session loading
    session: np.ndarray

    def marginal_variance(self) -> np.ndarray:
        mean = self.weights @ self.means
        second = self.weights @ (self.variances + self.means ** 2)
        return second - mean ** 2


def language_sources(config: CorpusConfig) -> list[LanguageSource]:
    """Sample the per-language source mixtures from the corpus seed."""
    config.validate()
    rng = np.random.default_rng([config.seed, 0x5EED])
    K, D = config.source_components, config.feature_dim
    base_means = rng.normal(0.0, 1.0, size=(K, D))
    base_vars = rng.uniform(*config.component_var, size=(K, D))
    base_logw = rng.normal(0.0, 0.3, size=K)
    session = rng.normal(0.0, config.session_spread / np.sqrt(config.session_rank),
                         size=(K, D, config.session_rank))
    sources = []
    for _ in range(config.num_languages):
        means = base_means + rng.normal(0.0, config.language_spread, size=(K, D))
        logw = base_logw + rng.normal(0.0, config.language_spread, size=K)
        w = np.exp(logw - logw.max())
        sources.append(LanguageSource(w / w.sum(), means, base_vars.copy(), session))
    return sources


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    # stable per-id stream, so parallel and serial generation agree
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def _utterance_ids(config: CorpusConfig):
    width = len(str(config.utts_per_language - 1))
    for lang in range(config.num_languages):
        for n in range(config.utts_per_language):
            yield lang, f"{config.split}-l{lang}-{n:0{width}d}"


def synthesize_utterance(config: CorpusConfig, sources, lang: int, utt_id: str) -> Utterance:
    rng = utterance_rng(config.seed, utt_id)
    src = sources[lang]
    lo, hi = config.duration_s
    dur = lo if lo == hi else rng.uniform(lo, hi)
    T = max(1, int(round(dur * 1000.0 / config.hop_ms)))
    z = rng.normal(size=config.session_rank)
    means = src.means + src.session @ z
    comp = rng.choice(len(src.weights), size=T, p=src.weights)
    frames = means[comp] + np.sqrt(src.variances[comp]) * rng.normal(size=(T, config.feature_dim))

    snr = np.full(T, CLEAN_SNR_DB)
    if config.noise != "clean":
        speech_var = src.marginal_variance()
        color = rng.gamma(1.0 / max(config.noise_color, 1e-6), max(config.noise_color, 1e-6),
                          size=config.feature_dim) if config.noise_color > 0 else np.ones(config.feature_dim)
        # per-frame total noise power set by the SNR; colour only redistributes it across dims
        noise_var = color / color.sum() * speech_var.sum() / 10.0 ** (config.snr_db / 10.0)
        n_noisy = T if config.noise == "full" else T // 2
        if config.noise_type == "talker":
            frames[:n_noisy] += _talker_noise(config, sources, rng, n_noisy, noise_var)
        else:
            frames[:n_noisy] += rng.normal(size=(n_noisy, config.feature_dim)) * np.sqrt(noise_var)
        snr[:n_noisy] = config.snr_db
    feats = FeatureSequence(frames, config.hop_ms)
    return Utterance(utt_id, lang, feats, snr)


def _talker_noise(config: CorpusConfig, sources, rng, n: int, noise_var: np.ndarray) -> np.ndarray:
    """Zero-mean competing-speaker frames scaled to ``noise_var`` per dimension."""
    src = sources[int(rng.integers(len(sources)))]
    means = src.means + src.session @ rng.normal(size=config.session_rank)
    comp = rng.choice(len(src.weights), size=n, p=src.weights)
    x = means[comp] + np.sqrt(src.variances[comp]) * rng.normal(size=(n, config.feature_dim))
    mu = src.weights @ means
    var = src.weights @ (src.variances + means ** 2) - mu ** 2
    return (x - mu) * np.sqrt(noise_var / var)


def generate_corpus(config: CorpusConfig) -> list[Utterance]:
    """Generate a labelled corpus; a pure function of ``config``."""
    config.validate()
    sources = language_sources(config)
    return [synthesize_utterance(config, sources, lang, uid) for lang, uid in _utterance_ids(config)]


def frame_energy(f: FeatureSequence) -> np.ndarray:
    x = f.frames.astype(np.float64)
    return np.mean(x * x, axis=1)


def apply_sad(f: FeatureSequence, energy_quantile: float = 0.1) -> FeatureSequence:
    """Mark frames whose energy exceeds the utterance energy quantile as voiced.

    At ``energy_quantile == 0`` every frame is kept, including ties at the minimum.
    """
    if not 0.0 <= energy_quantile < 1.0:
        raise ValueError("energy_quantile must lie in [0, 1)")
    if f.num_frames < 1:
        raise ValueError("empty feature sequence")
    energy = frame_energy(f)
    if energy_quantile == 0.0:
        voiced = np.ones(f.num_frames, dtype=bool)
    else:
        voiced = energy > np.quantile(energy, energy_quantile)
    return FeatureSequence(f.frames, f.hop_ms, voiced)


def sliding_window_bounds(num_frames: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Centered window [start, stop) per frame, shifted (not shrunk) at the edges."""
    idx = np.arange(num_frames)
    if window >= num_frames:
        return np.zeros(num_frames, dtype=int), np.full(num_frames, num_frames)
    start = np.clip(idx - window // 2, 0, num_frames - window)
    return start, start + window


def cmvn(f: FeatureSequence, window_s: float = 3.0, var_floor: float = 1e-8) -> FeatureSequence:
    """Per-utterance CMVN followed by sliding-window CMVN, statistics over voiced frames."""
    mask = f.voiced
    if not mask.any():
        raise ValueError("cmvn needs at least one voiced frame")
    x = f.frames.astype(np.float64)
    v = x[mask]
    x = (x - v.mean(axis=0)) / np.sqrt(np.maximum(v.var(axis=0), var_floor))

    window = max(1, int(round(window_s * 1000.0 / f.hop_ms)))
    start, stop = sliding_window_bounds(f.num_frames, window)
    m = mask[:, None].astype(np.float64)
    zero = np.zeros((1, f.dim))
    cs1 = np.vstack([zero, np.cumsum(x * m, axis=0)])
    cs2 = np.vstack([zero, np.cumsum(x * x * m, axis=0)])
    cnt = np.concatenate([[0.0], np.cumsum(mask)])
    n = (cnt[stop] - cnt[start])[:, None]
    has = n[:, 0] > 0
    mean = np.zeros_like(x)
    var = np.ones_like(x)
    mean[has] = (cs1[stop] - cs1[start])[has] / n[has]
    var[has] = (cs2[stop] - cs2[start])[has] / n[has] - mean[has] ** 2
    x = (x - mean) / np.sqrt(np.maximum(var, var_floor))
    return FeatureSequence(x, f.hop_ms, mask)


def preprocess(f: FeatureSequence, energy_quantile: float = 0.1, window_s: float = 3.0) -> FeatureSequence:
    return cmvn(apply_sad(f, energy_quantile), window_s)


def write_features(u: Utterance, path) -> None:
    f = u.features
    T, D = f.frames.shape
    if T >= 2 ** 32 or D >= 2 ** 32:
        raise FormatError("feature dimensions overflow the u32 header fields")
    label = -1 if u.language is None else int(u.language)
    if not -1 <= label < 2 ** 15:
        raise FormatError("label does not fit the i16 header field")
    parts = [
        _FEATURE_MAGIC,
        struct.pack("<HIIHh", _FEATURE_VERSION, T, D, f.hop_ms, label),
        f32(f.frames),
        f.voiced.astype(np.uint8).tobytes(),
    ]
    if u.snr_trace is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [struct.pack("<B", 1), f32(u.snr_trace)]
    write_bytes(path, b"".join(parts))


def read_features(path) -> Utterance:
    r = Reader(read_bytes(path), what=str(path))
    r.magic(_FEATURE_MAGIC)
    version, T, D, hop_ms, label = r.unpack("HIIHh")
    if version != _FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    if T < 1 or D < 1 or T * D * 4 > len(r.data):
        raise FormatError(f"{path}: implausible dimensions T={T} D={D}")
    frames = r.array((T, D))
    voiced = r.array((T,), "u1")
    if np.any(voiced > 1):
        raise FormatError(f"{path}: voicing bytes must be 0 or 1")
    snr = r.array((T,)) if r.unpack("B") else None
    r.done()
    uid = os.path.splitext(os.path.basename(path))[0]
    return Utterance(uid, label, FeatureSequence(frames, hop_ms, voiced.astype(bool)), snr)


def write_manifest(entries, path) -> None:
    """Write ``(relative_path, label)`` pairs, one per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, label in entries:
            fh.write(f"{rel} {int(label)}\n")


def read_manifest(path) -> list[tuple[str, int]]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            rel, _, label = line.rpartition(" ")
            if not rel:
                raise FormatError(f"{path}:{lineno}: expected '<path> <label>'")
            entries.append((rel, int(label)))
    return entries
