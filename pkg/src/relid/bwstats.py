"""Baum-Welch statistics with optional relevance weighting, posterior entropy,
the entropy-to-relevance mapping and inverse-entropy posterior fusion."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from relid._binio import FormatError, Reader, f32, read_bytes, write_bytes
from relid.corpus import FeatureSequence
from relid.ubm import DiagonalGMM

_MAGIC = b"RBWS"


@dataclass
class BWStats:
    """Zeroth-order counts ``n`` (C,), centered first-order stats ``f`` (C, D)."""

    n: np.ndarray
    f: np.ndarray
    frame_count: int

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.shape[0] != self.n.shape[0]:
            raise ValueError("n and f disagree on the number of components")

    def scaled(self, alpha: float) -> "BWStats":
        return BWStats(alpha * self.n, alpha * self.f, self.frame_count)

    def __add__(self, other: "BWStats") -> "BWStats":
        return BWStats(self.n + other.n, self.f + other.f, self.frame_count + other.frame_count)

    def to_bytes(self) -> bytes:
        C, D = self.f.shape
        return b"".join([_MAGIC, struct.pack("<III", C, D, self.frame_count), f32(self.n), f32(self.f)])

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "stats") -> "BWStats":
        r = Reader(data, what)
        r.magic(_MAGIC)
        C, D, count = r.unpack("III")
        n = r.array((C,)).astype(np.float64)
        f = r.array((C, D)).astype(np.float64)
        r.done()
        return cls(n, f, count)


def save_stats(s: BWStats, path) -> None:
    write_bytes(path, s.to_bytes())


def load_stats(path) -> BWStats:
    return BWStats.from_bytes(read_bytes(path), str(path))


@dataclass(frozen=True)
class GammaConfig:
    h_min: float
    h_max: float
    block_frames: int = 100

    def __post_init__(self):
        if not (0.0 <= self.h_min < self.h_max):
            raise ValueError(f"need 0 <= h_min < h_max, got {self.h_min}, {self.h_max}")
        if self.block_frames < 1:
            raise ValueError("block_frames must be positive")

    @classmethod
    def for_languages(cls, num_languages: int, lo: float = 0.2, hi: float = 0.9,
                      block_frames: int = 100) -> "GammaConfig":
        hmax = np.log(num_languages)
        return cls(lo * hmax, hi * hmax, block_frames)

    def check_languages(self, num_languages: int) -> None:
        if self.h_max > np.log(num_languages) + 1e-12:
            raise ValueError(f"h_max {self.h_max} exceeds ln L = {np.log(num_languages)}")


def accumulate_stats(g: DiagonalGMM, f: FeatureSequence, gamma=None) -> BWStats:
    """Zeroth and first-order statistics of the voiced frames, each frame
    weighted by its relevance ``gamma`` (one weight per voiced frame)."""
    if f.dim != g.dim:
        raise ValueError(f"feature dim {f.dim} does not match UBM dim {g.dim}")
    x = f.voiced_frames()
    if gamma is None:
        gamma = np.ones(x.shape[0])
    else:
        gamma = np.asarray(gamma, dtype=np.float64).ravel()
        if gamma.shape[0] != x.shape[0]:
            raise ValueError(f"gamma has {gamma.shape[0]} entries for {x.shape[0]} voiced frames")
        if np.any(gamma < 0) or np.any(gamma > 1) or not np.all(np.isfinite(gamma)):
            raise ValueError("gamma must lie in [0, 1]")
    if x.shape[0] == 0:
        return BWStats(np.zeros(g.num_components), np.zeros((g.num_components, g.dim)), 0)
    post = g.posteriors(x) * gamma[:, None]
    n = post.sum(axis=0)
    f1 = post.T @ x - n[:, None] * g.means
    return BWStats(n, f1, x.shape[0])


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("entropy expects a normalized probability vector")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def gamma_from_entropy(h: float, cfg: GammaConfig) -> float:
    if h < 0:
        raise ValueError("entropy must be nonnegative")
    if h < cfg.h_min:
        return 1.0
    if h > cfg.h_max:
        return 0.0
    return (cfg.h_max - h) / (cfg.h_max - cfg.h_min)


def block_bounds(num_frames: int, block_frames: int) -> list[tuple[int, int]]:
    """Non-overlapping blocks; a tail shorter than half a block is merged into
    the block before it (it then shares that block's relevance)."""
    bounds = [(s, min(s + block_frames, num_frames)) for s in range(0, num_frames, block_frames)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < block_frames / 2:
        tail = bounds.pop()
        bounds[-1] = (bounds[-1][0], tail[1])
    return bounds


def relevance_weights(posterior_fn, f: FeatureSequence, cfg: GammaConfig) -> np.ndarray:
    """Per-frame relevance (length T), constant within each block.

    ``posterior_fn`` maps a block (a FeatureSequence slice) to a language
    posterior. Unvoiced frames carry the block value too; callers select the
    voiced entries before accumulating statistics.
    """
    gamma = np.empty(f.num_frames)
    for start, stop in block_bounds(f.num_frames, cfg.block_frames):
        p = np.asarray(posterior_fn(f.slice(start, stop)), dtype=np.float64)
        gamma[start:stop] = gamma_from_entropy(entropy(p), cfg)
    return gamma


def inverse_entropy_fuse(posteriors) -> tuple[np.ndarray, int, np.ndarray]:
    """Combine posteriors with weights proportional to inverse entropy.

    Members with zero entropy take all the weight, shared equally.
    Returns ``(fused, label, weights)``.
    """
    P = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if P.shape[0] == 0 or P.size == 0:
        raise ValueError("need at least one posterior")
    H = np.array([entropy(p) for p in P])
    zero = H == 0.0
    if zero.any():
        w = zero / zero.sum()
    else:
        # scaled by the smallest entropy: same weights, one rounding fewer
        inv = H.min() / H
        w = inv / inv.sum()
    fused = w @ P
    return fused, int(np.argmax(fused)), w
