"""Diagonal-covariance GMM universal background model."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from relid._binio import FormatError, Reader, digest, f32, read_bytes, write_bytes

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
WEIGHT_FLOOR = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)
_SHARD = 16384
_MAGIC = b"RGMM"


@dataclass
class DiagonalGMM:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        C = self.weights.shape[0]
        if C < 1 or self.means.shape[0] != C or self.variances.shape != self.means.shape:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("GMM weights must be positive and sum to 1")
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-6)):
            raise ValueError("GMM variances below floor")

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def supervector(self) -> np.ndarray:
        """The concatenated mean supervector (C*D,)."""
        return self.means.ravel()

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected frames of dimension {self.dim}, got shape {x.shape}")
        return x

    def component_log_densities(self, x) -> np.ndarray:
        """log w_c + log N(x | mu_c, Sigma_c) for every frame and component (N x C)."""
        x = self._check(x)
        prec = 1.0 / self.variances
        const = np.log(self.weights) - 0.5 * (
            self.dim * _LOG_2PI + np.log(self.variances).sum(axis=1) + (self.means ** 2 * prec).sum(axis=1)
        )
        return const - 0.5 * (x * x) @ prec.T + x @ (self.means * prec).T

    def posteriors(self, x) -> np.ndarray:
        """Component responsibilities p(c|x); a C-vector for one frame, N x C for many."""
        single = np.asarray(x).ndim == 1
        lp = self.component_log_densities(x)
        post = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        return post[0] if single else post

    def frame_log_likelihoods(self, x) -> np.ndarray:
        return logsumexp(self.component_log_densities(x), axis=1)

    def log_likelihood(self, frames) -> float:
        frames = self._check(frames)
        if frames.shape[0] == 0:
            raise ValueError("log_likelihood of an empty frame set")
        total = 0.0
        for s in range(0, frames.shape[0], _SHARD):
            total += float(self.frame_log_likelihoods(frames[s:s + _SHARD]).sum())
        return total

    def to_bytes(self) -> bytes:
        C, D = self.means.shape
        return b"".join([_MAGIC, struct.pack("<HII", 1, C, D),
                         f32(self.weights), f32(self.means), f32(self.variances)])

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "gmm") -> "DiagonalGMM":
        r = Reader(data, what)
        r.magic(_MAGIC)
        version, C, D = r.unpack("HII")
        if version != 1:
            raise FormatError(f"{what}: unsupported version {version}")
        w = r.array((C,)).astype(np.float64)
        means = r.array((C, D)).astype(np.float64)
        var = np.maximum(r.array((C, D)).astype(np.float64), VAR_FLOOR)
        r.done()
        return cls(w / w.sum(), means, var)

    def fingerprint(self) -> bytes:
        return digest(self.to_bytes())


def save_gmm(g: DiagonalGMM, path) -> None:
    write_bytes(path, g.to_bytes())


def load_gmm(path) -> DiagonalGMM:
    return DiagonalGMM.from_bytes(read_bytes(path), str(path))


def _accumulate(g: DiagonalGMM, x: np.ndarray):
    """E-step sufficient statistics, summed shard by shard in a fixed order."""
    C, D = g.num_components, g.dim
    n = np.zeros(C)
    s1 = np.zeros((C, D))
    s2 = np.zeros((C, D))
    ll = 0.0
    for s in range(0, x.shape[0], _SHARD):
        xs = x[s:s + _SHARD]
        lp = g.component_log_densities(xs)
        norm = logsumexp(lp, axis=1, keepdims=True)
        post = np.exp(lp - norm)
        ll += float(norm.sum())
        n += post.sum(axis=0)
        s1 += post.T @ xs
        s2 += post.T @ (xs * xs)
    return ll, n, s1, s2


def _m_step(n, s1, s2) -> DiagonalGMM:
    safe = np.maximum(n, 1e-300)[:, None]
    means = s1 / safe
    var = np.maximum(s2 / safe - means ** 2, VAR_FLOOR)
    w = np.maximum(n / n.sum(), WEIGHT_FLOOR)
    return DiagonalGMM(w / w.sum(), means, var)


def _split(g: DiagonalGMM, target: int) -> DiagonalGMM:
    """Split the heaviest components (at most doubling) with +-0.1 std perturbations."""
    C = g.num_components
    k = min(C, target - C)
    order = np.argsort(-g.weights, kind="stable")[:k]
    offset = 0.1 * np.sqrt(g.variances[order])
    means = np.vstack([g.means, g.means[order] + offset])
    means[order] -= offset
    w = g.weights.copy()
    w[order] /= 2.0
    w = np.concatenate([w, w[order]])
    var = np.vstack([g.variances, g.variances[order]])
    return DiagonalGMM(w / w.sum(), means, var)


@dataclass
class TrainingLog:
    log_likelihoods: list = field(default_factory=list)


def train_ubm(frames, num_components: int = 64, iters: int = 10, seed: int = 0,
              split_iters: int = 3, stride: int = 1, log_out: TrainingLog | None = None) -> DiagonalGMM:
    """Train a diagonal GMM by EM from a binary-splitting initialisation.

    ``log_out.log_likelihoods`` receives the total log-likelihood measured at
    the start of every final-stage EM iteration plus the final model's value.
    ``seed`` drives the optional frame subsampling offset only; the splitting
    initialisation itself is deterministic.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("frames must be a nonempty N x D matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("frames contain non-finite values")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if stride > 1:
        offset = int(np.random.default_rng(seed).integers(stride))
        x = x[offset::stride]
    if x.shape[0] < num_components:
        raise ValueError(f"{x.shape[0]} frames cannot support {num_components} components")

    mean = x.mean(axis=0)
    g = DiagonalGMM(np.ones(1), mean[None, :], np.maximum(x.var(axis=0), VAR_FLOOR)[None, :])
    while g.num_components < num_components:
        g = _split(g, num_components)
        for _ in range(split_iters):
            _, n, s1, s2 = _accumulate(g, x)
            g = _m_step(n, s1, s2)

    history = log_out.log_likelihoods if log_out is not None else []
    for it in range(iters):
        ll, n, s1, s2 = _accumulate(g, x)
        history.append(ll)
        log.debug("ubm iter %d: avg ll %.5f", it, ll / x.shape[0])
        g = _m_step(n, s1, s2)
    history.append(g.log_likelihood(x))
    return g


def posteriors(g: DiagonalGMM, x) -> np.ndarray:
    return g.posteriors(x)


def log_likelihood(g: DiagonalGMM, frames) -> float:
    return g.log_likelihood(frames)
