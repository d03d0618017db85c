"""Total variability model: EM training of the low-rank matrix and MAP i-vector
extraction, per utterance and per sliding segment."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from relid._binio import FormatError, Reader, f32, read_bytes, write_bytes
from relid.bwstats import BWStats
from relid.corpus import FeatureSequence
from relid.ubm import DiagonalGMM

log = logging.getLogger(__name__)

_MAGIC = b"RTVM"


@dataclass
class TVModel:
    """``t`` is the (C*D) x R total variability matrix bound to ``ubm``."""

    t: np.ndarray
    ubm: DiagonalGMM
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        C, D = self.ubm.means.shape
        if self.t.ndim != 2 or self.t.shape[0] != C * D:
            raise ValueError(f"T must have {C * D} rows, got shape {self.t.shape}")
        if not 1 <= self.rank <= C * D:
            raise ValueError("rank must satisfy 1 <= R <= C*D")
        if not np.all(np.isfinite(self.t)):
            raise ValueError("T contains non-finite entries")

    @property
    def rank(self) -> int:
        return self.t.shape[1]

    @property
    def blocks(self) -> np.ndarray:
        """T viewed per component, C x D x R."""
        C, D = self.ubm.means.shape
        return self.t.reshape(C, D, self.rank)

    def _precomputed(self):
        if "tsit" not in self._cache:
            Tb = self.blocks
            prec = 1.0 / self.ubm.variances
            tsi = Tb * prec[:, :, None]                       # Sigma^-1 T, per component
            self._cache["tsi"] = tsi.reshape(-1, self.rank)
            self._cache["tsit"] = np.einsum("cdr,cds->crs", tsi, Tb)
        return self._cache["tsi"], self._cache["tsit"]

    def precision(self, n: np.ndarray) -> np.ndarray:
        """I + T' Sigma^-1 N T for one (C,) or many (S, C) count vectors."""
        _, tsit = self._precomputed()
        return np.eye(self.rank) + np.tensordot(n, tsit, axes=(-1, 0))

    def linear_term(self, f: np.ndarray) -> np.ndarray:
        """T' Sigma^-1 F for one (C, D) or many (S, C, D) first-order stats."""
        tsi, _ = self._precomputed()
        f = np.asarray(f)
        return f.reshape(*f.shape[:-2], -1) @ tsi

    def to_bytes(self) -> bytes:
        C, D = self.ubm.means.shape
        return b"".join([_MAGIC, struct.pack("<III", C, D, self.rank), self.ubm.fingerprint(), f32(self.t)])

    @classmethod
    def from_bytes(cls, data: bytes, ubm: DiagonalGMM, what: str = "tvm") -> "TVModel":
        r = Reader(data, what)
        r.magic(_MAGIC)
        C, D, R = r.unpack("III")
        fp = r.take(8)
        if (C, D) != ubm.means.shape:
            raise FormatError(f"{what}: model is for C={C}, D={D}, UBM has {ubm.means.shape}")
        if fp != ubm.fingerprint():
            raise FormatError(f"{what}: UBM fingerprint mismatch")
        t = r.array((C * D, R)).astype(np.float64)
        r.done()
        return cls(t, ubm)


def save_tvm(m: TVModel, path) -> None:
    write_bytes(path, m.to_bytes())


def load_tvm(path, ubm: DiagonalGMM) -> TVModel:
    return TVModel.from_bytes(read_bytes(path), ubm, str(path))


def _check_stats(m: TVModel, s: BWStats) -> None:
    if s.f.shape != m.ubm.means.shape:
        raise ValueError(f"stats of shape {s.f.shape} do not match UBM {m.ubm.means.shape}")
    if not (np.all(np.isfinite(s.n)) and np.all(np.isfinite(s.f))):
        raise ValueError("stats contain non-finite values")


def extract_ivector(m: TVModel, s: BWStats) -> np.ndarray:
    """Posterior mean of the latent factor given the statistics."""
    _check_stats(m, s)
    L = m.precision(s.n)
    b = m.linear_term(s.f)
    return cho_solve(cho_factor(L, lower=True), b)


def extract_ivectors(m: TVModel, n: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Batched extraction: ``n`` is (S, C), ``f`` is (S, C, D); returns (S, R)."""
    if f.shape[1:] != m.ubm.means.shape or n.shape != f.shape[:2]:
        raise ValueError("stats do not match the model's UBM")
    if len(n) == 0:
        return np.zeros((0, m.rank))
    L = m.precision(n)
    b = m.linear_term(f)
    return np.linalg.solve(L, b[..., None])[..., 0]


def _stack(stats: list[BWStats]):
    return np.stack([s.n for s in stats]), np.stack([s.f for s in stats])


def _posterior_moments(m: TVModel, N: np.ndarray, F: np.ndarray):
    L = m.precision(N)
    b = m.linear_term(F)
    chol = np.linalg.cholesky(L)
    cov = np.linalg.inv(L)
    ey = np.einsum("srq,sq->sr", cov, b)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    objective = float(0.5 * np.einsum("sr,sr->", b, ey) - 0.5 * logdet.sum())
    return ey, cov, objective


def tvm_objective(m: TVModel, stats: list[BWStats]) -> float:
    """Log-likelihood of the statistics under the model, up to T-independent terms."""
    N, F = _stack(stats)
    return _posterior_moments(m, N, F)[2]


def init_tvm(ubm: DiagonalGMM, rank: int, seed: int) -> TVModel:
    rng = np.random.default_rng(seed)
    C, D = ubm.means.shape
    scale = np.sqrt(ubm.variances).reshape(-1, 1)
    return TVModel(0.1 * scale * rng.normal(size=(C * D, rank)), ubm)


def train_tvm(stats: list[BWStats], ubm: DiagonalGMM, rank: int = 50, iters: int = 10, seed: int = 0,
              history: list | None = None) -> TVModel:
    """Maximum-likelihood EM for T (no minimum-divergence step).

    ``history`` receives the objective before each iteration and after the last.
    """
    if not stats:
        raise ValueError("train_tvm needs at least one statistics set")
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    m = init_tvm(ubm, rank, seed)
    for s in stats:
        _check_stats(m, s)
    N, F = _stack(stats)
    C, D = ubm.means.shape
    for it in range(iters):
        ey, cov, obj = _posterior_moments(m, N, F)
        if history is not None:
            history.append(obj)
        log.debug("tvm iter %d: objective %.6f", it, obj)
        eyy = cov + ey[:, :, None] * ey[:, None, :]
        A = np.tensordot(N, eyy, axes=(0, 0))                  # C x R x R
        Cacc = np.einsum("scd,sr->cdr", F, ey)                 # C x D x R
        Tb = np.linalg.solve(A, Cacc.transpose(0, 2, 1)).transpose(0, 2, 1)
        m = TVModel(Tb.reshape(C * D, rank), ubm)
    if history is not None and iters > 0:
        history.append(tvm_objective(m, stats))
    return m


def segment_bounds(num_frames: int, win_frames: int = 100, hop_frames: int = 20) -> list[tuple[int, int]]:
    """Full overlapping windows; an utterance shorter than one window yields
    a single clipped window."""
    if num_frames < 1:
        raise ValueError("empty feature sequence")
    if num_frames <= win_frames:
        return [(0, num_frames)]
    count = (num_frames - win_frames) // hop_frames + 1
    return [(k * hop_frames, k * hop_frames + win_frames) for k in range(count)]


def window_stats(g: DiagonalGMM, f: FeatureSequence, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted voiced-frame statistics for each [start, stop) window."""
    x = f.frames.astype(np.float64)
    post = g.posteriors(x) * f.voiced[:, None]
    C, D = g.means.shape
    cs_n = np.concatenate([np.zeros((1, C)), np.cumsum(post, axis=0)])
    cs_f = np.concatenate([np.zeros((1, C, D)), np.cumsum(post[:, :, None] * x[:, None, :], axis=0)])
    starts = np.array([b[0] for b in bounds])
    stops = np.array([b[1] for b in bounds])
    n = cs_n[stops] - cs_n[starts]
    f1 = cs_f[stops] - cs_f[starts] - n[:, :, None] * g.means
    # windows without voiced frames must give exactly zero stats
    empty = np.array([not f.voiced[a:b].any() for a, b in bounds])
    n[empty] = 0.0
    f1[empty] = 0.0
    return n, f1


def segment_ivectors(m: TVModel, g: DiagonalGMM, f: FeatureSequence,
                     win_frames: int = 100, hop_frames: int = 20) -> np.ndarray:
    """Time-ordered i-vectors of overlapping windows, shape (num_windows, R)."""
    bounds = segment_bounds(f.num_frames, win_frames, hop_frames)
    n, f1 = window_stats(g, f, bounds)
    return extract_ivectors(m, n, f1)
