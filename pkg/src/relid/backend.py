"""Embedding post-processing (WCCN, length normalisation, LDA) and a
one-vs-rest linear SVM."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from relid._binio import FormatError, Reader, f32, read_bytes, write_bytes


@dataclass
class LinearTransform:
    """y = matrix @ (x - offset)."""

    matrix: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if self.offset is None:
            self.offset = np.zeros(self.in_dim)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.out_dim > self.in_dim:
            raise ValueError("a LinearTransform may not increase dimension")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("transform contains non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.offset) @ self.matrix.T

    def to_bytes(self) -> bytes:
        return b"".join([b"RLTX", struct.pack("<II", self.out_dim, self.in_dim),
                         f32(self.matrix), f32(self.offset)])

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "transform") -> "LinearTransform":
        r = Reader(data, what)
        r.magic(b"RLTX")
        out_dim, in_dim = r.unpack("II")
        m = r.array((out_dim, in_dim)).astype(np.float64)
        off = r.array((in_dim,)).astype(np.float64)
        r.done()
        return cls(m, off)


@dataclass
class LinearClassifier:
    """Per-class weight rows and biases; ``scale`` maps margins to logits."""

    weights: np.ndarray
    biases: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("one bias per class required")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def to_bytes(self) -> bytes:
        L, dim = self.weights.shape
        return b"".join([b"RSVM", struct.pack("<II", L, dim), f32(self.weights), f32(self.biases),
                         f32([self.scale])])

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "svm") -> "LinearClassifier":
        r = Reader(data, what)
        r.magic(b"RSVM")
        L, dim = r.unpack("II")
        w = r.array((L, dim)).astype(np.float64)
        b = r.array((L,)).astype(np.float64)
        scale = float(r.array((1,))[0])
        r.done()
        return cls(w, b, scale)


def save_artifact(obj, path) -> None:
    write_bytes(path, obj.to_bytes())


def load_transform(path) -> LinearTransform:
    return LinearTransform.from_bytes(read_bytes(path), str(path))


def load_classifier(path) -> LinearClassifier:
    return LinearClassifier.from_bytes(read_bytes(path), str(path))


def length_normalize(v) -> np.ndarray:
    """Scale rows to unit Euclidean norm; zero rows stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def _classes(vectors, labels, min_per_class: int):
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y = np.asarray(labels)
    if X.shape[0] != y.shape[0]:
        raise ValueError("one label per vector required")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("at least two classes are required")
    counts = np.array([(y == c).sum() for c in classes])
    if np.any(counts < min_per_class):
        raise ValueError(f"every class needs at least {min_per_class} vectors")
    return X, y, classes


def within_class_covariance(X, y, classes) -> np.ndarray:
    W = np.zeros((X.shape[1], X.shape[1]))
    for c in classes:
        Xc = X[y == c]
        d = Xc - Xc.mean(axis=0)
        W += d.T @ d / Xc.shape[0]
    return W / len(classes)


def fit_wccn(vectors, labels, reg: float = 1e-6) -> LinearTransform:
    """Transform whose output has identity average within-class covariance."""
    X, y, classes = _classes(vectors, labels, 2)
    W = within_class_covariance(X, y, classes)
    dim = W.shape[0]
    if not np.trace(W) > 0:
        raise ValueError("within-class covariance is zero: all vectors of each class coincide")
    W = W + reg * np.trace(W) / dim * np.eye(dim)
    # B B' = W^-1 with B lower triangular; the transform applies B'
    B = np.linalg.cholesky(np.linalg.inv(W))
    return LinearTransform(B.T)


def fit_lda(vectors, labels, out_dim: int, reg: float = 1e-6) -> LinearTransform:
    X, y, classes = _classes(vectors, labels, 1)
    L = classes.size
    if out_dim < 1 or out_dim > L - 1:
        raise ValueError(f"LDA output dimension must be in [1, {L - 1}]")
    mu = X.mean(axis=0)
    Sb = np.zeros((X.shape[1], X.shape[1]))
    Sw = np.zeros_like(Sb)
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        Sb += Xc.shape[0] * np.outer(mc - mu, mc - mu)
        d = Xc - mc
        Sw += d.T @ d
    Sb /= X.shape[0]
    Sw /= X.shape[0]
    dim = Sw.shape[0]
    Sw += reg * max(np.trace(Sw), 1e-12) / dim * np.eye(dim)
    evals, evecs = eigh(Sb, Sw)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    # generalized eigenvalues are scale-free between/within ratios
    if evals[order[-1]] <= 1e-10:
        raise ValueError("between-class scatter is rank deficient for the requested dimension")
    V = evecs[:, order].T
    idx = np.argmax(np.abs(V), axis=1)
    V *= np.sign(V[np.arange(V.shape[0]), idx])[:, None]
    return LinearTransform(V, mu)


def train_linear_svm(vectors, labels, c_reg: float = 1.0, epochs: int = 50, seed: int = 0,
                     num_classes: int | None = None) -> LinearClassifier:
    """One-vs-rest hinge loss with L2 penalty, Pegasos-style subgradient steps.

    The objective per class is ``lam/2 |w|^2 + mean(hinge)`` with
    ``lam = 1 / (c_reg * n)``. Bias is unregularised.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=int)
    L = int(num_classes if num_classes is not None else y.max() + 1)
    if L < 2:
        raise ValueError("at least two classes are required")
    for c in range(L):
        if not np.any(y == c):
            raise ValueError(f"class {c} has no training vectors")
    n, dim = X.shape
    lam = 1.0 / (c_reg * n)
    Y = np.where(y[:, None] == np.arange(L)[None, :], 1.0, -1.0)   # n x L
    W = np.zeros((L, dim))
    b = np.zeros(L)
    rng = np.random.default_rng(seed)
    W_avg = np.zeros_like(W)
    b_avg = np.zeros_like(b)
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            step += 1
            eta = 1.0 / (lam * (step + 10))
            margin = Y[i] * (W @ X[i] + b)
            active = (margin < 1.0) * Y[i]
            W *= 1.0 - eta * lam
            W += eta * active[:, None] * X[i][None, :]
            b += eta * active * 0.1
            W_avg += W
            b_avg += b
    return LinearClassifier(W_avg / step, b_avg / step)


def classify(clf: LinearClassifier, v) -> np.ndarray:
    """Raw one-vs-rest margins (N x L, or L for a single vector)."""
    v = np.asarray(v, dtype=np.float64)
    return v @ clf.weights.T + clf.biases


def fit_margin_scale(clf: LinearClassifier, vectors, labels) -> LinearClassifier:
    """Fit a single positive temperature so softmax(scale * margins) maximises
    the training likelihood; the decision rule is unchanged."""
    M = classify(clf, vectors)
    y = np.asarray(labels, dtype=int)

    def nll(log_s):
        return -log_softmax(np.exp(log_s) * M, axis=1)[np.arange(len(y)), y].mean()

    res = minimize_scalar(nll, bounds=(-5.0, 5.0), method="bounded", options={"xatol": 1e-8})
    return LinearClassifier(clf.weights, clf.biases, float(np.exp(res.x)))


def posteriors(clf: LinearClassifier, v) -> np.ndarray:
    z = clf.scale * classify(clf, v)
    return np.exp(log_softmax(z, axis=-1))


@dataclass
class Backend:
    """WCCN -> length norm -> LDA -> SVM chain fit on labelled embeddings."""

    wccn: LinearTransform
    lda: LinearTransform
    svm: LinearClassifier

    def project(self, X) -> np.ndarray:
        return self.lda(length_normalize(self.wccn(X)))

    def margins(self, X) -> np.ndarray:
        return classify(self.svm, self.project(X))

    def posteriors(self, X) -> np.ndarray:
        return posteriors(self.svm, self.project(X))


def fit_backend(vectors, labels, num_classes: int, lda_dim: int | None = None,
                c_reg: float = 10.0, epochs: int = 30, seed: int = 0) -> Backend:
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=int)
    # center before WCCN so length normalisation acts around the data mean
    wccn = fit_wccn(X, y)
    wccn = LinearTransform(wccn.matrix, X.mean(axis=0))
    Z = length_normalize(wccn(X))
    lda = fit_lda(Z, y, lda_dim or num_classes - 1)
    P = lda(Z)
    svm = train_linear_svm(P, y, c_reg=c_reg, epochs=epochs, seed=seed, num_classes=num_classes)
    svm = fit_margin_scale(svm, P, y)
    return Backend(wccn, lda, svm)


def save_backend(be: Backend, prefix) -> None:
    write_bytes(f"{prefix}.wccn", be.wccn.to_bytes())
    write_bytes(f"{prefix}.lda", be.lda.to_bytes())
    write_bytes(f"{prefix}.svm", be.svm.to_bytes())


def load_backend(prefix) -> Backend:
    try:
        return Backend(load_transform(f"{prefix}.wccn"), load_transform(f"{prefix}.lda"),
                       load_classifier(f"{prefix}.svm"))
    except FileNotFoundError as exc:
        raise FormatError(f"missing backend artifact: {exc.filename}") from exc
