"""The network architectures: entropy DNN, attention BLSTM over segment
embeddings, hierarchical GRU, x-vector TDNN and the joint x-vector/BLSTM."""

from __future__ import annotations

import math

import numpy as np

from relid.embednet import autograd as ag
from relid.embednet.autograd import Tensor
from relid.embednet.layers import GRU, LSTM, TDNN, Attention, BiRecurrent, Dense, Module, stats_pooling
from relid.models.config import ModelConfig

SHORT, LONG = "short", "long"


class Standardize(Module):
    """Fixed affine input normalisation, fit once from training data."""

    def __init__(self, dim: int):
        super().__init__()
        self.add_buffer("mean", np.zeros(dim))
        self.add_buffer("scale", np.ones(dim))

    def fit(self, X: np.ndarray) -> None:
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.buffer("mean").shape[0])
        self.set_buffer("mean", X.mean(axis=0))
        self.set_buffer("scale", 1.0 / np.maximum(X.std(axis=0), 1e-8))

    def __call__(self, x) -> Tensor:
        return (ag.as_tensor(x) - self.buffer("mean")) * self.buffer("scale")


class EntropyDNN(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.norm = self.add_module("norm", Standardize(cfg.input_dim))
        self.hidden = []
        n_in = cfg.input_dim
        for k, n in enumerate(cfg.dnn_hidden):
            self.hidden.append(self.add_module(f"h{k}", Dense(n_in, n, rng)))
            n_in = n
        self.out = self.add_module("out", Dense(n_in, cfg.num_languages, rng, zero=cfg.zero_output))
        # calibration temperature, fit after training; entropies are only
        # meaningful when the posteriors are calibrated
        self.add_buffer("logit_scale", np.ones(1))

    def forward(self, x) -> Tensor:
        h = self.norm(x)
        for layer in self.hidden:
            h = ag.relu(layer(h))
        return self.out(h) * self.buffer("logit_scale")


class SequenceNet(Module):
    """Stacked BLSTM over (T, B, E) segment embeddings, attention pooling,
    one ReLU layer and the language output layer."""

    def __init__(self, cfg: ModelConfig, rng, input_dim: int | None = None):
        super().__init__()
        n_in = input_dim or cfg.input_dim
        self.norm = self.add_module("norm", Standardize(n_in))
        self.rnn = []
        for k in range(cfg.layers):
            layer = self.add_module(f"blstm{k}", BiRecurrent(LSTM, n_in, cfg.hidden, rng))
            self.rnn.append(layer)
            n_in = layer.out_dim
        self.att = self.add_module("att", Attention(n_in, rng))
        self.fc = self.add_module("fc", Dense(n_in, cfg.fc, rng))
        self.out = self.add_module("out", Dense(cfg.fc, cfg.num_languages, rng, zero=cfg.zero_output))

    def forward(self, seq) -> tuple[Tensor, Tensor]:
        seq = ag.as_tensor(seq)
        if seq.shape[0] == 0:
            raise ValueError("empty embedding sequence")
        h = self.norm(seq)
        for layer in self.rnn:
            h = layer(h)
        e, a = self.att(h)
        return self.out(ag.relu(self.fc(e))), a


def hgru_counts(num_frames: int, window: int = 20, shift: int = 10, group: int = 10) -> tuple[int, int]:
    """Number of layer-1 and layer-2 outputs for an input of ``num_frames``."""
    if num_frames < window:
        raise ValueError(f"{num_frames} frames is shorter than one {window}-frame window")
    n1 = (num_frames - window) // shift + 1
    return n1, math.ceil(n1 / group)


def hgru_emit_positions(n1: int, group: int = 10) -> np.ndarray:
    """Layer-1 indices at which layer 2 emits: every ``group`` steps plus the final step."""
    pos = list(range(group - 1, n1, group))
    if not pos or pos[-1] != n1 - 1:
        pos.append(n1 - 1)
    return np.array(pos)


class HGRUNet(Module):
    """Three-level GRU hierarchy with attention and duration-specific heads."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        h1, h2, h3 = cfg.hgru_sizes
        self.cfg = cfg
        self.gru1 = self.add_module("gru1", GRU(cfg.input_dim, h1, rng))
        self.gru2 = self.add_module("gru2", GRU(h1, h2, rng))
        self.gru3 = self.add_module("gru3", BiRecurrent(GRU, h2, h3, rng))
        self.att = self.add_module("att", Attention(2 * h3, rng))
        self.fc = self.add_module("fc", Dense(2 * h3, cfg.fc, rng))
        self.short = self.add_module("short", Dense(cfg.fc, cfg.num_languages, rng, zero=cfg.zero_output))
        self.long = self.add_module("long", Dense(cfg.fc, cfg.num_languages, rng, zero=cfg.zero_output))

    def head_for(self, num_frames: int, hop_ms: int = 10) -> str:
        return SHORT if num_frames * hop_ms / 1000.0 <= self.cfg.short_threshold_s else LONG

    def layers(self, frames: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Layer-1, layer-2 and layer-3 outputs, each time-major."""
        cfg = self.cfg
        B, T, D = frames.shape
        n1, _ = hgru_counts(T, cfg.hgru_window, cfg.hgru_shift, cfg.hgru_group)
        idx = np.arange(n1)[:, None] * cfg.hgru_shift + np.arange(cfg.hgru_window)[None, :]
        win = frames[:, idx, :]                                    # B x n1 x W x D
        win = win.transpose(2, 0, 1, 3).reshape(cfg.hgru_window, B * n1, D)
        l1 = self.gru1.final_state(ag.Tensor(win))                # (B*n1) x h1
        l1 = ag.transpose(ag.reshape(l1, (B, n1, -1)), (1, 0, 2))  # n1 x B x h1
        l2 = ag.getitem(self.gru2(l1), hgru_emit_positions(n1, cfg.hgru_group))
        l3 = self.gru3(l2)
        return l1, l2, l3

    def forward(self, frames: np.ndarray, hop_ms: int = 10, head: str | None = None):
        frames = np.asarray(frames, dtype=np.float64)
        _, _, l3 = self.layers(frames)
        e, a = self.att(l3)
        head = head or self.head_for(frames.shape[1], hop_ms)
        out = self.short if head == SHORT else self.long
        return out(ag.relu(self.fc(e))), a, head


class XVectorNet(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.tdnn = []
        n_in = cfg.input_dim
        for k, (dim, offsets) in enumerate(zip(cfg.tdnn_dims, cfg.tdnn_offsets)):
            self.tdnn.append(self.add_module(f"tdnn{k}", TDNN(n_in, dim, offsets, rng)))
            n_in = dim
        self.seg1 = self.add_module("seg1", Dense(2 * n_in, cfg.embed_dim, rng))
        self.seg2 = self.add_module("seg2", Dense(cfg.embed_dim, cfg.embed_dim, rng))
        self.out = self.add_module("out", Dense(cfg.embed_dim, cfg.num_languages, rng, zero=cfg.zero_output))

    @property
    def min_frames(self) -> int:
        return sum(layer.span - 1 for layer in self.tdnn) + 1

    def embed(self, frames) -> Tensor:
        """Pre-nonlinearity output of the first post-pooling layer, (B, embed_dim)."""
        x = ag.as_tensor(frames)
        if x.shape[1] < self.min_frames:
            raise ValueError(f"x-vector input needs at least {self.min_frames} frames, got {x.shape[1]}")
        for layer in self.tdnn:
            x = layer(x)
        return self.seg1(stats_pooling(x, axis=1))

    def forward(self, frames) -> tuple[Tensor, Tensor]:
        emb = self.embed(frames)
        h = ag.relu(self.seg2(ag.relu(emb)))
        return self.out(h), emb


def segment_windows(num_frames: int, win: int, hop: int) -> np.ndarray:
    """Start offsets of full overlapping windows (one clipped window if short)."""
    if num_frames <= win:
        return np.array([0])
    return np.arange((num_frames - win) // hop + 1) * hop


class E2ENet(Module):
    """x-vector trunk applied per window, feeding the attention BLSTM."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.xvector = self.add_module("xvector", XVectorNet(cfg, rng))
        self.backend = self.add_module("backend", SequenceNet(cfg, rng, input_dim=cfg.embed_dim))

    def segment_embeddings(self, frames: np.ndarray) -> Tensor:
        """(B, T, D) frames -> (num_windows, B, embed_dim)."""
        frames = np.asarray(frames, dtype=np.float64)
        B, T, D = frames.shape
        win = min(self.cfg.win_frames, T)
        starts = segment_windows(T, self.cfg.win_frames, self.cfg.hop_frames)
        idx = starts[:, None] + np.arange(win)[None, :]
        windows = frames[:, idx, :].reshape(B * len(starts), win, D)
        emb = self.xvector.embed(windows)
        return ag.transpose(ag.reshape(emb, (B, len(starts), -1)), (1, 0, 2))

    def forward(self, frames) -> tuple[Tensor, Tensor]:
        return self.backend.forward(self.segment_embeddings(frames))


def build_network(cfg: ModelConfig) -> Module:
    rng = np.random.default_rng(cfg.seed)
    arch = cfg.architecture
    if arch == "entropy_dnn":
        return EntropyDNN(cfg, rng)
    if arch in ("i_blstm", "x_blstm"):
        return SequenceNet(cfg, rng)
    if arch == "hgru":
        return HGRUNet(cfg, rng)
    if arch == "xvector":
        return XVectorNet(cfg, rng)
    return E2ENet(cfg, rng)
