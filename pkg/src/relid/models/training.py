"""Training loops, inference and model directories."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from relid.corpus import FeatureSequence, Utterance
from relid.embednet import autograd as ag
from relid.embednet.layers import Module
from relid.embednet.optim import Adam, load_checkpoint, save_checkpoint
from relid.models.config import ModelConfig
from relid.models.networks import (
    LONG,
    SHORT,
    E2ENet,
    HGRUNet,
    SequenceNet,
    XVectorNet,
    build_network,
    hgru_counts,
    segment_windows,
)

log = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    config: ModelConfig
    net: Module
    log: list = field(default_factory=list)

    def checkpoint(self) -> dict:
        return self.net.state_dict()


def active_frames(f: FeatureSequence) -> np.ndarray:
    """Voiced frames only, as float64 (unvoiced frames are dropped before the networks)."""
    x = f.frames[f.voiced].astype(np.float64)
    return x if len(x) else f.frames.astype(np.float64)


def _split_validation(n: int, fraction: float, seed: int, labels=None):
    rng = np.random.default_rng([seed, 0xBA1])
    if fraction <= 0 or n < 10:
        return np.arange(n), np.arange(0)
    val = []
    groups = [np.arange(n)] if labels is None else [np.flatnonzero(labels == c) for c in np.unique(labels)]
    for g in groups:
        k = int(round(len(g) * fraction))
        val.extend(rng.permutation(g)[:k].tolist())
    val = np.array(sorted(val), dtype=int)
    train = np.setdiff1d(np.arange(n), val)
    return train, val


def _fit(net: Module, params: dict, epoch_batches, val_loss, cfg: ModelConfig, lr: float,
         history: list, max_epochs: int | None = None) -> None:
    """Adam over the batches of each epoch, early stopping on validation loss.

    ``epoch_batches(rng)`` yields zero-argument closures returning a loss Tensor.
    ``val_loss()`` returns a float, or None when there is no validation data.
    """
    opt = Adam(params, lr=lr, clip=cfg.clip_norm)
    best, best_state, stale = np.inf, None, 0
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 0xE90C])
        for batch_loss in epoch_batches(rng):
            opt.zero_grad()
            loss = batch_loss()
            history.append(float(loss.value))
            loss.backward()
            opt.step()
        v = val_loss()
        log.info("epoch %d: train %.4f val %s", epoch, history[-1] if history else float("nan"), v)
        if v is None:
            continue
        if v < best - 1e-6:
            best, best_state, stale = v, net.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        net.load_state_dict(best_state)
    opt.zero_grad()


def _minibatches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# -- entropy DNN --------------------------------------------------------------

def train_entropy_dnn(vectors, labels, cfg: ModelConfig, groups=None) -> TrainedModel:
    """``groups`` (e.g. the source utterance of each segment) keeps overlapping
    segments of one utterance on the same side of the validation split."""
    X = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if np.any(y < 0) or np.any(y >= cfg.num_languages):
        raise ValueError("label out of range")
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"expected (N, {cfg.input_dim}) segment vectors, got {X.shape}")
    net = build_network(cfg)
    net.norm.fit(X)
    if groups is None:
        tr, va = _split_validation(len(y), cfg.val_fraction, cfg.seed, y)
    else:
        groups = np.asarray(groups)
        if groups.shape != y.shape:
            raise ValueError("one group id per segment vector")
        uniq, first = np.unique(groups, return_index=True)
        _, va_g = _split_validation(len(uniq), cfg.val_fraction, cfg.seed, y[first])
        va_mask = np.isin(groups, uniq[va_g])
        tr, va = np.flatnonzero(~va_mask), np.flatnonzero(va_mask)

    def batches(rng):
        for idx in _minibatches(len(tr), cfg.batch_size, rng):
            sel = tr[idx]
            yield lambda sel=sel: ag.softmax_xent(net.forward(X[sel]), y[sel])

    def val():
        return None if len(va) == 0 else float(ag.softmax_xent(net.forward(X[va]), y[va]).value)

    history = []
    _fit(net, net.named_parameters(), batches, val, cfg, cfg.lr, history)
    if len(va):
        net.set_buffer("logit_scale", [fit_logit_scale(net.forward(X[va]).value, y[va])])
    return TrainedModel(cfg, net, history)


def fit_logit_scale(logits: np.ndarray, labels: np.ndarray) -> float:
    """Positive scale s minimising the cross-entropy of softmax(s * logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(labels))

    def nll(log_s):
        return -log_softmax(np.exp(log_s) * logits, axis=1)[rows, labels].mean()

    res = minimize_scalar(nll, bounds=(-6.0, 3.0), method="bounded", options={"xatol": 1e-6})
    return float(np.exp(res.x))


# -- attention BLSTM over segment embeddings -----------------------------------

def _crop_segments(cfg: ModelConfig) -> int:
    crop_frames = int(round(cfg.crop_s * 100))
    return max(1, (crop_frames - cfg.win_frames) // cfg.hop_frames + 1)


def _seq_batches(seqs, labels, idx_pool, cfg: ModelConfig, net: SequenceNet):
    max_len = _crop_segments(cfg)

    def batches(rng):
        for idx in _minibatches(len(idx_pool), cfg.batch_size, rng):
            sel = idx_pool[idx]
            length = min(max_len, min(len(seqs[i]) for i in sel))
            starts = [int(rng.integers(len(seqs[i]) - length + 1)) for i in sel]
            batch = np.stack([seqs[i][s:s + length] for i, s in zip(sel, starts)], axis=1)
            yield lambda batch=batch, sel=sel: ag.softmax_xent(net.forward(batch)[0], labels[sel])

    return batches


def _seq_val(seqs, labels, va, net):
    def val():
        if len(va) == 0:
            return None
        return float(np.mean([ag.softmax_xent(net.forward(seqs[i][:, None, :])[0], labels[i:i + 1]).value
                              for i in va]))
    return val


def train_seq_model(corpus: list[Utterance], embeddings_fn, cfg: ModelConfig,
                    embeddings: list | None = None) -> TrainedModel:
    """Train the attention BLSTM on per-utterance segment-embedding sequences.

    ``embeddings_fn(utt)`` returns a (num_segments, E) array; precomputed
    sequences may be passed as ``embeddings`` instead.
    """
    if cfg.architecture not in ("i_blstm", "x_blstm"):
        raise ValueError("train_seq_model covers i_blstm and x_blstm")
    seqs = embeddings if embeddings is not None else [np.asarray(embeddings_fn(u), dtype=np.float64) for u in corpus]
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty embedding sequence")
    labels = np.array([u.language for u in corpus])
    net = build_network(cfg)
    net.norm.fit(np.concatenate(seqs))
    tr, va = _split_validation(len(seqs), cfg.val_fraction, cfg.seed, labels)
    history = []
    _fit(net, net.named_parameters(), _seq_batches(seqs, labels, tr, cfg, net),
         _seq_val(seqs, labels, va, net), cfg, cfg.lr, history)
    return TrainedModel(cfg, net, history)


# -- hierarchical GRU ---------------------------------------------------------

def train_hgru(corpus: list[Utterance], cfg: ModelConfig) -> TrainedModel:
    """Both heads are trained, alternating batches of short crops (routed to
    the short head) and long crops (routed to the long head)."""
    frames = [active_frames(u.features) for u in corpus]
    hop = corpus[0].features.hop_ms
    for x in frames:
        hgru_counts(len(x), cfg.hgru_window, cfg.hgru_shift, cfg.hgru_group)
    labels = np.array([u.language for u in corpus])
    net = build_network(cfg)
    tr, va = _split_validation(len(frames), cfg.val_fraction, cfg.seed, labels)
    per_s = 1000 // hop
    short_len = max(cfg.hgru_window, int(round(cfg.short_crop_s * per_s)))
    threshold = int(cfg.short_threshold_s * per_s)

    def batches(rng):
        for k, idx in enumerate(_minibatches(len(tr), cfg.batch_size, rng)):
            sel = tr[idx]
            shortest = min(len(frames[i]) for i in sel)
            if k % 2 == 0 or shortest <= threshold:
                length, head = min(short_len, shortest), SHORT
            else:
                lo = max(int(cfg.long_crop_s[0] * per_s), threshold + 1)
                hi = int(cfg.long_crop_s[1] * per_s)
                length = int(rng.integers(min(lo, shortest), min(hi, shortest) + 1))
                head = LONG
            starts = [int(rng.integers(len(frames[i]) - length + 1)) for i in sel]
            batch = np.stack([frames[i][s:s + length] for i, s in zip(sel, starts)])
            yield lambda batch=batch, sel=sel, head=head: ag.softmax_xent(
                net.forward(batch, hop, head)[0], labels[sel])

    def val():
        if len(va) == 0:
            return None
        return float(np.mean([ag.softmax_xent(net.forward(frames[i][None], hop)[0], labels[i:i + 1]).value
                              for i in va]))

    history = []
    _fit(net, net.named_parameters(), batches, val, cfg, cfg.lr, history)
    return TrainedModel(cfg, net, history)


# -- x-vector -------------------------------------------------------------------

def train_xvector(corpus: list[Utterance], cfg: ModelConfig) -> TrainedModel:
    frames = [active_frames(u.features) for u in corpus]
    labels = np.array([u.language for u in corpus])
    net = build_network(cfg)
    lo, hi = cfg.xvector_crop_frames
    shortest = min(len(x) for x in frames)
    if shortest < net.min_frames:
        raise ValueError(f"utterance of {shortest} frames is shorter than the TDNN context")
    tr, va = _split_validation(len(frames), cfg.val_fraction, cfg.seed, labels)

    def batches(rng):
        for idx in _minibatches(len(tr), cfg.batch_size, rng):
            sel = tr[idx]
            top = min(hi, min(len(frames[i]) for i in sel))
            length = int(rng.integers(min(lo, top), top + 1))
            starts = [int(rng.integers(len(frames[i]) - length + 1)) for i in sel]
            batch = np.stack([frames[i][s:s + length] for i, s in zip(sel, starts)])
            yield lambda batch=batch, sel=sel: ag.softmax_xent(net.forward(batch)[0], labels[sel])

    def val():
        if len(va) == 0:
            return None
        return float(np.mean([ag.softmax_xent(net.forward(frames[i][None])[0], labels[i:i + 1]).value
                              for i in va]))

    history = []
    _fit(net, net.named_parameters(), batches, val, cfg, cfg.lr, history)
    return TrainedModel(cfg, net, history)


def extract_xvector(model: TrainedModel, f: FeatureSequence) -> np.ndarray:
    net = model.net
    if not isinstance(net, XVectorNet):
        raise ValueError("extract_xvector needs an xvector model")
    return net.embed(active_frames(f)[None]).value[0]


def segment_xvectors(model: TrainedModel, f: FeatureSequence) -> np.ndarray:
    """x-vectors of the same overlapping windows used for segment i-vectors."""
    net = model.net
    cfg = model.config
    x = active_frames(f)
    win = min(cfg.win_frames, len(x))
    starts = segment_windows(len(x), cfg.win_frames, cfg.hop_frames)
    windows = x[starts[:, None] + np.arange(win)[None, :]]
    return net.embed(windows).value


# -- joint x-vector + BLSTM ----------------------------------------------------

def e2e_config(xvector: ModelConfig, backend: ModelConfig) -> ModelConfig:
    return backend.replace(architecture="x_blstm_e2e", input_dim=xvector.input_dim,
                           tdnn_dims=xvector.tdnn_dims, tdnn_offsets=xvector.tdnn_offsets,
                           embed_dim=xvector.embed_dim, win_frames=xvector.win_frames,
                           hop_frames=xvector.hop_frames)


def init_e2e(xvector: TrainedModel, backend: TrainedModel, cfg: ModelConfig | None = None) -> TrainedModel:
    if xvector.config.architecture != "xvector" or backend.config.architecture != "x_blstm":
        raise ValueError("joint model must be initialised from an xvector and an x_blstm model")
    cfg = cfg or e2e_config(xvector.config, backend.config)
    net = build_network(cfg)
    try:
        net.xvector.load_state_dict(xvector.net.state_dict())
        net.backend.load_state_dict(backend.net.state_dict())
    except ValueError as exc:
        raise ValueError(f"architecture mismatch with init checkpoints: {exc}") from exc
    return TrainedModel(cfg, net, [])


def train_e2e(corpus: list[Utterance], cfg: ModelConfig | None, xvector: TrainedModel, backend: TrainedModel,
              epochs: int | None = None) -> TrainedModel:
    """Fine-tune the trunk and backend jointly at a reduced learning rate."""
    model = init_e2e(xvector, backend, cfg)
    cfg, net = model.config, model.net
    frames = [active_frames(u.features) for u in corpus]
    labels = np.array([u.language for u in corpus])
    tr, va = _split_validation(len(frames), cfg.val_fraction, cfg.seed, labels)
    crop = int(round(cfg.crop_s * 100))

    def batches(rng):
        for idx in _minibatches(len(tr), cfg.batch_size, rng):
            sel = tr[idx]
            length = min(crop, min(len(frames[i]) for i in sel))
            starts = [int(rng.integers(len(frames[i]) - length + 1)) for i in sel]
            batch = np.stack([frames[i][s:s + length] for i, s in zip(sel, starts)])
            yield lambda batch=batch, sel=sel: ag.softmax_xent(net.forward(batch)[0], labels[sel])

    def val():
        if len(va) == 0:
            return None
        return float(np.mean([ag.softmax_xent(net.forward(frames[i][None])[0], labels[i:i + 1]).value
                              for i in va]))

    _fit(net, net.named_parameters(), batches, val, cfg, cfg.lr * cfg.e2e_lr_scale, model.log,
         max_epochs=epochs)
    return model


# -- inference ----------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: TrainedModel, x, details: bool = False):
    """Posteriors and (for attention models) attention weights over the
    1 s-level positions. ``x`` is an embedding vector/sequence for
    entropy_dnn, i_blstm and x_blstm, and an Utterance or FeatureSequence for
    the frame-level models. With ``details=True`` a third element reports
    routing information (the HGRU head used)."""
    net = model.net
    arch = model.config.architecture
    info = {}
    att = None
    if isinstance(x, Utterance):
        x = x.features
    if arch == "entropy_dnn":
        v = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if v.shape[1] != model.config.input_dim:
            raise ValueError("input dimension does not match the model")
        post = _softmax(net.forward(v).value)
        post = post[0] if np.asarray(x).ndim == 1 else post
    elif arch in ("i_blstm", "x_blstm"):
        seq = np.asarray(x, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[1] != model.config.input_dim:
            raise ValueError(f"expected a (T, {model.config.input_dim}) embedding sequence")
        logits, a = net.forward(seq[:, None, :])
        post, att = _softmax(logits.value[0]), a.value[:, 0]
    else:
        if not isinstance(x, FeatureSequence):
            raise ValueError(f"{arch} predicts from features")
        frames = active_frames(x)[None]
        if frames.shape[2] != model.config.input_dim:
            raise ValueError("feature dimension does not match the model")
        if arch == "hgru":
            logits, a, head = net.forward(frames, x.hop_ms)
            att = a.value[:, 0]
            info["head"] = head
        elif arch == "xvector":
            logits, _ = net.forward(frames)
        else:
            logits, a = net.forward(frames)
            att = a.value[:, 0]
        post = _softmax(logits.value[0])
    return (post, att, info) if details else (post, att)


# -- persistence ----------------------------------------------------------------

def save_model(model: TrainedModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model.config.to_text())
    save_checkpoint(model.checkpoint(), os.path.join(directory, "model.rnet"))
    with open(os.path.join(directory, "train_log.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        for k, loss in enumerate(model.log):
            fh.write(f"{k},{loss!r}\n")


def load_model(directory) -> TrainedModel:
    with open(os.path.join(directory, "config.txt"), encoding="utf-8") as fh:
        cfg = ModelConfig.from_text(fh.read())
    net = build_network(cfg)
    net.load_state_dict(load_checkpoint(os.path.join(directory, "model.rnet")))
    history = []
    log_path = os.path.join(directory, "train_log.csv")
    if os.path.exists(log_path):
        with open(log_path, encoding="utf-8") as fh:
            next(fh)
            history = [float(line.split(",")[1]) for line in fh if line.strip()]
    return TrainedModel(cfg, net, history)


__all__ = [
    "E2ENet", "HGRUNet", "SequenceNet", "TrainedModel", "XVectorNet", "extract_xvector", "init_e2e",
    "load_model", "predict", "save_model", "segment_xvectors", "train_e2e", "train_entropy_dnn",
    "train_hgru", "train_seq_model", "train_xvector",
]
