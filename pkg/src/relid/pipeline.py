"""End-to-end assembly of the i-vector systems.

Three systems share one front end (UBM + TVM trained on the training split):

* ``baseline``: utterance i-vector -> WCCN/LN/LDA/SVM backend.
* ``rwbw``: the same chain fed with relevance-weighted statistics, where the
  weights come from an entropy DNN scoring 1 s blocks.
* ``i_blstm``: attention BLSTM over segment i-vectors.

All scores leave as flat-prior LLRs so C_avg thresholds at ln beta apply.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from relid import eval as ev
from relid.backend import Backend, fit_backend
from relid.bwstats import GammaConfig, accumulate_stats, relevance_weights
from relid.corpus import CorpusConfig, FeatureSequence, Utterance, generate_corpus, preprocess
from relid.models import ModelConfig, TrainedModel, predict, train_entropy_dnn, train_seq_model
from relid.tvm import TVModel, extract_ivector, segment_bounds, segment_ivectors, train_tvm
from relid.ubm import DiagonalGMM, train_ubm

SYSTEMS = ("baseline", "rwbw", "i_blstm")


@dataclass
class FrontEndConfig:
    sad_quantile: float = 0.1
    cmvn_window_s: float = 3.0
    ubm_components: int = 64
    ubm_iters: int = 10
    ubm_stride: int = 1
    tvm_rank: int = 50
    tvm_iters: int = 10
    seed: int = 0


@dataclass
class FrontEnd:
    ubm: DiagonalGMM
    tvm: TVModel


def prepare(utts: list[Utterance], cfg: FrontEndConfig) -> list[Utterance]:
    """SAD then CMVN on every utterance; labels and SNR traces are kept."""
    return [dataclasses.replace(u, features=preprocess(u.features, cfg.sad_quantile, cfg.cmvn_window_s))
            for u in utts]


def pooled_voiced_frames(utts: list[Utterance]) -> np.ndarray:
    return np.concatenate([u.features.voiced_frames() for u in utts])


def train_front_end(train: list[Utterance], cfg: FrontEndConfig) -> FrontEnd:
    ubm = train_ubm(pooled_voiced_frames(train), cfg.ubm_components, cfg.ubm_iters, cfg.seed,
                    stride=cfg.ubm_stride)
    stats = [accumulate_stats(ubm, u.features) for u in train]
    tvm = train_tvm(stats, ubm, cfg.tvm_rank, cfg.tvm_iters, cfg.seed)
    return FrontEnd(ubm, tvm)


def utterance_ivectors(fe: FrontEnd, utts: list[Utterance], gammas=None) -> np.ndarray:
    """One i-vector per utterance; ``gammas`` holds optional length-T weights."""
    out = []
    for k, u in enumerate(utts):
        g = None if gammas is None else gammas[k][u.features.voiced]
        out.append(extract_ivector(fe.tvm, accumulate_stats(fe.ubm, u.features, g)))
    return np.array(out)


def segment_sequences(fe: FrontEnd, utts: list[Utterance], win_frames: int = 100,
                      hop_frames: int = 20) -> list[np.ndarray]:
    return [segment_ivectors(fe.tvm, fe.ubm, u.features, win_frames, hop_frames) for u in utts]


def block_posterior_fn(fe: FrontEnd, dnn: TrainedModel):
    """posterior_fn for relevance_weights: block stats -> i-vector -> DNN."""
    def fn(block: FeatureSequence) -> np.ndarray:
        y = extract_ivector(fe.tvm, accumulate_stats(fe.ubm, block))
        return predict(dnn, y)[0]
    return fn


def utterance_gammas(fe: FrontEnd, dnn: TrainedModel, utts: list[Utterance], cfg: GammaConfig) -> list[np.ndarray]:
    fn = block_posterior_fn(fe, dnn)
    return [relevance_weights(fn, u.features, cfg) for u in utts]


def out_of_fold_gammas(fe: FrontEnd, seqs: list[np.ndarray], labels: np.ndarray, utts: list[Utterance],
                       dnn_cfg: ModelConfig, gcfg: GammaConfig, folds: int) -> list[np.ndarray]:
    """Weights for each training utterance from a DNN fit on the other folds."""
    fold = np.arange(len(utts)) % folds
    out: list = [None] * len(utts)
    for f in range(folds):
        keep = np.flatnonzero(fold != f)
        X = np.concatenate([seqs[k] for k in keep])
        y = np.concatenate([np.full(len(seqs[k]), labels[k]) for k in keep])
        g = np.concatenate([np.full(len(seqs[k]), k) for k in keep])
        dnn = train_entropy_dnn(X, y, dnn_cfg, groups=g)
        held = np.flatnonzero(fold == f)
        for k, w in zip(held, utterance_gammas(fe, dnn, [utts[k] for k in held], gcfg)):
            out[k] = w
    return out


def labels_of(utts: list[Utterance]) -> np.ndarray:
    return np.array([u.language for u in utts])


def backend_scores(be: Backend, X: np.ndarray) -> np.ndarray:
    return np.array([ev.to_llr(p) for p in be.posteriors(X)])


def model_scores(model: TrainedModel, inputs) -> np.ndarray:
    return np.array([ev.to_llr(predict(model, x)[0]) for x in inputs])


@dataclass
class ExperimentConfig:
    """Everything needed to run the three systems on one corpus condition."""

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    test_utts_per_language: int = 34
    front_end: FrontEndConfig = field(default_factory=FrontEndConfig)
    gamma_lo: float = 0.2             # h_min / ln L
    gamma_hi: float = 0.9             # h_max / ln L
    backend_c: float = 10.0
    backend_epochs: int = 30
    dnn: dict = field(default_factory=dict)
    # training-set weights come from DNNs that never saw the utterance;
    # in-sample weights are near 1 everywhere and mismatch the test side
    rwbw_folds: int = 3
    blstm: dict = field(default_factory=dict)
    systems: tuple = SYSTEMS


@dataclass
class ExperimentResult:
    scores: dict
    reports: dict
    test: list
    models: dict


def desk_experiment(noise: str = "partial", seed: int = 0, snr_db: float = 5.0) -> ExperimentConfig:
    """The 3-language desk condition used by the acceptance suite and demos.

    Tight source components with close language means: 5 dB of noise then
    removes most of the language evidence from a frame, which is the regime
    where weighting regions by reliability can matter at all.
    """
    corpus = CorpusConfig(num_languages=3, utts_per_language=300, duration_s=(10.0, 10.0), noise=noise,
                          snr_db=snr_db, seed=seed, language_spread=0.0125, session_spread=0.1,
                          component_var=(0.01, 0.03))
    return ExperimentConfig(
        corpus=corpus, test_utts_per_language=34,
        front_end=FrontEndConfig(ubm_components=32, tvm_rank=30, seed=seed),
        dnn=dict(dnn_hidden=(128, 128, 128), batch_size=16, max_epochs=15, lr=1e-3),
        blstm=dict(hidden=32, layers=2, max_epochs=15, lr=1e-3),
    )


def split_configs(cfg: ExperimentConfig) -> tuple[CorpusConfig, CorpusConfig]:
    train = dataclasses.replace(cfg.corpus, split="train")
    test = dataclasses.replace(cfg.corpus, split="test", utts_per_language=cfg.test_utts_per_language)
    return train, test


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Generate, train and score every requested system; deterministic in cfg."""
    train_cfg, test_cfg = split_configs(cfg)
    fec = cfg.front_end
    train = prepare(generate_corpus(train_cfg), fec)
    test = prepare(generate_corpus(test_cfg), fec)
    L = cfg.corpus.num_languages
    y_train = labels_of(train)
    fe = train_front_end(train, fec)
    scores, models = {}, {"front_end": fe}
    ids = [u.id for u in test]
    y_test = labels_of(test)

    def backend_for(X):
        return fit_backend(X, y_train, L, c_reg=cfg.backend_c, epochs=cfg.backend_epochs, seed=fec.seed)

    if "baseline" in cfg.systems:
        be = backend_for(utterance_ivectors(fe, train))
        scores["baseline"] = backend_scores(be, utterance_ivectors(fe, test))
        models["baseline"] = be
    need_segments = "i_blstm" in cfg.systems or "rwbw" in cfg.systems
    seq_train = segment_sequences(fe, train) if need_segments else None
    if "rwbw" in cfg.systems:
        R = fec.tvm_rank
        dnn_cfg = ModelConfig("entropy_dnn", L, R, seed=fec.seed, **cfg.dnn)
        seg_y = np.concatenate([np.full(len(s), lab) for s, lab in zip(seq_train, y_train)])
        seg_utt = np.concatenate([np.full(len(s), k) for k, s in enumerate(seq_train)])
        dnn = train_entropy_dnn(np.concatenate(seq_train), seg_y, dnn_cfg, groups=seg_utt)
        gcfg = GammaConfig.for_languages(L, cfg.gamma_lo, cfg.gamma_hi)
        g_train = out_of_fold_gammas(fe, seq_train, y_train, train, dnn_cfg, gcfg, cfg.rwbw_folds) \
            if cfg.rwbw_folds > 1 else utterance_gammas(fe, dnn, train, gcfg)
        g_test = utterance_gammas(fe, dnn, test, gcfg)
        be = backend_for(utterance_ivectors(fe, train, g_train))
        scores["rwbw"] = backend_scores(be, utterance_ivectors(fe, test, g_test))
        models["rwbw"] = (dnn, be)
    if "i_blstm" in cfg.systems:
        mcfg = ModelConfig("i_blstm", L, fec.tvm_rank, seed=fec.seed, **cfg.blstm)
        model = train_seq_model(train, None, mcfg, embeddings=seq_train)
        scores["i_blstm"] = model_scores(model, segment_sequences(fe, test))
        models["i_blstm"] = model
    sets = {k: ev.ScoreSet(v, y_test, [f"lang{i}" for i in range(L)], ids) for k, v in scores.items()}
    reports = {k: ev.evaluate(s) for k, s in sets.items()}
    return ExperimentResult(sets, reports, test, models)


def attention_rows(model: TrainedModel, fe: FrontEnd, u: Utterance, win_frames: int = 100,
                   hop_frames: int = 20) -> list[tuple[int, float, float]]:
    """(segment index, attention weight, mean segment SNR) per attention position."""
    seq = segment_ivectors(fe.tvm, fe.ubm, u.features, win_frames, hop_frames)
    _, att = predict(model, seq)
    bounds = segment_bounds(u.features.num_frames, win_frames, hop_frames)
    rows = []
    for k, ((a, b), w) in enumerate(zip(bounds, att)):
        snr = float(np.mean(u.snr_trace[a:b])) if u.snr_trace is not None else float("nan")
        rows.append((k, float(w), snr))
    return rows


__all__ = [
    "ExperimentConfig", "ExperimentResult", "FrontEnd", "FrontEndConfig", "SYSTEMS", "attention_rows",
    "backend_scores", "block_posterior_fn", "desk_experiment", "labels_of", "model_scores",
    "out_of_fold_gammas", "prepare", "run_experiment", "segment_sequences", "split_configs",
    "train_front_end", "utterance_gammas", "utterance_ivectors",
]
