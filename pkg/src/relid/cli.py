"""``relid`` command line: one subcommand per pipeline stage.

Every stage reads its inputs from, and writes its outputs to, the output
directory, so stages can be rerun individually:

    features/{train,test}/<id>.rlid, features/<split>.lst   gen-corpus
    ubm.rgmm, ubm_log.csv                                    train-ubm
    stats/<split>/<id>.rbws                                  extract-stats
    tvm.rtvm, tvm_log.csv                                    train-tvm
    ivectors/<split>.npz, ivectors/<split>_segments.npz      extract-ivectors
    models/<architecture>/                                   train-model
    backend/<system>.{wccn,lda,svm}                          train-backend
    scores/<system>.csv                                      score
    reports/<system>.txt, *_languages.csv, *_det.csv         evaluate
    attention/<system>/<id>.csv                              attn-dump
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys

# RELID_THREADS caps BLAS threads; it has to be seen before numpy loads
if os.environ.get("RELID_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["RELID_THREADS"])

import numpy as np  # noqa: E402

from relid import eval as ev
from relid._binio import FormatError
from relid.backend import fit_backend, load_backend, save_backend
from relid.bwstats import (
    GammaConfig,
    accumulate_stats,
    inverse_entropy_fuse,
    load_stats,
    relevance_weights,
    save_stats,
)
from relid.corpus import (
    CorpusConfig,
    FeatureSequence,
    Utterance,
    generate_corpus,
    preprocess,
    read_features,
    read_manifest,
    write_features,
    write_manifest,
)
from relid.models import (
    ModelConfig,
    e2e_config,
    hgru_emit_positions,
    load_model,
    predict,
    save_model,
    segment_xvectors,
    train_e2e,
    train_entropy_dnn,
    train_hgru,
    train_seq_model,
    train_xvector,
)
from relid.models.networks import segment_windows
from relid.pipeline import FrontEnd, out_of_fold_gammas
from relid.tvm import extract_ivector, load_tvm, save_tvm, segment_bounds, segment_ivectors, train_tvm
from relid.ubm import TrainingLog, load_gmm, save_gmm, train_ubm

log = logging.getLogger("relid")

SPLITS = ("train", "test")
SYSTEMS = ("baseline", "rwbw", "entropy_dnn", "i_blstm", "x_blstm", "hgru", "xvector", "x_blstm_e2e")
ATTENTION_SYSTEMS = ("i_blstm", "x_blstm", "hgru", "x_blstm_e2e")


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# -- configuration ----------------------------------------------------------------

_CORPUS_FIELDS = {f.name: f for f in dataclasses.fields(CorpusConfig) if f.name not in ("extra", "split")}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"num_languages", "input_dim"}

DEFAULTS = {
    "corpus.train_utts_per_language": 60,
    "corpus.test_utts_per_language": 34,
    "frontend.sad_quantile": 0.1,
    "frontend.cmvn_window_s": 3.0,
    "ubm.components": 64,
    "ubm.iters": 10,
    "ubm.stride": 1,
    "ubm.seed": 0,
    "tvm.rank": 50,
    "tvm.iters": 10,
    "tvm.seed": 0,
    "segments.win_frames": 100,
    "segments.hop_frames": 20,
    "gamma.h_min": None,
    "gamma.h_max": None,
    "gamma.block_frames": 100,
    "rwbw.folds": 3,
    "backend.c_reg": 10.0,
    "backend.epochs": 30,
    "backend.seed": 0,
    "eval.betas": (1.0, 9.0),
    "system": "i_blstm",
    "model.architecture": "i_blstm",
}

PAPER_PRESET = {"ubm.components": 2048, "tvm.rank": 500}


def _parse_value(raw: str, ref):
    if isinstance(ref, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    if isinstance(ref, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(ref, int):
        return int(raw)
    if isinstance(ref, float) or ref is None:
        return float(raw)
    return raw


def _known_reference(key: str):
    if key in DEFAULTS:
        return True, DEFAULTS[key]
    section, _, name = key.partition(".")
    if section == "corpus" and name in _CORPUS_FIELDS:
        f = _CORPUS_FIELDS[name]
        return True, f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if section == "model" and name in _MODEL_FIELDS:
        return True, "model"
    return False, None


@dataclasses.dataclass
class PipelineConfig:
    values: dict
    model_text: dict
    preset: str = "desk"

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key in DEFAULTS:
            if self.preset == "paper" and key in PAPER_PRESET:
                return PAPER_PRESET[key]
            return DEFAULTS[key]
        raise KeyError(key)

    def corpus(self, split: str) -> CorpusConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items()
              if k.startswith("corpus.") and k.split(".", 1)[1] in _CORPUS_FIELDS}
        for name in ("duration_s", "component_var"):
            if name in kw:
                if len(kw[name]) != 2:
                    raise ValueError(f"corpus.{name} needs two comma-separated values")
        kw["utts_per_language"] = int(self[f"corpus.{split}_utts_per_language"])
        cfg = CorpusConfig(split=split, **kw)
        cfg.validate()
        return cfg

    @property
    def num_languages(self) -> int:
        return self.corpus("train").num_languages

    def model(self, architecture: str, input_dim: int) -> ModelConfig:
        base = ModelConfig.preset(self.preset, architecture, self.num_languages, input_dim)
        user = {k: v for k, v in self.model_text.items() if k != "architecture"}
        lines = [line for line in base.to_text().splitlines() if line.split("=", 1)[0] not in user]
        return ModelConfig.from_text("\n".join(lines + [f"{k}={v}" for k, v in user.items()]))

    def gamma(self) -> GammaConfig:
        L = self.num_languages
        lo = self["gamma.h_min"]
        hi = self["gamma.h_max"]
        return GammaConfig(0.2 * math.log(L) if lo is None else lo, 0.9 * math.log(L) if hi is None else hi,
                           int(self["gamma.block_frames"]))


def parse_config(text: str, preset: str = "desk") -> PipelineConfig:
    """Parse UTF-8 ``key=value`` lines; unknown keys are rejected."""
    if preset not in ("desk", "paper"):
        raise ValueError(f"unknown preset {preset!r}")
    values, model_text = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        known, ref = _known_reference(key)
        if not known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if ref == "model":
            model_text[key.split(".", 1)[1]] = raw
            continue
        try:
            values[key] = _parse_value(raw, ref)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if "model.architecture" in values:
        model_text["architecture"] = values["model.architecture"]
    cfg = PipelineConfig(values, model_text, preset)
    cfg.corpus("train")
    cfg.model(cfg.model_text.get("architecture", DEFAULTS["model.architecture"]), 1)
    if cfg["system"] not in SYSTEMS:
        raise ValueError(f"unknown system {cfg['system']!r}")
    return cfg


def load_config(path: str, preset: str = "desk") -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), preset)


# -- artifact helpers -----------------------------------------------------------------

def _require(path: str, stage: str, producer: str) -> str:
    if not os.path.exists(path):
        raise StageError(stage, f"missing artifact {path} (run {producer} first)")
    return path


def _corpus(out: str, split: str, stage: str) -> list[Utterance]:
    manifest = _require(os.path.join(out, "features", f"{split}.lst"), stage, "gen-corpus")
    base = os.path.dirname(manifest)
    return [read_features(os.path.join(base, rel)) for rel, _ in read_manifest(manifest)]


def _ubm(out: str, stage: str):
    return load_gmm(_require(os.path.join(out, "ubm.rgmm"), stage, "train-ubm"))


def _tvm(out: str, stage: str):
    ubm = _ubm(out, stage)
    return ubm, load_tvm(_require(os.path.join(out, "tvm.rtvm"), stage, "train-tvm"), ubm)


def _save_npz(path: str, **arrays) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_npz(path: str, stage: str, producer: str) -> dict:
    with np.load(_require(path, stage, producer), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _ivectors(out: str, split: str, stage: str):
    z = _load_npz(os.path.join(out, "ivectors", f"{split}.npz"), stage, "extract-ivectors")
    return [str(i) for i in z["ids"]], z["labels"].astype(int), z["vectors"]


def _segments(out: str, split: str, stage: str) -> dict:
    return _load_npz(os.path.join(out, "ivectors", f"{split}_segments.npz"), stage, "extract-ivectors")


def _model(out: str, arch: str, stage: str):
    return load_model(_require(os.path.join(out, "models", arch), stage, f"train-model ({arch})"))


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- stages ---------------------------------------------------------------------------

def cmd_gen_corpus(cfg: PipelineConfig, out: str) -> None:
    """Generate both splits and store SAD + CMVN processed features."""
    for split in SPLITS:
        utts = generate_corpus(cfg.corpus(split))
        entries = []
        for u in utts:
            feats = preprocess(u.features, cfg["frontend.sad_quantile"], cfg["frontend.cmvn_window_s"])
            rel = os.path.join(split, f"{u.id}.rlid")
            write_features(dataclasses.replace(u, features=feats), os.path.join(out, "features", rel))
            entries.append((rel, u.language))
        write_manifest(entries, os.path.join(out, "features", f"{split}.lst"))
        print(f"{split}: {len(utts)} utterances")


def cmd_train_ubm(cfg: PipelineConfig, out: str) -> None:
    utts = _corpus(out, "train", "train-ubm")
    frames = np.concatenate([u.features.voiced_frames() for u in utts])
    history = TrainingLog()
    g = train_ubm(frames, int(cfg["ubm.components"]), int(cfg["ubm.iters"]), int(cfg["ubm.seed"]),
                  stride=int(cfg["ubm.stride"]), log_out=history)
    save_gmm(g, os.path.join(out, "ubm.rgmm"))
    _write_text(os.path.join(out, "ubm_log.csv"),
                "iter,log_likelihood\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(history.log_likelihoods)))
    print(f"ubm: C={g.num_components} D={g.dim} final_ll={history.log_likelihoods[-1]:.6g}")


def cmd_extract_stats(cfg: PipelineConfig, out: str) -> None:
    g = _ubm(out, "extract-stats")
    for split in SPLITS:
        for u in _corpus(out, split, "extract-stats"):
            if u.features.dim != g.dim:
                raise StageError("extract-stats", f"feature dim {u.features.dim} does not match UBM dim {g.dim}")
            save_stats(accumulate_stats(g, u.features), os.path.join(out, "stats", split, f"{u.id}.rbws"))
    print("stats written")


def _split_stats(out: str, split: str, stage: str):
    utts = _corpus(out, split, stage)
    paths = [os.path.join(out, "stats", split, f"{u.id}.rbws") for u in utts]
    return utts, [load_stats(_require(p, stage, "extract-stats")) for p in paths]


def cmd_train_tvm(cfg: PipelineConfig, out: str) -> None:
    g = _ubm(out, "train-tvm")
    _, stats = _split_stats(out, "train", "train-tvm")
    history = []
    m = train_tvm(stats, g, int(cfg["tvm.rank"]), int(cfg["tvm.iters"]), int(cfg["tvm.seed"]), history=history)
    save_tvm(m, os.path.join(out, "tvm.rtvm"))
    _write_text(os.path.join(out, "tvm_log.csv"),
                "iter,objective\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(history)))
    print(f"tvm: R={m.rank}")


def cmd_extract_ivectors(cfg: PipelineConfig, out: str) -> None:
    g, m = _tvm(out, "extract-ivectors")
    win, hop = int(cfg["segments.win_frames"]), int(cfg["segments.hop_frames"])
    for split in SPLITS:
        utts, stats = _split_stats(out, split, "extract-ivectors")
        vectors = np.array([extract_ivector(m, s) for s in stats])
        _save_npz(os.path.join(out, "ivectors", f"{split}.npz"), ids=np.array([u.id for u in utts]),
                  labels=np.array([u.language for u in utts]), vectors=vectors)
        _save_npz(os.path.join(out, "ivectors", f"{split}_segments.npz"),
                  **{u.id: segment_ivectors(m, g, u.features, win, hop) for u in utts})
    print("i-vectors written")


def _xvector_segments(out: str, utts, stage: str) -> dict:
    xv = _model(out, "xvector", stage)
    return {u.id: segment_xvectors(xv, u.features) for u in utts}


def cmd_train_model(cfg: PipelineConfig, out: str, arch: str | None = None) -> None:
    stage = "train-model"
    arch = arch or cfg.model_text.get("architecture", DEFAULTS["model.architecture"])
    utts = _corpus(out, "train", stage)
    D = utts[0].features.dim
    if arch in ("entropy_dnn", "i_blstm"):
        segs = _segments(out, "train", stage)
        seqs = [segs[u.id] for u in utts]
        mcfg = cfg.model(arch, seqs[0].shape[1])
        if arch == "entropy_dnn":
            y = np.concatenate([np.full(len(s), u.language) for s, u in zip(seqs, utts)])
            groups = np.concatenate([np.full(len(s), k) for k, s in enumerate(seqs)])
            model = train_entropy_dnn(np.concatenate(seqs), y, mcfg, groups=groups)
        else:
            model = train_seq_model(utts, None, mcfg, embeddings=seqs)
    elif arch == "x_blstm":
        segs = _xvector_segments(out, utts, stage)
        seqs = [segs[u.id] for u in utts]
        model = train_seq_model(utts, None, cfg.model(arch, seqs[0].shape[1]), embeddings=seqs)
    elif arch == "hgru":
        model = train_hgru(utts, cfg.model(arch, D))
    elif arch == "xvector":
        model = train_xvector(utts, cfg.model(arch, D))
    elif arch == "x_blstm_e2e":
        xv, xb = _model(out, "xvector", stage), _model(out, "x_blstm", stage)
        model = train_e2e(utts, e2e_config(xv.config, xb.config), xv, xb)
    else:
        raise StageError(stage, f"unknown architecture {arch!r}")
    save_model(model, os.path.join(out, "models", arch))
    print(f"{arch}: {len(model.log)} steps, final loss {model.log[-1] if model.log else float('nan'):.4f}")


def _rwbw_vectors(cfg: PipelineConfig, out: str, split: str, stage: str) -> tuple[list, np.ndarray, np.ndarray]:
    g, m = _tvm(out, stage)
    dnn = _model(out, "entropy_dnn", stage)
    gcfg = cfg.gamma()
    utts = _corpus(out, split, stage)
    folds = int(cfg["rwbw.folds"])
    if split == "train" and folds > 1:
        # the stored DNN has seen these utterances; refit it per fold instead
        segs = _segments(out, split, stage)
        seqs = [segs[u.id] for u in utts]
        gammas = out_of_fold_gammas(FrontEnd(g, m), seqs, np.array([u.language for u in utts]), utts,
                                    dnn.config, gcfg, folds)
        vectors = [extract_ivector(m, accumulate_stats(g, u.features, w[u.features.voiced]))
                   for u, w in zip(utts, gammas)]
        return [u.id for u in utts], np.array([u.language for u in utts]), np.array(vectors)

    def posterior_fn(block: FeatureSequence):
        return predict(dnn, extract_ivector(m, accumulate_stats(g, block)))[0]

    vectors = []
    for u in utts:
        gamma = relevance_weights(posterior_fn, u.features, gcfg)[u.features.voiced]
        vectors.append(extract_ivector(m, accumulate_stats(g, u.features, gamma)))
    return [u.id for u in utts], np.array([u.language for u in utts]), np.array(vectors)


def _backend_inputs(cfg: PipelineConfig, out: str, system: str, split: str, stage: str):
    if system == "baseline":
        return _ivectors(out, split, stage)
    if system == "rwbw":
        return _rwbw_vectors(cfg, out, split, stage)
    raise StageError(stage, f"system {system!r} has no SVM backend (use baseline or rwbw)")


def cmd_train_backend(cfg: PipelineConfig, out: str, system: str) -> None:
    stage = "train-backend"
    _, y, X = _backend_inputs(cfg, out, system, "train", stage)
    be = fit_backend(X, y, cfg.num_languages, c_reg=float(cfg["backend.c_reg"]),
                     epochs=int(cfg["backend.epochs"]), seed=int(cfg["backend.seed"]))
    save_backend(be, os.path.join(out, "backend", system))
    print(f"backend[{system}]: lda_dim={be.lda.out_dim}")


def system_scores(cfg: PipelineConfig, out: str, system: str, split: str = "test") -> ev.ScoreSet:
    stage = "score"
    L = cfg.num_languages
    if system in ("baseline", "rwbw"):
        ids, y, X = _backend_inputs(cfg, out, system, split, stage)
        prefix = os.path.join(out, "backend", system)
        _require(f"{prefix}.svm", stage, "train-backend")
        be = load_backend(prefix)
        if X.shape[1] != be.wccn.in_dim:
            raise StageError(stage, f"i-vector dim {X.shape[1]} does not match backend dim {be.wccn.in_dim}")
        scores = np.array([ev.to_llr(p) for p in be.posteriors(X)])
    else:
        model = _model(out, system, stage)
        utts = _corpus(out, split, stage)
        ids, y = [u.id for u in utts], np.array([u.language for u in utts])
        if system in ("i_blstm", "entropy_dnn"):
            segs = _segments(out, split, stage)
            if system == "entropy_dnn":
                # utterance decision fuses the per-segment posteriors by inverse entropy
                inputs = [inverse_entropy_fuse(predict(model, segs[i])[0])[0] for i in ids]
                scores = np.array([ev.to_llr(p) for p in inputs])
            else:
                scores = np.array([ev.to_llr(predict(model, segs[i])[0]) for i in ids])
        elif system == "x_blstm":
            segs = _xvector_segments(out, utts, stage)
            scores = np.array([ev.to_llr(predict(model, segs[i])[0]) for i in ids])
        else:
            scores = np.array([ev.to_llr(predict(model, u)[0]) for u in utts])
    return ev.ScoreSet(scores, y, [f"lang{l}" for l in range(L)], ids)


def cmd_score(cfg: PipelineConfig, out: str, system: str) -> None:
    s = system_scores(cfg, out, system)
    path = os.path.join(out, "scores", f"{system}.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    ev.write_scores(s, path)
    print(f"scores: {path}")


def cmd_evaluate(cfg: PipelineConfig, out: str, system: str, scores_path: str | None = None) -> None:
    path = scores_path or _require(os.path.join(out, "scores", f"{system}.csv"), "evaluate", "score")
    s = ev.read_scores(path)
    report = ev.evaluate(s, tuple(cfg["eval.betas"]))
    name = os.path.splitext(os.path.basename(path))[0]
    _write_text(os.path.join(out, "reports", f"{name}.txt"), report.to_text())
    _write_text(os.path.join(out, "reports", f"{name}_languages.csv"), ev.language_table(s, report))
    _write_text(os.path.join(out, "reports", f"{name}_det.csv"), ev.det_points(s))
    sys.stdout.write(report.to_text())


def attention_spans(system: str, model, u: Utterance, win: int, hop: int) -> list[tuple[int, int]]:
    """Frame ranges (in the utterance's own indexing) behind each attention position."""
    f = u.features
    if system == "i_blstm":
        return segment_bounds(f.num_frames, win, hop)
    idx = np.flatnonzero(f.voiced) if f.voiced.any() else np.arange(f.num_frames)
    n = len(idx)
    if system == "hgru":
        c = model.config
        n1 = (n - c.hgru_window) // c.hgru_shift + 1
        spans, prev = [], 0
        for pos in hgru_emit_positions(n1, c.hgru_group):
            spans.append((prev * c.hgru_shift, pos * c.hgru_shift + c.hgru_window))
            prev = pos + 1
    else:
        w = min(model.config.win_frames, n)
        spans = [(s, s + w) for s in segment_windows(n, model.config.win_frames, model.config.hop_frames)]
    return [(int(idx[a]), int(idx[b - 1]) + 1) for a, b in spans]


def cmd_attn_dump(cfg: PipelineConfig, out: str, system: str) -> None:
    stage = "attn-dump"
    if system not in ATTENTION_SYSTEMS:
        raise StageError(stage, f"system {system!r} has no attention weights")
    model = _model(out, system, stage)
    utts = _corpus(out, "test", stage)
    win, hop = int(cfg["segments.win_frames"]), int(cfg["segments.hop_frames"])
    if system == "i_blstm":
        segs = _segments(out, "test", stage)
        inputs = [segs[u.id] for u in utts]
    elif system == "x_blstm":
        segs = _xvector_segments(out, utts, stage)
        inputs = [segs[u.id] for u in utts]
    else:
        inputs = utts
    for u, x in zip(utts, inputs):
        _, att = predict(model, x)
        spans = attention_spans(system, model, u, win, hop)
        if len(spans) != len(att):
            raise StageError(stage, f"{u.id}: {len(att)} attention positions for {len(spans)} spans")
        lines = ["segment,attention,mean_snr_db"]
        for k, ((a, b), w) in enumerate(zip(spans, att)):
            snr = float(np.mean(u.snr_trace[a:b])) if u.snr_trace is not None else float("nan")
            lines.append(f"{k},{float(w)!r},{snr!r}")
        _write_text(os.path.join(out, "attention", system, f"{u.id}.csv"), "\n".join(lines) + "\n")
    print(f"attention for {len(utts)} utterances")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-ubm": cmd_train_ubm,
    "extract-stats": cmd_extract_stats,
    "train-tvm": cmd_train_tvm,
    "extract-ivectors": cmd_extract_ivectors,
    "train-model": cmd_train_model,
    "train-backend": cmd_train_backend,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "attn-dump": cmd_attn_dump,
}
_TAKES_SYSTEM = {"train-backend", "score", "evaluate", "attn-dump"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relid", description="Relevance-weighted language identification pipeline.")
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key=value pipeline configuration file")
    p.add_argument("--preset", choices=("paper", "desk"), default="desk", help="model size preset")
    p.add_argument("--out", default=None, help="artifact directory (default: relid_out next to the config)")
    p.add_argument("--system", default=None, choices=SYSTEMS, help="override the config's system key (train-model: the architecture)")
    p.add_argument("--scores", default=None, help="evaluate: score file to read instead of the system's")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    stage = args.subcommand
    try:
        try:
            cfg = load_config(args.config, args.preset)
        except (OSError, ValueError) as exc:
            raise StageError("config", str(exc)) from exc
        out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.config)), "relid_out")
        os.makedirs(out, exist_ok=True)
        system = args.system or cfg["system"]
        fn = COMMANDS[stage]
        if stage == "evaluate":
            fn(cfg, out, system, args.scores)
        elif stage in _TAKES_SYSTEM:
            fn(cfg, out, system)
        elif stage == "train-model":
            fn(cfg, out, args.system)
        else:
            fn(cfg, out)
    except StageError as exc:
        print(f"relid: error: stage={exc.stage}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except (FormatError, ValueError, KeyError, OSError) as exc:
        print(f"relid: error: stage={stage}: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
