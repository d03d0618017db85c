import math

import numpy as np
import pytest

from relid.corpus import CorpusConfig, FeatureSequence, Utterance, generate_corpus, preprocess
from relid.embednet import autograd as ag
from relid.embednet.gradcheck import check_gradients
from relid.models import (
    LONG,
    SHORT,
    ModelConfig,
    build_network,
    extract_xvector,
    hgru_counts,
    hgru_emit_positions,
    init_e2e,
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

TINY = dict(hidden=3, layers=1, fc=4, dnn_hidden=(5,), hgru_sizes=(3, 3, 3), tdnn_dims=(4, 4, 4, 4, 5),
            embed_dim=4, batch_size=4, max_epochs=2)


def tiny(arch, L=3, D=4, **kw):
    return ModelConfig(arch, L, D, **{**TINY, **kw})


def corpus(n=2, dur=(3.0, 3.0), L=3, D=4, **kw):
    utts = generate_corpus(CorpusConfig(num_languages=L, utts_per_language=n, duration_s=dur, feature_dim=D,
                                        source_components=3, seed=1, **kw))
    return [Utterance(u.id, u.language, preprocess(u.features), u.snr_trace) for u in utts]


def initial_loss(cfg, x, labels):
    net = build_network(cfg)
    arch = cfg.architecture
    if arch == "entropy_dnn":
        logits = net.forward(x)
    elif arch == "hgru":
        return [float(ag.softmax_xent(net.forward(x, 10, h)[0], labels).value) for h in (SHORT, LONG)]
    else:
        logits = net.forward(x)[0]
    return [float(ag.softmax_xent(logits, labels).value)]


# -- window arithmetic oracles ---------------------------------------------------------------

def count_by_enumeration(T, window=20, shift=10, group=10):
    n1 = 0
    start = 0
    while start + window <= T:
        n1 += 1
        start += shift
    n2 = 0
    for k in range(n1):
        if (k + 1) % group == 0 or k == n1 - 1:
            n2 += 1
    return n1, n2


def test_hgru_counts_ten_seconds():
    assert hgru_counts(1000) == (99, 10)


@pytest.mark.parametrize("T", [20, 29, 30, 109, 110, 300, 1000, 1234])
def test_hgru_counts_match_enumeration(T):
    assert hgru_counts(T) == count_by_enumeration(T)
    n1, n2 = hgru_counts(T)
    assert len(hgru_emit_positions(n1)) == n2


def test_hgru_too_short():
    with pytest.raises(ValueError):
        hgru_counts(19)


def test_hgru_layer_shapes():
    cfg = tiny("hgru")
    net = build_network(cfg)
    l1, l2, l3 = net.layers(np.random.default_rng(0).normal(size=(2, 250, 4)))
    assert l1.shape == (24, 2, 3) and l2.shape == (3, 2, 3) and l3.shape == (3, 2, 6)


# -- initial loss is ln L -----------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["entropy_dnn", "i_blstm", "x_blstm", "hgru", "xvector", "x_blstm_e2e"])
def test_initial_loss_is_log_l(arch):
    rng = np.random.default_rng(1)
    L = 4
    if arch == "entropy_dnn":
        x = rng.normal(size=(6, 4))
    elif arch in ("i_blstm", "x_blstm"):
        x = rng.normal(size=(5, 6, 4))
    else:
        x = rng.normal(size=(6, 150, 4))
    labels = rng.integers(0, L, size=6)
    for loss in initial_loss(tiny(arch, L=L), x, labels):
        assert abs(loss - math.log(L)) < 1e-6


# -- gradients through assembled architectures ------------------------------------------------

@pytest.mark.parametrize("arch", ["entropy_dnn", "i_blstm", "hgru", "xvector", "x_blstm_e2e"])
def test_architecture_gradients(arch):
    rng = np.random.default_rng(2)
    cfg = tiny(arch, zero_output=False, win_frames=20, hop_frames=10, tdnn_offsets=((-1, 0, 1), (0,), (0,), (0,), (0,)))
    net = build_network(cfg)
    if arch == "entropy_dnn":
        x = rng.normal(size=(3, 4))
        fn = lambda: ag.softmax_xent(net.forward(x), [0, 1, 2])
    elif arch == "i_blstm":
        x = rng.normal(size=(6, 2, 4))
        fn = lambda: ag.softmax_xent(net.forward(x)[0], [0, 2])
    elif arch == "hgru":
        x = rng.normal(size=(1, 40, 4))
        fn = lambda: ag.softmax_xent(net.forward(x)[0], [1])
    else:
        x = rng.normal(size=(1, 40, 4))
        fn = lambda: ag.softmax_xent(net.forward(x)[0], [1])
    errs = check_gradients(fn, net.named_parameters(), eps=1e-5, max_entries=6)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad, bad


# -- training and prediction -----------------------------------------------------------------

def test_entropy_dnn_separable_training():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(-2, 0.5, size=(60, 4)), rng.normal(2, 0.5, size=(60, 4))])
    y = np.repeat([0, 1], 60)
    m = train_entropy_dnn(X, y, tiny("entropy_dnn", L=2, max_epochs=20, lr=1e-2))
    post = predict(m, X)[0]
    assert post.shape == (120, 2)
    assert np.mean(np.argmax(post, axis=1) == y) >= 0.99
    assert m.log[0] == pytest.approx(math.log(2), abs=1e-6)
    single = predict(m, X[0])[0]
    assert single.shape == (2,) and single.sum() == pytest.approx(1.0)


def test_entropy_dnn_errors():
    with pytest.raises(ValueError):
        train_entropy_dnn(np.zeros((4, 4)), [0, 1, 2, 5], tiny("entropy_dnn"))
    with pytest.raises(ValueError):
        train_entropy_dnn(np.zeros((4, 3)), [0, 1, 2, 0], tiny("entropy_dnn"))


def test_seq_model_single_segment_and_errors():
    utts = corpus(n=2)
    rng = np.random.default_rng(4)
    seqs = [rng.normal(size=(5, 4)) + u.language for u in utts]
    m = train_seq_model(utts, None, tiny("i_blstm"), embeddings=seqs)
    post, att = predict(m, rng.normal(size=(1, 4)))
    assert att.tolist() == [1.0]
    assert post.sum() == pytest.approx(1.0)
    post, att = predict(m, rng.normal(size=(7, 4)))
    assert len(att) == 7 and att.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        predict(m, rng.normal(size=(7, 3)))
    with pytest.raises(ValueError):
        train_seq_model(utts, None, tiny("i_blstm"), embeddings=[np.zeros((0, 4))] * len(utts))
    with pytest.raises(ValueError):
        train_seq_model(utts, None, tiny("hgru"), embeddings=seqs)


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 4))
    y = rng.integers(0, 3, size=40)
    a = train_entropy_dnn(X, y, tiny("entropy_dnn"))
    b = train_entropy_dnn(X, y, tiny("entropy_dnn"))
    assert a.log == b.log
    for k, v in a.checkpoint().items():
        np.testing.assert_array_equal(v, b.checkpoint()[k])


def test_hgru_routing_by_duration():
    cfg = tiny("hgru")
    utts = corpus(n=1, dur=(3.0, 3.0)) + corpus(n=1, dur=(10.0, 10.0))
    m = train_hgru(utts, cfg.replace(max_epochs=1))
    heads = {}
    for u in utts:
        post, att, info = predict(m, u, details=True)
        heads[u.features.num_frames] = info["head"]
        assert post.sum() == pytest.approx(1.0)
        assert len(att) == hgru_counts(int(u.features.voiced.sum()))[1]
    assert heads[300] == SHORT and heads[1000] == LONG


def test_hgru_rejects_too_short_utterance():
    u = Utterance("s", 0, FeatureSequence(np.zeros((10, 4)), 10), None)
    with pytest.raises(ValueError):
        train_hgru([u, u], tiny("hgru"))


def test_xvector_embeddings_fixed_size():
    utts = corpus(n=2, dur=(2.0, 2.0))
    m = train_xvector(utts, tiny("xvector", max_epochs=1, xvector_crop_frames=(50, 100)))
    f = utts[0].features
    a = extract_xvector(m, f.slice(0, 80))
    b = extract_xvector(m, f.slice(0, 150))
    assert a.shape == b.shape == (4,)
    assert np.all(np.isfinite(a)) and not np.array_equal(a, b)
    seg = segment_xvectors(m, f)
    assert seg.shape[1] == 4
    with pytest.raises(ValueError):
        extract_xvector(m, f.slice(0, 5))
    post, att = predict(m, f)
    assert att is None and post.sum() == pytest.approx(1.0)


def test_e2e_zero_steps_equals_cascade():
    utts = corpus(n=2, dur=(2.0, 2.0))
    xcfg = tiny("xvector", max_epochs=1, xvector_crop_frames=(50, 100))
    xv = train_xvector(utts, xcfg)
    seqs = [segment_xvectors(xv, u.features) for u in utts]
    bcfg = tiny("x_blstm", max_epochs=1)
    bl = train_seq_model(utts, None, bcfg, embeddings=seqs)
    joint = train_e2e(utts, None, xv, bl, epochs=0)
    for u, s in zip(utts, seqs):
        p_joint, a_joint = predict(joint, u)
        p_casc, a_casc = predict(bl, s)
        np.testing.assert_allclose(p_joint, p_casc, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a_joint, a_casc, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        init_e2e(bl, xv)
    wrong = train_seq_model(utts, None, tiny("x_blstm", hidden=5, max_epochs=1), embeddings=seqs)
    with pytest.raises(ValueError, match="architecture mismatch"):
        init_e2e(xv, wrong, tiny("x_blstm_e2e"))


def test_e2e_one_epoch_does_not_increase_loss():
    utts = corpus(n=3, dur=(2.0, 2.0))
    xv = train_xvector(utts, tiny("xvector", max_epochs=2, xvector_crop_frames=(50, 100)))
    seqs = [segment_xvectors(xv, u.features) for u in utts]
    bl = train_seq_model(utts, None, tiny("x_blstm", max_epochs=2), embeddings=seqs)

    def train_loss(model):
        labels = np.array([u.language for u in utts])
        return np.mean([-np.log(predict(model, u)[0][lab]) for u, lab in zip(utts, labels)])

    before = train_loss(init_e2e(xv, bl))
    after = train_loss(train_e2e(utts, None, xv, bl, epochs=1))
    assert after <= before + 1e-3


# -- persistence -----------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(30, 4))
    y = rng.integers(0, 3, size=30)
    m = train_entropy_dnn(X, y, tiny("entropy_dnn"))
    save_model(m, tmp_path / "dnn")
    back = load_model(tmp_path / "dnn")
    assert back.config == m.config
    np.testing.assert_array_equal(predict(back, X)[0], predict(m, X)[0])
    assert back.log == m.log
    assert (tmp_path / "dnn" / "train_log.csv").read_text().startswith("step,loss\n")


def test_config_text_round_trip_and_errors():
    cfg = ModelConfig.preset("paper", "hgru", 14, 80)
    assert cfg.hidden == 256 and cfg.hgru_sizes == (256, 512, 512)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_text("bogus=1\n")
    with pytest.raises(ValueError):
        ModelConfig("rnn", 3, 4)
    with pytest.raises(ValueError):
        ModelConfig("hgru", 3, 4, short_threshold_s=0.0)
    with pytest.raises(ValueError):
        ModelConfig("hgru", 1, 4)
    with pytest.raises(ValueError):
        ModelConfig.preset("huge", "hgru", 3, 4)
