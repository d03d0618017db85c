import dataclasses
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relid._binio import FormatError
from relid.corpus import (
    CLEAN_SNR_DB,
    CorpusConfig,
    FeatureSequence,
    Utterance,
    apply_sad,
    cmvn,
    frame_energy,
    generate_corpus,
    read_features,
    read_manifest,
    sliding_window_bounds,
    write_features,
    write_manifest,
)


def small(**kw):
    base = dict(num_languages=2, utts_per_language=2, duration_s=(1.0, 1.0), feature_dim=4,
                source_components=3, seed=5)
    base.update(kw)
    return CorpusConfig(**base)


# -- generation -----------------------------------------------------------------------

def test_clean_corpus_has_sentinel_snr():
    for u in generate_corpus(small()):
        assert np.all(u.snr_trace == CLEAN_SNR_DB)


def test_partial_noise_covers_first_half_only():
    utts = generate_corpus(small(noise="partial", snr_db=10.0, duration_s=(10.0, 10.0), utts_per_language=1))
    for u in utts:
        assert u.features.num_frames == 1000
        assert np.all(u.snr_trace[:500] == 10.0)
        assert np.all(u.snr_trace[500:] == CLEAN_SNR_DB)


def test_full_noise_covers_everything():
    for u in generate_corpus(small(noise="full", snr_db=3.0)):
        assert np.all(u.snr_trace == 3.0)


@pytest.mark.parametrize("noise_type", ["gaussian", "talker"])
def test_noise_variance_matches_snr(noise_type):
    # the same utterance with and without noise differs by exactly the added noise
    cfg = small(noise="full", snr_db=0.0, duration_s=(40.0, 40.0), utts_per_language=1, noise_type=noise_type,
                feature_dim=6)
    noisy = generate_corpus(cfg)
    from relid.corpus import language_sources
    src = language_sources(cfg)
    for u in noisy:
        clean = generate_corpus(dataclasses.replace(cfg, noise="clean"))
        ref = [c for c in clean if c.id == u.id][0]
        added = u.features.frames.astype(np.float64) - ref.features.frames.astype(np.float64)
        speech = src[u.language].marginal_variance().sum()
        # 0 dB: total noise variance equals total speech variance
        assert added.var(axis=0).sum() == pytest.approx(speech, rel=0.15)
        assert np.abs(added.mean(axis=0)).max() < 0.3 * np.sqrt(speech / cfg.feature_dim)


def test_partial_first_half_snr_below_second_half():
    u = generate_corpus(small(noise="partial", snr_db=20.0))[0]
    T = u.features.num_frames
    assert u.snr_trace[: T // 2].mean() < u.snr_trace[T // 2:].mean()


def test_generation_is_deterministic():
    a = generate_corpus(small(noise="partial"))
    b = generate_corpus(small(noise="partial"))
    assert all(x == y for x, y in zip(a, b))
    assert all(np.array_equal(x.features.frames, y.features.frames) for x, y in zip(a, b))


def test_utterances_do_not_depend_on_generation_order():
    # an utterance's stream is keyed by its id, not by its position in the corpus
    a = generate_corpus(small(utts_per_language=2))
    b = generate_corpus(small(utts_per_language=3))
    common = {u.id: u for u in b}
    for u in a:
        assert u == common[u.id]


def test_seed_changes_corpus():
    a = generate_corpus(small(seed=1))[0]
    b = generate_corpus(small(seed=2))[0]
    assert not np.array_equal(a.features.frames, b.features.frames)


@pytest.mark.parametrize("kw", [dict(num_languages=1), dict(duration_s=(0.0, 1.0)), dict(duration_s=(-1.0, 2.0)),
                                dict(noise="loud"), dict(snr_db=float("inf")), dict(noise_type="pink")])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        generate_corpus(small(**kw))


# -- SAD --------------------------------------------------------------------------------

def test_sad_constant_energy_quantile_zero_keeps_all():
    f = FeatureSequence(np.ones((7, 3)), 10)
    assert apply_sad(f, 0.0).voiced.all()


@given(st.integers(1, 60), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_sad_median_keeps_at_most_half(T, seed):
    f = FeatureSequence(np.random.default_rng(seed).normal(size=(T, 3)), 10)
    voiced = apply_sad(f, 0.5).voiced
    energy = frame_energy(f)
    # direct sort oracle for the quantile threshold
    thr = np.quantile(np.sort(energy), 0.5)
    assert voiced.sum() <= int(np.ceil(T / 2))
    assert np.array_equal(voiced, energy > thr)


def test_sad_single_loud_frame():
    x = np.ones((20, 2))
    x[7] *= np.sqrt(10.0)
    voiced = apply_sad(FeatureSequence(x, 10), 0.9).voiced
    assert np.flatnonzero(voiced).tolist() == [7]


def test_sad_does_not_change_frames():
    f = FeatureSequence(np.random.default_rng(0).normal(size=(30, 4)), 10)
    assert np.array_equal(apply_sad(f, 0.3).frames, f.frames)


def test_sad_rejects_bad_quantile():
    f = FeatureSequence(np.ones((3, 1)), 10)
    with pytest.raises(ValueError):
        apply_sad(f, 1.0)
    with pytest.raises(ValueError):
        apply_sad(f, -0.1)


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)), 10)


def test_non_finite_frames_rejected():
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.nan, 1.0]]), 10)


# -- CMVN -------------------------------------------------------------------------------

def test_cmvn_short_utterance_is_standardized():
    rng = np.random.default_rng(3)
    f = FeatureSequence(rng.normal(2.0, 3.0, size=(120, 5)), 10)
    out = cmvn(f, 3.0).frames.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-4)


def test_cmvn_constant_dim_maps_to_zero():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3))
    x[:, 1] = 7.0
    out = cmvn(FeatureSequence(x, 10)).frames
    assert np.all(out[:, 1] == 0.0)
    assert np.all(np.isfinite(out))


def test_cmvn_window_indices():
    start, stop = sliding_window_bounds(1000, 300)
    assert (start[500], stop[500]) == (350, 650)
    # windows shift rather than shrink at the edges
    assert (start[0], stop[0]) == (0, 300)
    assert (start[999], stop[999]) == (700, 1000)


def test_cmvn_frame_500_uses_window_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1000, 2)) * np.linspace(0.5, 3.0, 1000)[:, None]
    f = FeatureSequence(x, 10)
    out = cmvn(f, 3.0).frames.astype(np.float64)
    stage1 = (x - x.mean(axis=0)) / x.std(axis=0)
    w = stage1[350:650]
    expect = (stage1[500] - w.mean(axis=0)) / w.std(axis=0)
    np.testing.assert_allclose(out[500], expect, rtol=1e-5, atol=1e-6)


def test_cmvn_uses_voiced_statistics_only():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(80, 2))
    voiced = np.ones(80, dtype=bool)
    voiced[:10] = False
    x[:10] = 1e3
    out = cmvn(FeatureSequence(x, 10, voiced), 10.0).frames.astype(np.float64)
    v = out[voiced]
    np.testing.assert_allclose(v.mean(axis=0), 0.0, atol=1e-5)
    np.testing.assert_allclose(v.std(axis=0), 1.0, atol=1e-4)


def test_cmvn_all_unvoiced_rejected():
    with pytest.raises(ValueError):
        cmvn(FeatureSequence(np.ones((5, 2)), 10, np.zeros(5, dtype=bool)))


# -- file I/O -------------------------------------------------------------------------

def test_feature_round_trip(tmp_path):
    for u in generate_corpus(small(noise="partial")):
        path = tmp_path / f"{u.id}.rlid"
        write_features(u, path)
        assert read_features(path) == u


def test_round_trip_without_snr_and_unlabeled(tmp_path):
    u = Utterance("x", None, FeatureSequence(np.array([[1.5]]), 10), None)
    write_features(u, tmp_path / "x.rlid")
    back = read_features(tmp_path / "x.rlid")
    assert back.language == -1
    assert back.snr_trace is None
    assert back.features.frames.shape == (1, 1)


@given(st.integers(1, 20), st.integers(1, 6), st.booleans())
@settings(max_examples=30, deadline=None)
def test_round_trip_property(T, D, with_snr):
    import tempfile

    rng = np.random.default_rng(T * 7 + D)
    f = FeatureSequence(rng.normal(size=(T, D)), 10, rng.random(T) > 0.3)
    u = Utterance("u", 1, f, rng.normal(size=T) if with_snr else None)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "u.rlid")
        write_features(u, path)
        assert read_features(path) == u


def test_corrupted_magic(tmp_path):
    u = generate_corpus(small())[0]
    path = tmp_path / "a.rlid"
    write_features(u, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_features(path)


def test_truncated_file(tmp_path):
    u = generate_corpus(small())[0]
    path = tmp_path / "a.rlid"
    write_features(u, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        read_features(path)


def test_dimension_overflow_header(tmp_path):
    import struct

    path = tmp_path / "big.rlid"
    path.write_bytes(b"RLID" + struct.pack("<HIIHh", 1, 2 ** 31, 2 ** 31, 10, 0) + b"\0" * 16)
    with pytest.raises(FormatError):
        read_features(path)


def test_manifest_round_trip(tmp_path):
    entries = [("train/a.rlid", 0), ("train/b.rlid", 2)]
    write_manifest(entries, tmp_path / "m.lst")
    assert read_manifest(tmp_path / "m.lst") == entries
    assert (tmp_path / "m.lst").read_bytes().endswith(b"\n")
