import logging
import math

import numpy as np
import pytest
from scipy import stats

from eeg2env.classifier import ClassifierConfig, SubjectClassifier
from eeg2env.codec import CodecConfig, EnvelopeCodec
from eeg2env.errors import DimensionError, ParameterError
from eeg2env.evaluation import (MetricsReport, SubjectScore, eeg_variance_features,
                                embed_windows, envelope_features, evaluate,
                                fingerprint, identity_probe, pcc_metric,
                                probe_feasible, reconstruct_windows, subject_probe,
                                window_pcc)
from eeg2env.windows import NormStats, WindowedDataset

TINY_CODEC = CodecConfig(in_channels=4, stage_channels=(4, 4, 6, 6, 8),
                         decoder_channels=(6, 6, 4, 4))
TINY_CLF = ClassifierConfig(n_subjects=3, channels=4, scale=2, se_reduction=2,
                            fused_channels=8, attn_dim=4)


def make_dataset(rng, n_per_subject=4, subjects=(0, 1, 2), L=64, C=4,
                 split="val", train_subjects=None):
    n = n_per_subject * len(subjects)
    sids = np.repeat(subjects, n_per_subject).astype(np.int64)
    stats_ = NormStats(eeg_mean=np.zeros(C), eeg_std=np.ones(C),
                       env_mean=0.0, env_std=1.0)
    return WindowedDataset(
        eeg=rng.normal(size=(n, C, L)),
        envelope=rng.normal(size=(n, L)),
        subject_ids=sids,
        recording_ids=[f"s{t}_r0" for t in sids],
        window_starts=np.tile(np.arange(n_per_subject) * L, len(subjects)),
        split=split, sample_rate_hz=64.0, stats=stats_,
        train_subjects=tuple(subjects) if train_subjects is None else train_subjects)


# --------------------------------------------------------------------- pcc


def test_pcc_matches_scipy(rng):
    for _ in range(50):
        a, b = rng.normal(size=40), rng.normal(size=40)
        assert pcc_metric(a, b) == pytest.approx(stats.pearsonr(a, b).statistic, abs=1e-12)


def test_pcc_perfect_and_inverted(rng):
    x = rng.normal(size=30)
    assert pcc_metric(x, 2.0 * x + 1.0) == pytest.approx(1.0)
    assert pcc_metric(x, -x) == pytest.approx(-1.0)


def test_pcc_degenerate_window_scores_zero(rng, caplog):
    with caplog.at_level(logging.WARNING, logger="eeg2env.evaluation"):
        value = pcc_metric(np.ones(16), rng.normal(size=16))
    assert value == 0.0
    assert any("degenerate" in rec.message for rec in caplog.records)


def test_pcc_shape_validation(rng):
    with pytest.raises(DimensionError):
        pcc_metric(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    with pytest.raises(DimensionError):
        pcc_metric(rng.normal(size=5), rng.normal(size=6))
    with pytest.raises(DimensionError):
        pcc_metric(np.array([1.0]), np.array([2.0]))


def test_window_pcc_matches_rowwise_metric(rng):
    pred, truth = rng.normal(size=(9, 50)), rng.normal(size=(9, 50))
    rows = window_pcc(pred, truth)
    assert rows.shape == (9,)
    for i in range(9):
        assert rows[i] == pytest.approx(pcc_metric(truth[i], pred[i]), abs=1e-12)


def test_window_pcc_masks_degenerate_rows(rng, caplog):
    pred, truth = rng.normal(size=(4, 30)), rng.normal(size=(4, 30))
    pred[2] = 3.14
    with caplog.at_level(logging.WARNING, logger="eeg2env.evaluation"):
        rows = window_pcc(pred, truth)
    assert rows[2] == 0.0
    assert np.isfinite(rows).all()


def test_window_pcc_shape_validation(rng):
    with pytest.raises(DimensionError):
        window_pcc(rng.normal(size=(3, 10)), rng.normal(size=(4, 10)))
    with pytest.raises(DimensionError):
        window_pcc(rng.normal(size=10), rng.normal(size=10))


# ------------------------------------------------------------- batched passes


def test_reconstruct_windows_batch_invariant(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    eeg = rng.normal(size=(7, 4, 64))
    full = reconstruct_windows(codec, eeg, batch_size=64)
    pieces = reconstruct_windows(codec, eeg, batch_size=3)
    assert full.shape == (7, 64)
    # matmul blocking varies with batch shape, so equality is near-bitwise
    np.testing.assert_allclose(pieces, full, rtol=1e-12, atol=1e-12)


def test_reconstruct_windows_leaves_net_trainable(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    reconstruct_windows(codec, rng.normal(size=(3, 4, 64)))
    assert all(t.requires_grad for t in codec.parameters().values())


def test_embed_windows_batch_invariant(rng):
    clf = SubjectClassifier(TINY_CLF, rng)
    eeg = rng.normal(size=(7, 4, 64))
    full = embed_windows(clf, eeg, batch_size=64)
    pieces = embed_windows(clf, eeg, batch_size=2)
    assert full.shape == (7, 16)  # twice the fused channel count
    np.testing.assert_allclose(pieces, full, rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------------ features


def test_envelope_features_shape_and_mean_column(rng):
    env = rng.normal(size=(6, 128))
    feats = envelope_features(env, 64.0)
    assert feats.shape == (6, 2 + 5)
    np.testing.assert_allclose(feats[:, 0], env.mean(-1), atol=1e-12)
    np.testing.assert_allclose(feats[:, 1], np.log(env.var(-1) + 1e-12), atol=1e-12)


def test_envelope_features_localize_a_tone(rng):
    t = np.arange(320) / 64.0
    env = np.sin(2 * np.pi * 3.0 * t)[None, :]  # 3 Hz sits in the 2-4 Hz band
    feats = envelope_features(env, 64.0)
    bands = feats[0, 2:]
    assert bands.argmax() == 2  # bands are (0.25,1) (1,2) (2,4) (4,8) (8,16)
    feats_slow = envelope_features(np.sin(2 * np.pi * 0.5 * t)[None, :], 64.0)
    assert feats_slow[0, 2:].argmax() == 0


def test_envelope_features_reject_bad_shape(rng):
    with pytest.raises(DimensionError):
        envelope_features(rng.normal(size=100), 64.0)


def test_eeg_variance_features(rng):
    eeg = rng.normal(size=(5, 4, 100)) * np.array([1, 2, 3, 4])[None, :, None]
    feats = eeg_variance_features(eeg)
    assert feats.shape == (5, 4)
    np.testing.assert_allclose(feats, np.log(eeg.var(-1) + 1e-12))
    with pytest.raises(DimensionError):
        eeg_variance_features(eeg[0])


# -------------------------------------------------------------------- probes


def test_identity_probe_separable_classes(rng):
    n = 30
    feats = np.concatenate([rng.normal(size=(n, 3)) + 4.0,
                            rng.normal(size=(n, 3)) - 4.0])
    labels = np.repeat([0, 1], n)
    acc = identity_probe(feats, labels, seed=0)
    assert acc > 0.95


def test_identity_probe_unrelated_features_near_chance(rng):
    feats = rng.normal(size=(120, 3))
    labels = np.repeat([0, 1], 60)
    acc = identity_probe(feats, labels, seed=0)
    assert 0.2 < acc < 0.8


def test_identity_probe_preconditions(rng):
    with pytest.raises(ParameterError, match="two classes"):
        identity_probe(rng.normal(size=(40, 2)), np.zeros(40, dtype=int))
    with pytest.raises(ParameterError, match="20"):
        identity_probe(rng.normal(size=(30, 2)), np.repeat([0, 1], 15))
    with pytest.raises(DimensionError):
        identity_probe(rng.normal(size=40), np.repeat([0, 1], 20))
    with pytest.raises(DimensionError):
        identity_probe(rng.normal(size=(40, 2)), np.zeros(39, dtype=int))


def test_probe_feasible_boundary():
    assert probe_feasible(np.repeat([0, 1], 20))
    assert not probe_feasible(np.repeat([0, 1], 19))
    assert not probe_feasible(np.zeros(100, dtype=int))


def test_subject_probe_detects_offset_leak(rng):
    # subject identity written into the window mean: trivially decodable
    n, L = 25, 64
    env = rng.normal(size=(3 * n, L))
    labels = np.repeat([0, 1, 2], n)
    env += labels[:, None] * 3.0
    assert subject_probe(env, labels, 64.0, seed=0) > 0.9


def test_subject_probe_clean_envelopes_near_chance(rng):
    env = rng.normal(size=(90, 64))
    labels = np.repeat([0, 1, 2], 30)
    acc = subject_probe(env, labels, 64.0, seed=0)
    assert acc < 0.6


# ----------------------------------------------------------- report plumbing


def test_fingerprint_stable_and_order_invariant():
    a = fingerprint({"lr": 0.001, "seed": 42})
    b = fingerprint({"seed": 42, "lr": 0.001})
    assert a == b
    assert len(a) == 12
    assert int(a, 16) >= 0
    assert fingerprint({"lr": 0.002, "seed": 42}) != a


def test_mean_pcc_weights_by_windows():
    report = MetricsReport(model="codec", split="inner",
                           scores=(SubjectScore(0, 0.8, 0.1, 30),
                                   SubjectScore(1, 0.2, 0.1, 10)),
                           probe_accuracy=float("nan"), config_hash="")
    assert report.mean_pcc() == pytest.approx((0.8 * 30 + 0.2 * 10) / 40)
    empty = MetricsReport(model="codec", split="inner", scores=(),
                          probe_accuracy=float("nan"), config_hash="")
    assert math.isnan(empty.mean_pcc())


# ------------------------------------------------------------------ evaluate


def test_evaluate_inner_split(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    ds = make_dataset(rng)
    report = evaluate(codec, ds, "inner", model="codec", config_hash="abc")
    assert report.split == "inner"
    assert [s.subject_id for s in report.scores] == [0, 1, 2]
    assert sum(s.n_windows for s in report.scores) == ds.n_windows
    assert all(-1.0 <= s.mean_pcc <= 1.0 for s in report.scores)
    assert math.isnan(report.probe_accuracy)  # 4 windows per subject < 20
    assert report.config_hash == "abc"


def test_evaluate_cross_split(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    ds = make_dataset(rng, train_subjects=(7, 8))
    report = evaluate(codec, ds, "cross")
    assert report.split == "cross"
    assert len(report.scores) == 3


def test_evaluate_probe_runs_when_feasible(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    ds = make_dataset(rng, n_per_subject=20, subjects=(0, 1))
    report = evaluate(codec, ds, "inner")
    assert not math.isnan(report.probe_accuracy)
    assert 0.0 <= report.probe_accuracy <= 1.0


def test_evaluate_split_hygiene(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    leaked = make_dataset(rng, train_subjects=(2, 5))
    with pytest.raises(ParameterError, match="shares subjects"):
        evaluate(codec, leaked, "cross")
    unseen = make_dataset(rng, train_subjects=(0, 1))
    with pytest.raises(ParameterError, match="unseen"):
        evaluate(codec, unseen, "inner")


def test_evaluate_rejects_duplicate_provenance(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    ds = make_dataset(rng)
    ds.window_starts[:] = 0  # same recording ids now collide
    with pytest.raises(ParameterError, match="provenance"):
        evaluate(codec, ds, "inner")


def test_evaluate_rejects_bad_mode(rng):
    codec = EnvelopeCodec(TINY_CODEC, rng)
    with pytest.raises(ParameterError):
        evaluate(codec, make_dataset(rng), "test")
