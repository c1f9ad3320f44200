import warnings

import numpy as np
import pytest
import scipy.linalg
import torch

from fex4d.errors import LabelSpaceMismatchError, MissingClassError, NonFiniteFeaturesError
from fex4d.evaluation import (EvalReport, FeatureGaussian, ICTrainSettings, IndependentClassifier, accuracy,
                              evaluate_generation, fid, frechet_distance, ic_features, ic_predict, train_ic,
                              write_report)

from helpers import toy_corpus

QUICK = ICTrainSettings(epochs=15, batch_size=16, lr=3e-3, patience=15)


@pytest.fixture(scope="module")
def toy_ic():
    seqs, labels = toy_corpus(80)
    ic, val = train_ic(seqs, labels, QUICK, hidden=16)
    return ic, val


def fid_scipy(a, b):
    ma, mb = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(ca @ cb).real
    return float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * covmean))


def test_separable_toy_is_learned(toy_ic):
    ic, val = toy_ic
    seqs, labels = toy_corpus(40, seed=5)
    assert val == 1.0
    assert accuracy(ic_predict(ic, seqs), labels) == 1.0


def test_variable_lengths_match_single_evaluation(toy_ic):
    ic, _ = toy_ic
    seqs, _ = toy_corpus(4)
    seqs = [seqs[0][:7], seqs[1], seqs[2][:10], seqs[3][:3]]
    together = ic_features(ic, seqs)
    alone = np.concatenate([ic_features(ic, [s]) for s in seqs])
    np.testing.assert_allclose(together, alone, atol=1e-5)


def test_shuffled_labels_near_chance():
    seqs, _ = toy_corpus(120, seed=1)
    labels = np.random.default_rng(0).integers(0, 2, 120)
    ic, _ = train_ic(seqs[:80], labels[:80], QUICK, hidden=16)
    acc = accuracy(ic_predict(ic, seqs[80:]), labels[80:])
    assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / 40)  # three standard errors of chance


def test_zero_lr_leaves_weights_at_init():
    seqs, labels = toy_corpus(30)
    ic, _ = train_ic(seqs, labels, ICTrainSettings(epochs=2, lr=0.0, seed=4), hidden=8)
    torch.manual_seed(4)
    fresh = IndependentClassifier(2, 68, 8)
    for k, v in fresh.state_dict().items():
        if not k.startswith("in_"):
            torch.testing.assert_close(ic.state_dict()[k], v, rtol=0, atol=0)


def test_missing_class_rejected():
    seqs, labels = toy_corpus(10)
    with pytest.raises(MissingClassError):
        train_ic(seqs, np.zeros(10, dtype=int), n_classes=2)


def test_accuracy_hand_value():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75


def test_fid_self_zero():
    a = np.random.default_rng(0).normal(size=(500, 6))
    assert fid(a, a) <= 1e-6


def test_fid_analytic_mean_shift():
    rng = np.random.default_rng(1)
    mu = np.array([1.0, -0.5, 0.25, 2.0])
    a = rng.normal(size=(100_000, 4))
    b = rng.normal(size=(100_000, 4)) + mu
    assert fid(a, b) == pytest.approx(mu @ mu, rel=0.02)


def test_fid_analytic_gaussians():
    # N(0, I) vs N(0, 4I) in D dims: (1 + 4 - 2*2) * D
    ga = FeatureGaussian(np.zeros(3), np.eye(3))
    gb = FeatureGaussian(np.zeros(3), 4 * np.eye(3))
    assert frechet_distance(ga, gb) == pytest.approx(3.0, abs=1e-12)


def test_fid_monotone_in_noise():
    rng = np.random.default_rng(2)
    ref = rng.normal(size=(4000, 5))
    base = rng.normal(size=(4000, 5))
    vals = [fid(ref, base + s * rng.normal(size=base.shape) + s) for s in (0.0, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_fid_symmetric_and_matches_scipy():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5)) + 0.3
    assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-9)
    assert fid(a, b) == pytest.approx(fid_scipy(a, b), rel=1e-6)


def test_fid_small_sample_warns():
    a = np.random.default_rng(4).normal(size=(3, 4))
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        val = fid(a, a)
    assert np.isfinite(val)


def test_fid_non_finite_rejected():
    a = np.zeros((10, 2))
    a[3, 1] = np.nan
    with pytest.raises(NonFiniteFeaturesError):
        fid(a, np.zeros((10, 2)))


def test_evaluate_generation(toy_ic):
    ic, _ = toy_ic
    seqs, labels = toy_corpus(20, seed=7)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = evaluate_generation(seqs, labels, seqs, ic)
    assert rep.accuracy == 1.0 and rep.fid <= 1e-6 and rep.n_generated == 20
    with pytest.raises(LabelSpaceMismatchError):
        evaluate_generation(seqs, np.full(20, 3), seqs, ic)


def test_write_report(tmp_path):
    rows = {"guided": EvalReport(0.9, 1.25, 64, 80), "unguided": EvalReport(0.5, 3.0, 64, 80)}
    write_report(tmp_path / "report.txt", rows)
    text = (tmp_path / "report.txt").read_text().splitlines()
    assert "guided.acc=0.9" in text and "unguided.fid=3" in text and "guided.n_reference=80" in text
    csv_rows = (tmp_path / "report.csv").read_text().splitlines()
    assert csv_rows[0] == "setting,acc,fid,n_generated,n_reference" and len(csv_rows) == 3
