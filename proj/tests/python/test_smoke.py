"""End-to-end smoke tests for the python surface of the C++ core."""

import json
import math
import pathlib

import numpy as np
import pytest

import metavrf


def test_feature_map_matches_numpy_formula():
    freqs, phases = metavrf.sample_basis(seed=3, bases=50, dim=4, scale="unbiased")
    assert freqs.shape == (50, 4)
    assert phases.shape == (1, 50)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 4))
    z = metavrf.feature_map(x, freqs, phases, scale="unbiased")
    expected = math.sqrt(2.0 / 50.0) * np.cos(x @ freqs.T + phases)
    np.testing.assert_allclose(z, expected, atol=1e-12)


def test_many_bases_approximate_the_gaussian_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 3))
    freqs, phases = metavrf.sample_basis(seed=9, bases=200_000, dim=3, scale="unbiased")
    z = metavrf.feature_map(x, freqs, phases, scale="unbiased")
    approx = z @ z.T
    exact = metavrf.rbf_exact(x, x, sigma=1.0)
    np.testing.assert_allclose(approx, exact, atol=0.02)


def test_ridge_solves_the_regularized_system():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(8, 8))
    k = a @ a.T
    y = rng.normal(size=(2, 8))
    lam = 0.37
    alpha = metavrf.ridge_fit(k, y, lam)
    np.testing.assert_allclose(alpha @ (lam * np.eye(8) + k), y, atol=1e-10)
    preds = metavrf.ridge_predict(alpha, lam, k[:, :5])
    np.testing.assert_allclose(preds, alpha @ k[:, :5], atol=1e-12)


def test_kl_closed_form_values():
    mu = np.zeros((1, 3))
    lv = np.zeros((1, 3))
    assert metavrf.kl_diag_gaussians(mu, lv, mu, lv) == pytest.approx(0.0, abs=1e-15)
    shifted = mu + 1.0
    assert metavrf.kl_diag_gaussians(shifted, lv, mu, lv) == pytest.approx(1.5)
    rng = np.random.default_rng(3)
    mq, lq = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    mp, lp = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    expected = 0.5 * np.sum(lp - lq + (np.exp(lq) + (mq - mp) ** 2) / np.exp(lp) - 1.0)
    assert metavrf.kl_diag_gaussians(mq, lq, mp, lp) == pytest.approx(expected, abs=1e-12)


def test_bandwidth_is_mean_pairwise_distance():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert metavrf.mean_pairwise_bandwidth(x) == pytest.approx(5.0)


def test_train_then_evaluate_roundtrip(tmp_path: pathlib.Path):
    config = {
        "task": "blobs",
        "mode": "lstm",
        "ways": 5,
        "shots": 1,
        "query": 3,
        "bases": 16,
        "iterations": 8,
        "batch": 2,
        "seed": 11,
        "blob_classes": 8,
        "blob_dim": 8,
        "blob_examples": 30,
        "out_dir": str(tmp_path),
    }
    summary = metavrf.train(config)
    assert summary["iterations"] == 8
    assert math.isfinite(summary["final_loss"])
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "metrics.jsonl").exists()
    with open(tmp_path / "metrics.jsonl") as fh:
        first = json.loads(fh.readline())
    assert first["iteration"] == 1

    report = metavrf.evaluate(str(tmp_path / "checkpoint.bin"), episodes=20)
    assert report["metric"] == "accuracy"
    assert report["episodes"] == 20
    assert len(report["per_episode"]) == 20
    assert 0.0 <= report["mean"] <= 1.0

    repeat = metavrf.train(config)
    assert repeat["final_loss"] == summary["final_loss"]


def test_gradcheck_audits_every_primitive():
    results = metavrf.gradcheck(tol=1e-4)
    assert len(results) >= 10
    failed = [r["name"] for r in results if not r["passed"]]
    assert failed == []
