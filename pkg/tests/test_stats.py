import numpy as np
import pytest

from layerlens.errors import DomainError, ValidationError
from layerlens.io import DatasetBlob
from layerlens.stats import (
    fit_covariance,
    fit_covariance_from_features,
    load_bundle,
    mahalanobis,
    save_bundle,
)

import oracles
from conftest import conv_stack_model, random_images


def _clustered(rng, n_per_class, dim, k, spread=0.3):
    feats, labels = [], []
    centers = rng.standard_normal((k, dim)) * 3.0
    for c in range(k):
        feats.append(centers[c] + spread * rng.standard_normal((n_per_class, dim)))
        labels.extend([c] * n_per_class)
    return np.concatenate(feats).astype(np.float64), np.asarray(labels, dtype=np.int64)


class TestFitCovariance:
    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        x, labels = _clustered(rng, 12, 5, 3)
        b = fit_covariance_from_features(x, labels, 3)
        means, cov = oracles.two_pass_covariance(x, labels, 3)
        np.testing.assert_allclose(b.class_means, means, atol=1e-6)
        np.testing.assert_allclose(b.tied_cov, cov, atol=1e-6)

    def test_one_dimensional_average(self):
        # two classes, 1-D: tied cov = (var0 + var1) / 2, biased
        x = np.array([[0.0], [2.0], [10.0], [14.0]])
        labels = np.array([0, 0, 1, 1])
        b = fit_covariance_from_features(x, labels, 2)
        v0 = np.var([0.0, 2.0])  # 1.0
        v1 = np.var([10.0, 14.0])  # 4.0
        assert b.tied_cov[0, 0] == pytest.approx((v0 + v1) / 2)

    def test_identical_samples_degenerate(self):
        x = np.ones((8, 4))
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        b = fit_covariance_from_features(x, labels, 2)
        assert b.degenerate
        assert b.kept_dims == 0

    def test_small_class_names_offender(self):
        x = np.random.default_rng(1).standard_normal((5, 3))
        labels = np.array([0, 0, 0, 0, 1])
        with pytest.raises(ValidationError) as err:
            fit_covariance_from_features(x, labels, 2)
        assert "class 1" in str(err.value)

    def test_label_out_of_range(self):
        x = np.zeros((4, 2))
        with pytest.raises(ValidationError):
            fit_covariance_from_features(x, np.array([0, 1, 2, 0]), 2)
        with pytest.raises(ValidationError):
            fit_covariance_from_features(x, np.array([0, -1, 1, 0]), 2)

    def test_labels_required(self):
        with pytest.raises(ValidationError):
            fit_covariance_from_features(np.zeros((4, 2)), None, 2)

    def test_spatial_features_pixel_averaged(self):
        rng = np.random.default_rng(2)
        spatial = rng.standard_normal((10, 3, 4, 4))
        labels = np.array([0] * 5 + [1] * 5)
        a = fit_covariance_from_features(spatial, labels, 2)
        b = fit_covariance_from_features(spatial.mean(axis=(2, 3)), labels, 2)
        np.testing.assert_allclose(a.tied_cov, b.tied_cov, atol=1e-12)


class TestMahalanobis:
    def test_zero_at_class_mean(self):
        rng = np.random.default_rng(3)
        x, labels = _clustered(rng, 20, 4, 2)
        b = fit_covariance_from_features(x, labels, 2)
        s = mahalanobis(b, b.class_means[0][None, :])
        assert s.scores[0] == pytest.approx(0.0, abs=1e-5)
        assert s.orientation == "higher_is_ood"

    def test_euclidean_reduction(self):
        # identity covariance: distance collapses to nearest-mean Euclidean
        rng = np.random.default_rng(4)
        n = 4000
        x = rng.standard_normal((2 * n, 2))
        labels = np.array([0] * n + [1] * n)
        x[labels == 1] += [10.0, 0.0]
        b = fit_covariance_from_features(x, labels, 2)
        probe = b.class_means[0] + np.array([1.0, 0.0])
        s = mahalanobis(b, probe[None, :])
        # unit step from mean 0, nine away from mean 1; cov ~ I within MC noise
        assert s.scores[0] == pytest.approx(1.0, rel=0.05)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(5)
        x, labels = _clustered(rng, 30, 6, 4)
        b = fit_covariance_from_features(x, labels, 4)
        probes = rng.standard_normal((12, 6))
        s = mahalanobis(b, probes)
        for i, p in enumerate(probes):
            want = oracles.mahalanobis_solve(b.class_means, b.tied_cov, p)
            assert s.scores[i] == pytest.approx(want, rel=1e-5)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(6)
        x, labels = _clustered(rng, 25, 5, 3)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        probes = rng.standard_normal((8, 5))
        s0 = mahalanobis(fit_covariance_from_features(x, labels, 3), probes)
        s1 = mahalanobis(fit_covariance_from_features(x @ q, labels, 3), probes @ q)
        np.testing.assert_allclose(s0.scores, s1.scores, atol=1e-5)

    def test_isotropic_scaling_exact(self):
        # scaling features by a: cov scales by a^2, distances unchanged
        rng = np.random.default_rng(7)
        x, labels = _clustered(rng, 25, 4, 2)
        probes = rng.standard_normal((6, 4))
        s0 = mahalanobis(fit_covariance_from_features(x, labels, 2), probes)
        s1 = mahalanobis(fit_covariance_from_features(x * 7.0, labels, 2), probes * 7.0)
        np.testing.assert_allclose(s0.scores, s1.scores, rtol=1e-6)

    def test_degenerate_rejected(self):
        x = np.ones((6, 3))
        labels = np.array([0, 0, 0, 1, 1, 1])
        b = fit_covariance_from_features(x, labels, 2)
        with pytest.raises(DomainError):
            mahalanobis(b, np.zeros((1, 3)))

    def test_dim_mismatch(self):
        rng = np.random.default_rng(8)
        x, labels = _clustered(rng, 10, 3, 2)
        b = fit_covariance_from_features(x, labels, 2)
        with pytest.raises(ValidationError):
            mahalanobis(b, np.zeros((1, 5)))


class TestFitFromModel:
    def test_tap_features_round(self):
        rng = np.random.default_rng(9)
        graph = conv_stack_model(rng)
        images = random_images(rng, 24, 8, 8, 3)
        labels = np.asarray(rng.integers(0, 4, 24), dtype=np.int64)
        while np.bincount(labels, minlength=4).min() < 2:
            labels = np.asarray(rng.integers(0, 4, 24), dtype=np.int64)
        train = DatasetBlob(name="t", images=images, labels=labels)
        b = fit_covariance(graph, train, "relu3")
        assert b.class_count == 4
        assert b.feature_dim == 10  # relu3 output width

    def test_unlabeled_rejected(self):
        rng = np.random.default_rng(10)
        graph = conv_stack_model(rng)
        blob = DatasetBlob(name="u", images=random_images(rng, 4, 8, 8, 3), labels=None)
        with pytest.raises(ValidationError) as err:
            fit_covariance(graph, blob, "relu3")
        assert "u" in str(err.value)


class TestBundleIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        x, labels = _clustered(rng, 15, 5, 3)
        b = fit_covariance_from_features(x, labels, 3, tap="relu3")
        out = save_bundle(b, tmp_path / "bundle")
        b2 = load_bundle(out)
        # blob payloads are float32; agreement is to that precision
        np.testing.assert_allclose(b.class_means, b2.class_means, rtol=1e-6)
        np.testing.assert_allclose(b.tied_cov, b2.tied_cov, rtol=1e-6)
        assert b.kept_dims == b2.kept_dims
        assert b2.tap.layer_id == "relu3"
        probes = rng.standard_normal((7, 5))
        np.testing.assert_allclose(mahalanobis(b, probes).scores,
                                   mahalanobis(b2, probes).scores, rtol=1e-4)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(ValidationError):
            load_bundle(tmp_path / "nope")
