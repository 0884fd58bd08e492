import numpy as np
import pytest

from memaudit.core import ImageRecord
from memaudit.errors import InvalidArgumentError
from memaudit.ingest import EmbeddingSet
from memaudit.metrics import (
    GaussianStats,
    SsimParams,
    fid,
    gaussian_stats,
    inception_score,
    matrix_sqrt_psd,
    mutual_information,
    ssim,
)

from conftest import image


def noise_image(seed, shape=(16, 16), id="n", lo=0, hi=256):
    rng = np.random.default_rng(seed)
    return image(rng.integers(lo, hi, shape).astype(np.float32), id=id)


class TestSsim:
    def test_self_similarity(self):
        img = noise_image(0)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_analytic(self):
        a = image(np.zeros((16, 16), np.float32), id="black")
        b = image(np.full((16, 16), 255.0, np.float32), id="white")
        # (2*0*255 + C1) / (0 + 255^2 + C1) with C1 = (0.01*255)^2
        expected = 6.5025 / (255.0**2 + 6.5025)
        got = ssim(a, b)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(1.0000e-4, abs=1e-8)

    def test_symmetry(self):
        for seed in range(5):
            a, b = noise_image(seed, id="a"), noise_image(seed + 50, id="b")
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_bounded(self):
        for seed in range(5):
            value = ssim(noise_image(seed, id="a"), noise_image(seed + 9, id="b"))
            assert -1.0 <= value <= 1.0

    def test_multichannel_averages(self):
        rng = np.random.default_rng(3)
        da = rng.integers(0, 256, (2, 16, 16)).astype(np.float32)
        db = rng.integers(0, 256, (2, 16, 16)).astype(np.float32)
        per_channel = np.mean([
            ssim(image(da[c], id="a"), image(db[c], id="b")) for c in range(2)
        ])
        assert ssim(image(da, id="a"), image(db, id="b")) == pytest.approx(per_channel, abs=1e-12)

    def test_smaller_than_window_rejected(self):
        a = image(np.zeros((8, 8), np.float32), id="s")
        with pytest.raises(InvalidArgumentError, match="window"):
            ssim(a, a)

    def test_even_window_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SsimParams(window=10)


class TestMutualInformation:
    def test_two_value_self_is_one_bit(self):
        img = image([0.0, 255.0] * 8, id="bi")
        assert mutual_information(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_constant_partner_is_zero(self):
        a = noise_image(1, id="a")
        c = image(np.full((16, 16), 7.0, np.float32), id="c")
        assert mutual_information(a, c) == 0.0
        assert mutual_information(c, c) == 0.0

    def test_symmetry(self):
        for seed in range(5):
            a, b = noise_image(seed, id="a"), noise_image(seed + 20, id="b")
            assert mutual_information(a, b) == pytest.approx(
                mutual_information(b, a), abs=1e-12
            )

    def test_self_mi_equals_marginal_entropy(self):
        for seed in range(3):
            img = noise_image(seed, id="h")
            bins = 32
            vals = img.pixels.astype(np.float64)
            idx = np.floor(
                (vals - vals.min()) * (bins / (vals.max() - vals.min()))
            ).astype(int)
            idx = np.minimum(idx, bins - 1)
            p = np.bincount(idx, minlength=bins) / vals.size
            entropy = -np.sum(p[p > 0] * np.log2(p[p > 0]))
            assert mutual_information(img, img, bins=bins) == pytest.approx(
                entropy, abs=1e-9
            )

    def test_non_negative(self):
        for seed in range(5):
            assert mutual_information(
                noise_image(seed, id="a"), noise_image(seed + 31, id="b")
            ) >= 0.0

    def test_bins_validated(self):
        a = noise_image(2)
        with pytest.raises(InvalidArgumentError):
            mutual_information(a, a, bins=1)


class TestGaussianStats:
    def test_hand_example(self):
        emb = EmbeddingSet(("a", "b"), 2, np.array([[0, 0], [2, 2]], np.float32))
        stats = gaussian_stats(emb)
        np.testing.assert_allclose(stats.mu, [1.0, 1.0])
        np.testing.assert_allclose(stats.sigma, [[2.0, 2.0], [2.0, 2.0]])

    def test_identical_rows_zero_sigma(self):
        emb = EmbeddingSet(("a", "b", "c"), 2, np.ones((3, 2), np.float32))
        np.testing.assert_allclose(gaussian_stats(emb).sigma, np.zeros((2, 2)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        rows = rng.normal(0, 1, (10, 3)).astype(np.float32)
        ids = tuple(f"r{i}" for i in range(10))
        perm = rng.permutation(10)
        s1 = gaussian_stats(EmbeddingSet(ids, 3, rows))
        s2 = gaussian_stats(EmbeddingSet(tuple(ids[p] for p in perm), 3, rows[perm]))
        np.testing.assert_allclose(s1.mu, s2.mu, atol=1e-12)
        np.testing.assert_allclose(s1.sigma, s2.sigma, atol=1e-12)

    def test_single_row_rejected(self):
        emb = EmbeddingSet(("a",), 2, np.ones((1, 2), np.float32))
        with pytest.raises(InvalidArgumentError):
            gaussian_stats(emb)


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(
            matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12
        )

    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.normal(0, 1, (5, 5))
            s = a.T @ a
            r = matrix_sqrt_psd(s)
            err = np.linalg.norm(r @ r - s)
            assert err <= 1e-6 * (1 + np.linalg.norm(s))

    def test_asymmetric_rejected(self):
        with pytest.raises(InvalidArgumentError, match="symmetric"):
            matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def gauss_1d(mu, var):
    return GaussianStats(np.array([mu]), np.array([[var]]), n=2)


class TestFid:
    def test_identical_distributions(self):
        rng = np.random.default_rng(6)
        emb = EmbeddingSet(
            tuple(f"r{i}" for i in range(20)), 4,
            rng.normal(0, 1, (20, 4)).astype(np.float32),
        )
        g = gaussian_stats(emb)
        assert fid(g, g) == pytest.approx(0.0, abs=1e-6)

    def test_mean_shift_1d(self):
        assert fid(gauss_1d(0, 1), gauss_1d(1, 1)) == pytest.approx(1.0, abs=1e-9)

    def test_variance_change_1d(self):
        assert fid(gauss_1d(0, 1), gauss_1d(0, 4)) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric_and_non_negative(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            e1 = EmbeddingSet(
                tuple(f"a{i}" for i in range(12)), 3,
                rng.normal(0, 1, (12, 3)).astype(np.float32),
            )
            e2 = EmbeddingSet(
                tuple(f"b{i}" for i in range(15)), 3,
                rng.normal(1, 2, (15, 3)).astype(np.float32),
            )
            g1, g2 = gaussian_stats(e1), gaussian_stats(e2)
            assert fid(g1, g2) == pytest.approx(fid(g2, g1), abs=1e-6)
            assert fid(g1, g2) >= 0.0

    def test_dim_mismatch(self):
        g1 = gauss_1d(0, 1)
        g2 = GaussianStats(np.zeros(2), np.eye(2), n=2)
        with pytest.raises(InvalidArgumentError):
            fid(g1, g2)


class TestInceptionScore:
    def test_uniform_rows(self):
        rows = np.full((30, 10), 0.1, np.float32)
        emb = EmbeddingSet(tuple(f"r{i}" for i in range(30)), 10, rows)
        mean, std = inception_score(emb)
        assert mean == pytest.approx(1.0, abs=1e-9)
        assert std == pytest.approx(0.0, abs=1e-9)

    def test_two_one_hot_rows(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        emb = EmbeddingSet(("a", "b"), 2, rows)
        mean, _ = inception_score(emb, splits=1)
        assert mean == pytest.approx(2.0, abs=1e-9)

    def test_identical_one_hot_rows(self):
        rows = np.zeros((8, 5), np.float32)
        rows[:, 2] = 1.0
        emb = EmbeddingSet(tuple(f"r{i}" for i in range(8)), 5, rows)
        mean, _ = inception_score(emb, splits=1)
        assert mean == pytest.approx(1.0, abs=1e-9)

    def test_bounds(self):
        rng = np.random.default_rng(8)
        raw = rng.random((40, 7))
        rows = (raw / raw.sum(axis=1, keepdims=True)).astype(np.float32)
        # float32 rounding moves row sums slightly off 1; renormalize in f64.
        rows64 = rows.astype(np.float64)
        rows = (rows64 / rows64.sum(axis=1, keepdims=True)).astype(np.float32)
        emb = EmbeddingSet(tuple(f"r{i}" for i in range(40)), 7, rows)
        mean, _ = inception_score(emb, splits=4)
        assert 1.0 - 1e-9 <= mean <= 7.0 + 1e-9

    def test_small_n_falls_back_to_one_split(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], np.float32)
        emb = EmbeddingSet(("a", "b", "c"), 2, rows)
        mean, std = inception_score(emb, splits=10)
        assert std == 0.0  # one split only

    def test_bad_row_named(self):
        rows = np.array([[0.9, 0.3], [0.5, 0.5]], np.float32)
        emb = EmbeddingSet(("weird", "fine"), 2, rows)
        with pytest.raises(InvalidArgumentError, match="weird"):
            inception_score(emb)
