"""Secondary similarity metrics and distribution metrics.

SSIM and mutual information compare image pairs (slower than correlation
by an order of magnitude or two, which is why they are not the primary
audit signal); FID and Inception Score summarize whole sets from
externally produced embedding / class-probability files. No neural
network lives here: the statistics are the implementable content.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .core import ImageRecord
from .errors import InvalidArgumentError
from .ingest import EmbeddingSet


@dataclass(frozen=True)
class SsimParams:
    """Gaussian-window mean-SSIM parameters.

    C1 = (k1*L)^2 and C2 = (k2*L)^2 stabilize the luminance and
    contrast terms; L is the dynamic range of the pixel values.
    """

    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 255.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidArgumentError("window must be an odd positive integer")
        if min(self.sigma, self.dynamic_range, self.k1, self.k2) <= 0:
            raise InvalidArgumentError("sigma, dynamic_range, k1, k2 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter restricted to the valid region."""
    r = (kernel.size - 1) // 2
    out = correlate1d(plane, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[r : plane.shape[0] - r, r : plane.shape[1] - r]


def _ssim_plane(x: np.ndarray, y: np.ndarray, params: SsimParams) -> float:
    kernel = _gaussian_kernel(params.window, params.sigma)
    mu_x = _windowed_mean(x, kernel)
    mu_y = _windowed_mean(y, kernel)
    xx = _windowed_mean(x * x, kernel) - mu_x * mu_x
    yy = _windowed_mean(y * y, kernel) - mu_y * mu_y
    xy = _windowed_mean(x * y, kernel) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(a: ImageRecord, b: ImageRecord, params: Optional[SsimParams] = None) -> float:
    """Mean SSIM over all valid window positions (no padding).

    Multi-channel images are scored per channel and averaged. Images
    smaller than the window are rejected.
    """
    params = params or SsimParams()
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {a.id!r} {a.shape} vs {b.id!r} {b.shape}"
        )
    if a.height < params.window or a.width < params.window:
        raise InvalidArgumentError(
            f"image {a.height}x{a.width} smaller than {params.window}-pixel window"
        )
    values = [
        _ssim_plane(
            a.channel(c).astype(np.float64), b.channel(c).astype(np.float64), params
        )
        for c in range(a.channels)
    ]
    return float(np.mean(values))


def _bin_indices(values: np.ndarray, bins: int) -> Optional[np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return None  # constant image: a single occupied bin
    idx = np.floor((values - lo) * (bins / (hi - lo))).astype(np.intp)
    return np.minimum(idx, bins - 1)


def mutual_information(a: ImageRecord, b: ImageRecord, bins: int = 64) -> float:
    """Mutual information in bits from a joint intensity histogram.

    Each image is binned over its own [min, max] range with ``bins``
    equal-width bins (maxima land in the last bin); a constant image has
    a single occupied bin, so its MI is 0 by convention.
    """
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {a.id!r} {a.shape} vs {b.id!r} {b.shape}"
        )
    if bins < 2:
        raise InvalidArgumentError("bins must be at least 2")
    ia = _bin_indices(a.pixels.astype(np.float64), bins)
    ib = _bin_indices(b.pixels.astype(np.float64), bins)
    if ia is None or ib is None:
        return 0.0
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    joint = joint.reshape(bins, bins) / joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(pa, pb)
    return float(np.sum(joint[nz] * np.log2(joint[nz] / outer[nz])))


@dataclass(frozen=True)
class GaussianStats:
    """Mean vector and unbiased covariance of an embedding set."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise InvalidArgumentError(
                f"sigma shape {sigma.shape} does not match mu dim {mu.size}"
            )
        if self.n < 2:
            raise InvalidArgumentError("need at least 2 samples")
        if np.abs(sigma - sigma.T).max() > 1e-9:
            raise InvalidArgumentError("sigma must be symmetric within 1e-9")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def gaussian_stats(emb: EmbeddingSet) -> GaussianStats:
    """Column means plus unbiased (N-1) sample covariance."""
    n = len(emb)
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 rows, got {n}")
    rows = emb.rows.astype(np.float64)
    mu = rows.mean(axis=0)
    centered = rows - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu, sigma, n)


def matrix_sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues from round-off are clamped at zero, so the
    result R satisfies ||R @ R - S||_F <= 1e-6 * (1 + ||S||_F) for any
    matrix that is PSD up to noise. Asymmetry beyond 1e-8 is rejected.
    """
    s = np.asarray(matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got {s.shape}")
    if np.abs(s - s.T).max() > 1e-8 * max(1.0, float(np.abs(s).max())):
        raise InvalidArgumentError("matrix is not symmetric within tolerance")
    eigvals, eigvecs = np.linalg.eigh((s + s.T) / 2.0)
    eigvals = np.maximum(eigvals, 0.0)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid(g1: GaussianStats, g2: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    ||mu1 - mu2||^2 + tr(sigma1 + sigma2 - 2 * sqrt(sigma1^1/2 sigma2
    sigma1^1/2)), using the symmetrized product inside the square root
    for numerical stability. Tiny negative round-off (> -1e-6) clamps
    to 0.
    """
    if g1.dim != g2.dim:
        raise InvalidArgumentError(f"dim mismatch: {g1.dim} vs {g2.dim}")
    root1 = matrix_sqrt_psd(g1.sigma)
    inner = root1 @ g2.sigma @ root1
    cross = matrix_sqrt_psd((inner + inner.T) / 2.0)
    delta = g1.mu - g2.mu
    value = float(
        delta @ delta + np.trace(g1.sigma) + np.trace(g2.sigma) - 2.0 * np.trace(cross)
    )
    if value < 0.0:
        if value < -1e-6:
            raise InvalidArgumentError(
                f"FID came out {value}; inputs are not valid covariances"
            )
        value = 0.0
    return value


def inception_score(probs: EmbeddingSet, splits: int = 10) -> tuple[float, float]:
    """Inception Score from per-sample class-probability rows.

    Per split (contiguous, near-equal): IS = exp(mean KL(p(y|x) || mean
    p(y|x))), natural log. Returns the mean and population standard
    deviation over splits; fewer than 2*splits rows fall back to one
    split. Rows must be non-negative and sum to 1 within 1e-5.
    """
    if splits < 1:
        raise InvalidArgumentError("splits must be at least 1")
    rows = probs.rows.astype(np.float64)
    sums = rows.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > 1e-5) | (rows < 0).any(axis=1))
    if bad.size:
        raise InvalidArgumentError(
            f"row {probs.ids[bad[0]]!r} is not a probability vector "
            f"(sum {sums[bad[0]]:.6f})"
        )
    n = rows.shape[0]
    if n < 2 * splits:
        splits = 1
    scores = []
    for chunk in np.array_split(rows, splits):
        marginal = chunk.mean(axis=0)
        nz = chunk > 0
        logs = np.zeros_like(chunk)
        logs[nz] = np.log(chunk[nz]) - np.log(marginal[np.nonzero(nz)[1]])
        kl = (chunk * logs).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))
