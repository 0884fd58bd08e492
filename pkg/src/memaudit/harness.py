"""Planted-memorization validation.

Trained generative models are not reproducible desk-side, so detector
quality is validated the other way around: build a "synthetic" set with
known copies, noisy copies, shifted copies and fresh images, audit it,
and score precision/recall against the planted ground truth.

All randomness comes from the documented splitmix64 stream in `_rng`;
image i uses the derived stream seed mix64(run seed) XOR i, so outputs
are bit-identical for a given config regardless of generation order or
worker count. The run seed goes through the mix64 finalizer first
because raw nearby seeds (7 and 8, say) would otherwise share per-image
streams across runs and silently plant duplicates. Fresh images are
zero-padded separable Gaussian blurs (sigma 8 px, radius 24) of white
noise, moment-matched per channel to the training set: unsmoothed noise
would be trivially uncorrelated with everything and make baselines
uninformative.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from ._rng import SplitMix64, mix64
from .core import Dataset, ImageRecord
from .errors import InvalidArgumentError
from .report import FlaggedPair

FRESH_FIELD_SIGMA = 8.0

KINDS = ("copy", "noisy", "shift", "fresh")


@dataclass(frozen=True)
class PlantConfig:
    """How to compose a planted synthetic set.

    Kind counts come from largest-remainder rounding of the fractions
    over n_output; whatever p_copy + p_noisy + p_shift leaves over
    becomes fresh images. noise_sigma is on the 0-255 intensity scale.
    """

    n_output: int
    p_copy: float = 0.0
    p_noisy: float = 0.0
    p_shift: float = 0.0
    noise_sigma: float = 5.0
    shift_pixels: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_output < 1:
            raise InvalidArgumentError("n_output must be positive")
        probs = (self.p_copy, self.p_noisy, self.p_shift)
        if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1.0 + 1e-12:
            raise InvalidArgumentError(
                "p_copy, p_noisy, p_shift must lie in [0, 1] and sum to <= 1"
            )
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if self.shift_pixels < 0:
            raise InvalidArgumentError("shift_pixels must be >= 0")

    def kind_counts(self) -> dict[str, int]:
        """Largest-remainder rounding; ties resolved in KINDS order."""
        fracs = {
            "copy": self.p_copy,
            "noisy": self.p_noisy,
            "shift": self.p_shift,
        }
        fracs["fresh"] = 1.0 - sum(fracs.values())
        quotas = {k: fracs[k] * self.n_output for k in KINDS}
        counts = {k: int(np.floor(quotas[k] + 1e-9)) for k in KINDS}
        leftover = self.n_output - sum(counts.values())
        order = sorted(
            KINDS, key=lambda k: (-(quotas[k] - counts[k]), KINDS.index(k))
        )
        for k in order[:leftover]:
            counts[k] += 1
        return counts


@dataclass(frozen=True)
class GroundTruthEntry:
    output_id: str
    kind: str
    source_id: str  # empty for fresh images


@dataclass(frozen=True)
class GroundTruth:
    entries: tuple[GroundTruthEntry, ...]

    def by_id(self) -> dict[str, GroundTruthEntry]:
        return {e.output_id: e for e in self.entries}

    def kind_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in KINDS}
        for e in self.entries:
            counts[e.kind] += 1
        return counts


def _blur_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _smooth_field(rng: SplitMix64, height: int, width: int) -> np.ndarray:
    """Zero-padded separable Gaussian blur of splitmix white noise."""
    kernel = _blur_kernel(FRESH_FIELD_SIGMA)
    field = rng.gaussian(height * width).reshape(height, width)
    field = correlate1d(field, kernel, axis=0, mode="constant")
    return correlate1d(field, kernel, axis=1, mode="constant")


def _channel_moments(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the whole training set, one pass."""
    c, h, w = train.shape
    total = np.zeros(c)
    total_sq = np.zeros(c)
    for img in train.images:
        chw = img.chw().astype(np.float64)
        total += chw.sum(axis=(1, 2))
        total_sq += (chw * chw).sum(axis=(1, 2))
    count = len(train) * h * w
    means = total / count
    variances = np.maximum(total_sq / count - means * means, 0.0)
    return means, np.sqrt(variances)


def _fresh_image(
    rng: SplitMix64, shape, means: np.ndarray, stds: np.ndarray
) -> np.ndarray:
    c, h, w = shape
    out = np.empty((c, h, w), dtype=np.float64)
    for ch in range(c):
        field = _smooth_field(rng, h, w)
        std = field.std()
        if std > 0:
            field = (field - field.mean()) / std * stds[ch] + means[ch]
        else:
            field = np.full((h, w), means[ch])
        out[ch] = field
    return np.clip(out, 0.0, 255.0)


_SHIFT_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def _shifted(pixels: np.ndarray, shape, dy: int, dx: int) -> np.ndarray:
    c, h, w = shape
    src = pixels.reshape(c, h, w)
    out = np.zeros_like(src)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = src[:, ys_src, xs_src]
    return out


def plant(train: Dataset, cfg: PlantConfig) -> tuple[Dataset, GroundTruth]:
    """Build a synthetic dataset with known planted memorization.

    Output order is copies, then noisy copies, then shifted copies, then
    fresh images; sources are drawn per output from its own derived
    stream. Copies are bit-identical; noisy adds clamped Gaussian noise;
    shift translates by shift_pixels in a random cardinal direction with
    zero fill; fresh is a moment-matched smooth field.
    """
    if len(train) == 0:
        raise InvalidArgumentError("train dataset is empty")
    counts = cfg.kind_counts()
    kinds = [k for k in KINDS for _ in range(counts[k])]
    shape = train.shape
    means = stds = None
    if counts["fresh"]:
        means, stds = _channel_moments(train)

    width = max(4, len(str(cfg.n_output - 1)))
    run_seed = mix64(cfg.seed)
    images: list[ImageRecord] = []
    entries: list[GroundTruthEntry] = []
    for i, kind in enumerate(kinds):
        rng = SplitMix64(run_seed ^ i)
        out_id = f"synth_{i:0{width}d}"
        source_id = ""
        if kind == "fresh":
            pixels = _fresh_image(rng, shape, means, stds).reshape(-1)
        else:
            src = train.images[rng.below(len(train))]
            source_id = src.id
            if kind == "copy":
                pixels = src.pixels
            elif kind == "noisy":
                noise = rng.gaussian(src.pixels.size) * cfg.noise_sigma
                pixels = np.clip(src.pixels.astype(np.float64) + noise, 0.0, 255.0)
            else:  # shift
                dy, dx = _SHIFT_DIRECTIONS[rng.below(4)]
                pixels = _shifted(
                    src.pixels, shape, dy * cfg.shift_pixels, dx * cfg.shift_pixels
                ).reshape(-1)
        images.append(
            ImageRecord(out_id, *shape, np.asarray(pixels, dtype=np.float32))
        )
        entries.append(GroundTruthEntry(out_id, kind, source_id))
    dataset = Dataset(f"planted-{cfg.seed}", "synthetic", tuple(images))
    return dataset, GroundTruth(tuple(entries))


def generate_train_set(
    n: int,
    channels: int,
    height: int,
    width: int,
    seed: int,
    mean: float = 127.0,
    std: float = 40.0,
    name: str = "generated-train",
    role: str = "train",
) -> Dataset:
    """Training-like dataset of smooth fields (the harness's null model).

    Use a seed different from any PlantConfig seed so planted fresh
    images are not replicas of the training images.
    """
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    means = np.full(channels, float(mean))
    stds = np.full(channels, float(std))
    run_seed = mix64(seed)
    images = []
    for i in range(n):
        rng = SplitMix64(run_seed ^ i)
        pixels = _fresh_image(rng, (channels, height, width), means, stds)
        images.append(
            ImageRecord(
                f"train_{i:05d}", channels, height, width,
                pixels.reshape(-1).astype(np.float32),
            )
        )
    return Dataset(name, role, tuple(images))


# ---------------------------------------------------------------------------
# Detector scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorScore:
    """Precision/recall of a flagging run against planted ground truth.

    precision is None when nothing was flagged; recall is None when no
    positives were planted. source_attribution is the fraction of
    flagged positives whose flagged reference is the true source.
    """

    n_flagged: int
    n_positive: int
    true_positives: int
    precision: Optional[float]
    recall: Optional[float]
    per_kind_recall: dict[str, float]
    source_attribution: Optional[float]


def evaluate_detector(
    flags: Sequence[FlaggedPair],
    truth: GroundTruth,
    positive_kinds: Sequence[str] = ("copy", "noisy"),
) -> DetectorScore:
    """Score flagged pairs against ground truth.

    Positives are outputs whose kind is in positive_kinds. A flagged
    positive counts toward recall regardless of which reference it
    matched; source attribution is reported separately.
    """
    by_id = truth.by_id()
    positive_kinds = set(positive_kinds)
    unknown = [f.query_id for f in flags if f.query_id not in by_id]
    if unknown:
        raise InvalidArgumentError(f"flags reference unknown ids: {unknown[:5]}")

    flagged = {}
    for f in flags:
        flagged.setdefault(f.query_id, f)
    positives = {e.output_id for e in truth.entries if e.kind in positive_kinds}
    tp_ids = positives & flagged.keys()

    kind_totals = truth.kind_counts()
    per_kind: dict[str, float] = {}
    for kind in KINDS:
        if kind_totals[kind]:
            hit = sum(
                1 for e in truth.entries if e.kind == kind and e.output_id in flagged
            )
            per_kind[kind] = hit / kind_totals[kind]

    attributed = None
    sourced = [qid for qid in tp_ids if by_id[qid].source_id]
    if sourced:
        correct = sum(
            1 for qid in sourced if flagged[qid].reference_id == by_id[qid].source_id
        )
        attributed = correct / len(sourced)

    return DetectorScore(
        n_flagged=len(flagged),
        n_positive=len(positives),
        true_positives=len(tp_ids),
        precision=len(tp_ids) / len(flagged) if flagged else None,
        recall=len(tp_ids) / len(positives) if positives else None,
        per_kind_recall=per_kind,
        source_attribution=attributed,
    )


# ---------------------------------------------------------------------------
# Ground-truth files
# ---------------------------------------------------------------------------


def save_ground_truth(truth: GroundTruth, path) -> None:
    data = [asdict(e) for e in truth.entries]
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def load_ground_truth(path) -> GroundTruth:
    data = json.loads(Path(path).read_text("utf-8"))
    return GroundTruth(tuple(GroundTruthEntry(**e) for e in data))
