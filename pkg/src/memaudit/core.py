"""Domain types and the scalar reference correlation.

Images are stored as flat float32 arrays in channel-major order (channel,
then row, then column); all correlation arithmetic accumulates in float64.
`pearson` here is the plain two-pass covariance formula and serves as the
oracle against which the blocked engine in `correlate` is verified. The
identity it must satisfy:

    pearson(a, b) == dot(standardize(a).values, standardize(b).values)

within 1e-9 for every non-constant pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, UndefinedCorrelationError

# Selected pixels with population variance below this are treated as
# constant: their correlation is undefined, never zero.
VARIANCE_FLOOR = 1e-12


def _as_pixels(values, expected_len: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size != expected_len:
        raise InvalidArgumentError(
            f"{what}: expected {expected_len} values, got {arr.size}"
        )
    if not np.isfinite(arr).all():
        raise InvalidArgumentError(f"{what}: pixel values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageRecord:
    """One multi-channel 2-D image; the unit of comparison.

    pixels holds channels * height * width float32 values, channel-major.
    Immutable after construction (the array is marked read-only).
    """

    id: str
    channels: int
    height: int
    width: int
    pixels: np.ndarray
    source: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise InvalidArgumentError("image id must be non-empty")
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise InvalidArgumentError(
                f"image {self.id!r}: dimensions must be positive"
            )
        arr = _as_pixels(
            self.pixels,
            self.channels * self.height * self.width,
            f"image {self.id!r}",
        )
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def chw(self) -> np.ndarray:
        """Read-only (C, H, W) view of the pixel data."""
        return self.pixels.reshape(self.channels, self.height, self.width)

    def channel(self, c: int) -> np.ndarray:
        if not 0 <= c < self.channels:
            raise InvalidArgumentError(
                f"image {self.id!r}: channel {c} out of range"
            )
        return self.chw()[c]


@dataclass(frozen=True)
class VolumeRecord:
    """One multi-channel 3-D volume, split into slices by `preprocess`.

    voxels holds channels * depth * height * width float32 values,
    channel-major then slice-major.
    """

    id: str
    channels: int
    depth: int
    height: int
    width: int
    voxels: np.ndarray
    source: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise InvalidArgumentError("volume id must be non-empty")
        if min(self.channels, self.depth, self.height, self.width) < 1:
            raise InvalidArgumentError(
                f"volume {self.id!r}: dimensions must be positive"
            )
        arr = _as_pixels(
            self.voxels,
            self.channels * self.depth * self.height * self.width,
            f"volume {self.id!r}",
        )
        object.__setattr__(self, "voxels", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.depth, self.height, self.width)

    def cdhw(self) -> np.ndarray:
        return self.voxels.reshape(
            self.channels, self.depth, self.height, self.width
        )


ROLES = ("train", "test", "synthetic")


@dataclass(frozen=True)
class Dataset:
    """Ordered image collection with a declared audit role."""

    name: str
    role: str
    images: tuple[ImageRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.role not in ROLES:
            raise InvalidArgumentError(
                f"dataset {self.name!r}: role must be one of {ROLES}, got {self.role!r}"
            )
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise InvalidArgumentError(
                f"dataset {self.name!r}: mixed image shapes {sorted(shapes)}"
            )
        seen, dupes = set(), []
        for img in self.images:
            if img.id in seen:
                dupes.append(img.id)
            seen.add(img.id)
        if dupes:
            raise InvalidArgumentError(
                f"dataset {self.name!r}: duplicate ids {sorted(set(dupes))}"
            )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        if not self.images:
            raise InvalidArgumentError(f"dataset {self.name!r} is empty")
        return self.images[0].shape


@dataclass(frozen=True)
class StandardizedVector:
    """Mean-centered, unit-L2-norm flattening of an image.

    Makes Pearson correlation a plain dot product: dot(standardize(a),
    standardize(b)) equals pearson(a, b) within 1e-9, which is why the
    values stay float64 (the engine downcasts its internal matrices).
    Invalid vectors come from constant inputs: values are all zero and
    the vector must be excluded from correlation maxima (it is reported,
    never dropped).
    """

    id: str
    values: np.ndarray
    valid: bool

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


def default_channel_mask(channels: int) -> tuple[int, ...]:
    """Channels entering correlation when the caller does not choose.

    Five-channel data is assumed to carry an annotation plane in the last
    channel, which is excluded; every other channel count uses all
    channels.
    """
    if channels == 5:
        return tuple(range(4))
    return tuple(range(channels))


def resolve_channel_mask(mask, channels: int) -> tuple[int, ...]:
    """Normalize a channel mask (None means the default for this C)."""
    if mask is None:
        return default_channel_mask(channels)
    idx = sorted(set(int(c) for c in mask))
    if not idx:
        raise InvalidArgumentError("channel mask must be non-empty")
    if idx[0] < 0 or idx[-1] >= channels:
        raise InvalidArgumentError(
            f"channel mask {idx} out of range for {channels} channels"
        )
    return tuple(idx)


def _selected(img: ImageRecord, mask: tuple[int, ...]) -> np.ndarray:
    """Selected channels as float64, shape (len(mask), H*W)."""
    chw = img.chw()
    return np.stack([chw[c] for c in mask]).reshape(len(mask), -1).astype(np.float64)


def _standardize_values(flat: np.ndarray) -> Optional[np.ndarray]:
    """Center and normalize one float64 vector; None if constant."""
    centered = flat - flat.mean()
    var = float(np.mean(centered * centered))
    if var < VARIANCE_FLOOR:
        return None
    return centered / np.sqrt(centered.dot(centered))


def standardize(
    img: ImageRecord,
    channel_mask: Optional[Iterable[int]] = None,
    mode: str = "concat",
) -> StandardizedVector:
    """Standardize an image's selected channels for dot-product correlation.

    mode="concat" treats the selected channels as one long vector (the
    default multi-modality convention). mode="mean" standardizes each
    channel separately and scales by 1/sqrt(n_channels), so the dot
    product of two such vectors equals the per-channel mean of the
    per-channel correlations. Either way, a constant input (variance
    below 1e-12; for "mean", any constant selected channel) yields
    valid=False with all-zero values.
    """
    mask = resolve_channel_mask(channel_mask, img.channels)
    sel = _selected(img, mask)
    if mode == "concat":
        std = _standardize_values(sel.reshape(-1))
        if std is None:
            return StandardizedVector(img.id, np.zeros(sel.size), False)
        return StandardizedVector(img.id, std, True)
    if mode == "mean":
        parts = []
        scale = 1.0 / np.sqrt(len(mask))
        for row in sel:
            std = _standardize_values(row)
            if std is None:
                return StandardizedVector(img.id, np.zeros(sel.size), False)
            parts.append(std * scale)
        return StandardizedVector(img.id, np.concatenate(parts), True)
    raise InvalidArgumentError(f"unknown channel mode {mode!r}")


def _pearson_flat(a: np.ndarray, b: np.ndarray) -> float:
    ca = a - a.mean()
    cb = b - b.mean()
    va = float(ca.dot(ca))
    vb = float(cb.dot(cb))
    if va / a.size < VARIANCE_FLOOR or vb / b.size < VARIANCE_FLOOR:
        raise UndefinedCorrelationError(
            "correlation undefined for constant input"
        )
    return float(ca.dot(cb) / np.sqrt(va * vb))


def pearson(
    a: ImageRecord,
    b: ImageRecord,
    channel_mask: Optional[Iterable[int]] = None,
    mode: str = "concat",
) -> float:
    """Pearson correlation of two images over the selected channels.

    Reference scalar path: two-pass covariance formula in float64, no
    standardized-vector shortcut. Symmetric in its arguments. Raises
    UndefinedCorrelationError when either input is constant on the mask
    and InvalidArgumentError on shape mismatch.
    """
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {a.id!r} {a.shape} vs {b.id!r} {b.shape}"
        )
    mask = resolve_channel_mask(channel_mask, a.channels)
    sa = _selected(a, mask)
    sb = _selected(b, mask)
    if mode == "concat":
        return _pearson_flat(sa.reshape(-1), sb.reshape(-1))
    if mode == "mean":
        return float(
            np.mean([_pearson_flat(ra, rb) for ra, rb in zip(sa, sb)])
        )
    raise InvalidArgumentError(f"unknown channel mode {mode!r}")
