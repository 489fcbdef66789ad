"""Shared types, configuration and seeded randomness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

LABEL_SUM_TOL = 1e-9


class LabelMixingMode(str, Enum):
    AREA = "area"
    PIXEL_ATTENTION = "pixel_attention"
    SUPERPIXEL_ATTENTION = "superpixel_attention"


def as_image(pixels) -> np.ndarray:
    """Validate and return an ``H x W x C`` float64 image with values in [0, 1].

    8-bit input is divided by 255. A 2-D array is treated as single channel.
    """
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWxC with C in (1, 3), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image pixel values must lie in [0, 1]")
    return arr


def check_label_vector(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("label vector must be 1-D and non-empty")
    if np.any(p < 0) or abs(p.sum() - 1.0) > LABEL_SUM_TOL:
        raise ValueError("label vector must be non-negative and sum to 1")
    return p


def one_hot(class_index: int, num_classes: int) -> np.ndarray:
    if num_classes < 1 or not 0 <= class_index < num_classes:
        raise ValueError(f"class index {class_index} out of range for K={num_classes}")
    y = np.zeros(num_classes, dtype=np.float64)
    y[class_index] = 1.0
    return y


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    """Integer label grid whose IDs are exactly ``0..L-1``."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("superpixel labels must be a 2-D integer array")
        object.__setattr__(self, "labels", lab.astype(np.int64, copy=False))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def L(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.L)

    def validate(self, check_connectivity: bool = True) -> None:
        """Raise ``ValueError`` if any map invariant is violated."""
        lab = self.labels
        if lab.size == 0 or lab.min() < 0:
            raise ValueError("labels must be non-negative and cover the grid")
        if np.any(self.sizes() == 0):
            raise ValueError("label IDs are not contiguous")
        if check_connectivity:
            from scipy import ndimage

            objects = ndimage.find_objects(lab + 1)
            for i, sl in enumerate(objects):
                _, n = ndimage.label(lab[sl] == i)
                if n != 1:
                    raise ValueError(f"superpixel {i} is not 4-connected ({n} components)")

    def __eq__(self, other):
        return isinstance(other, SuperpixelMap) and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class MixConfig:
    q_min: int = 25
    q_max: int = 30
    p: float = 0.5
    t: float = 0.7
    label_mixing_mode: LabelMixingMode = LabelMixingMode.SUPERPIXEL_ATTENTION

    def __post_init__(self):
        if not 1 <= self.q_min <= self.q_max:
            raise ValueError("need 1 <= q_min <= q_max")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if not 0.0 < self.t <= 1.0:
            raise ValueError("t must lie in (0, 1]")
        object.__setattr__(self, "label_mixing_mode", LabelMixingMode(self.label_mixing_mode))


@dataclass(frozen=True)
class LossConfig:
    gamma1: float = 0.1
    gamma2: float = 0.05
    tau: float = 0.7
    # False selects the standard supervised-contrastive denominator
    literal_contrast: bool = True

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64's output stream is fixed for a given seed independent of platform.
    Child generators are derived by hashing ``(seed, key)`` so that parallel
    work can be split without sharing state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: int) -> Rng:
        return Rng(derive_seed(self.seed, key))

    def uniform_int(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range ``[lo, hi]``."""
        if lo > hi:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return int(self.generator.integers(lo, hi, endpoint=True))

    def bernoulli(self, p: float, size: int) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        return self.generator.random(size) < p

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def derive_seed(master: int, key: int) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{int(key)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
