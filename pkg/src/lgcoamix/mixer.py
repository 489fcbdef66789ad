"""Superpixel grid mixing of two images and the label-mixing ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MixConfig, Rng, SuperpixelMap, as_image, check_label_vector
from .slic import SlicParams, slic_segment

FROM_X1 = 0
FROM_X2 = 1


@dataclass(frozen=True, eq=False)
class MixPlan:
    mask: np.ndarray  # H x W bool, True where the pixel comes from x2
    selected_from_x2: np.ndarray  # S2 superpixel IDs pasted into x1
    q1: int = 0
    q2: int = 0

    @property
    def m(self) -> int:
        return len(self.selected_from_x2)


@dataclass(frozen=True, eq=False)
class MixedSample:
    x_mix: np.ndarray
    s_mix: SuperpixelMap
    provenance: np.ndarray  # per S_mix superpixel: FROM_X1 or FROM_X2
    pixel_counts: np.ndarray
    y1: np.ndarray | None = None
    y2: np.ndarray | None = None

    @property
    def from_x2(self) -> np.ndarray:
        return self.provenance == FROM_X2


def plan_from_selection(s2: SuperpixelMap, selected, q1: int = 0, q2: int = 0) -> MixPlan:
    selected = np.unique(np.asarray(selected, dtype=np.int64))
    if selected.size and (selected[0] < 0 or selected[-1] >= s2.L):
        raise ValueError("selected superpixel IDs out of range")
    chosen = np.zeros(s2.L, dtype=bool)
    chosen[selected] = True
    return MixPlan(chosen[s2.labels], selected, q1, q2)


def bernoulli_select(s2: SuperpixelMap, p: float, rng: Rng) -> MixPlan:
    """Keep each superpixel of ``s2`` independently with probability ``p``."""
    keep = rng.bernoulli(p, s2.L)
    return plan_from_selection(s2, np.flatnonzero(keep))


def compose_mix(x1, x2, s1: SuperpixelMap, s2: SuperpixelMap, plan: MixPlan, y1=None, y2=None) -> MixedSample:
    """Paste the planned ``x2`` superpixels into ``x1`` and build the mixed map.

    S2 IDs are offset past the S1 IDs, superpixels that vanish are dropped and
    the survivors renumbered ``0..L-1`` in (S1 IDs, then S2 IDs) order. A
    truncated S1 superpixel keeps a single ID even if what remains of it is
    disconnected.
    """
    x1 = as_image(x1)
    x2 = as_image(x2)
    mask = np.asarray(plan.mask, dtype=bool)
    shape = x1.shape[:2]
    if x2.shape != x1.shape or s1.shape != shape or s2.shape != shape or mask.shape != shape:
        raise ValueError("x1, x2, s1, s2 and the mask must share one H x W (and C)")

    x_mix = np.where(mask[:, :, None], x2, x1)
    l1 = s1.L
    combined = np.where(mask, s2.labels + l1, s1.labels)
    counts = np.bincount(combined.ravel(), minlength=l1 + s2.L)
    alive = np.flatnonzero(counts)
    remap = np.full(l1 + s2.L, -1, dtype=np.int64)
    remap[alive] = np.arange(alive.size)
    s_mix = SuperpixelMap(remap[combined])
    provenance = np.where(alive >= l1, FROM_X2, FROM_X1).astype(np.int8)
    return MixedSample(x_mix, s_mix, provenance, counts[alive], y1, y2)


def lambda_area(plan: MixPlan, height: int | None = None, width: int | None = None) -> float:
    mask = np.asarray(plan.mask)
    h, w = mask.shape if height is None else (height, width)
    return float(mask.sum()) / (h * w)


def lambda_attention(weights, sample: MixedSample) -> float:
    """Share of attention-weighted pixel mass that comes from x2."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (sample.s_mix.L,):
        raise ValueError(f"expected {sample.s_mix.L} weights, got shape {w.shape}")
    mass = w * sample.pixel_counts
    return float(mass[sample.from_x2].sum() / mass.sum())


def lambda_pixel_attention(pixel_weights, plan: MixPlan) -> float:
    pw = np.asarray(pixel_weights, dtype=np.float64)
    mask = np.asarray(plan.mask, dtype=bool)
    if pw.shape != mask.shape:
        raise ValueError("pixel weights must match the mask shape")
    return float(pw[mask].sum() / pw.sum())


def mix_labels(y1, y2, lam: float) -> np.ndarray:
    y1 = check_label_vector(y1)
    y2 = check_label_vector(y2)
    if y1.shape != y2.shape:
        raise ValueError("label vectors differ in K")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return (1.0 - lam) * y1 + lam * y2


def segment_for_mix(image, q: int, slic: SlicParams | None = None) -> SuperpixelMap:
    base = slic or SlicParams(q)
    params = SlicParams(q, base.compactness, base.iterations, base.min_region_fraction)
    return slic_segment(image, params)


def lgcoamix(x1, y1, x2, y2, config: MixConfig, rng: Rng, slic: SlicParams | None = None,
             segment=None) -> tuple[MixedSample, MixPlan]:
    """Image half of the mixer: sample counts, segment, select, compose.

    The mixed label needs attention weights from the forward pass, so it is
    left to the caller (``lambda_*`` then ``mix_labels``). ``segment(which,
    image, q)`` may replace SLIC, e.g. to serve cached maps; ``which`` is 0
    for ``x1`` and 1 for ``x2``.
    """
    x1 = as_image(x1)
    x2 = as_image(x2)
    if x1.shape != x2.shape:
        raise ValueError("x1 and x2 must have the same shape")
    if segment is None:
        def segment(which, image, q):
            return segment_for_mix(image, q, slic)
    q1 = rng.uniform_int(config.q_min, config.q_max)
    q2 = rng.uniform_int(config.q_min, config.q_max)
    s1 = segment(0, x1, q1)
    s2 = segment(1, x2, q2)
    sel = bernoulli_select(s2, config.p, rng)
    plan = MixPlan(sel.mask, sel.selected_from_x2, q1, q2)
    sample = compose_mix(x1, x2, s1, s2, plan, y1, y2)
    return sample, plan
