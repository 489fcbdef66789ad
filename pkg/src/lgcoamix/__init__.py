"""Superpixel grid mixing with attention-based label mixing."""

from .core import LabelMixingMode, LossConfig, MixConfig, Rng, SuperpixelMap
from .mixer import MixPlan, MixedSample, compose_mix, lambda_area, lambda_attention, lgcoamix, mix_labels
from .slic import SlicParams, slic_segment

__version__ = "0.1.0"

__all__ = [
    "LabelMixingMode", "LossConfig", "MixConfig", "Rng", "SuperpixelMap",
    "MixPlan", "MixedSample", "compose_mix", "lambda_area", "lambda_attention", "lgcoamix", "mix_labels",
    "SlicParams", "slic_segment",
]
