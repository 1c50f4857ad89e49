"""Exact grayscale morphology and trainable smooth morphological layers."""

from .datasets import Op, ScenarioSpec, load_digits, make_pairs, target_se
from .image import EDGE, PadMode, mse, rescale_unit_band, rmse
from .layers import (
    DomainError,
    LayerKind,
    LayerState,
    alpha_softmax,
    backward,
    chm,
    forward,
    lmorph_forward,
    pconv_forward,
    scale_bias_forward,
    smorph_forward,
)
from .oracle import closing, dilate, erode, flat_kernel, opening
from .train import Network, TrainConfig, build_network

__all__ = [
    "EDGE", "DomainError", "LayerKind", "LayerState", "Network", "Op", "PadMode",
    "ScenarioSpec", "TrainConfig", "alpha_softmax", "backward", "build_network",
    "chm", "closing", "dilate", "erode", "flat_kernel", "forward", "lmorph_forward",
    "load_digits", "make_pairs", "mse", "opening", "pconv_forward", "rescale_unit_band",
    "rmse", "scale_bias_forward", "smorph_forward", "target_se",
]
