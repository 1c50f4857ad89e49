"""Smooth morphological layers (PConv, LMorph, SMorph) and the scale/bias layer.

All three morphological layers reduce to a softmax-weighted average over each
window: with per-cell values ``v`` and logits ``z``,

    out = sum(v * softmax(z))

    PConv   v = f(y)           z = p*ln f(y) + ln w(x-y)
    LMorph  v = f(y) + w(x-y)  z = p*ln v
    SMorph  v = f(y) + w(x-y)  z = alpha*v

which is algebraically identical to the power-ratio definitions but never
forms ``x**p`` explicitly, so large ``|p|`` cannot overflow. The backward pass
uses ``d out / d z_i = s_i * (v_i - out)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .image import EDGE, PadMode, as_image, as_kernel, pad, unpad_gradient

class DomainError(ValueError):
    pass


class LayerKind(str, enum.Enum):
    PCONV = "pconv"
    LMORPH = "lmorph"
    SMORPH = "smorph"
    SCALE_BIAS = "scalebias"

    @property
    def is_morphological(self) -> bool:
        return self is not LayerKind.SCALE_BIAS

    @property
    def needs_rescale(self) -> bool:
        return self in (LayerKind.PCONV, LayerKind.LMORPH)


@dataclass(frozen=True)
class LayerState:
    kind: LayerKind
    kernel: np.ndarray | None = None
    shape_param: float = 0.0
    scale: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind is LayerKind.SCALE_BIAS:
            if not (np.isfinite(self.scale) and np.isfinite(self.bias)):
                raise ValueError("scale and bias must be finite")
            return
        if self.kernel is None:
            raise ValueError(f"{self.kind.value} layer needs a kernel")
        k = as_kernel(self.kernel)
        if self.kind is LayerKind.PCONV and np.any(k <= 0):
            raise DomainError("PConv kernel weights must be strictly positive")
        if self.kind is LayerKind.LMORPH and np.any(k < 0):
            raise DomainError("LMorph kernel weights must be nonnegative")
        if not np.isfinite(self.shape_param):
            raise ValueError("shape parameter must be finite")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "shape_param", float(self.shape_param))


@dataclass
class Gradients:
    d_input: np.ndarray
    d_kernel: np.ndarray | None = None
    d_shape_param: float = 0.0
    d_scale: float = 0.0
    d_bias: float = 0.0


def chm(values, weights, p: float) -> float:
    """Weighted counter-harmonic mean ``sum(w x^p) / sum(w x^(p-1))``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if x.shape != w.shape or x.size == 0:
        raise ValueError("values and weights must be non-empty and equally long")
    if np.any(w < 0):
        raise DomainError("domain: weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("weights are all zero")
    if np.any(x <= 0):
        if float(p) != int(p):
            raise DomainError("domain: nonpositive value with non-integer order")
        with np.errstate(divide="raise", invalid="raise"):
            try:
                return float(np.sum(w * x ** p) / np.sum(w * x ** (p - 1)))
            except FloatingPointError as exc:
                raise DomainError("domain: undefined power of zero") from exc
    keep = w > 0
    x, w = x[keep], w[keep]
    z = (p - 1.0) * np.log(x) + np.log(w)
    e = np.exp(z - z.max())
    return float(np.sum(x * e) / np.sum(e))


def alpha_softmax(values, alpha: float) -> float:
    """``sum(x e^(a x)) / sum(e^(a x))``, evaluated with the max shifted out."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty input")
    z = alpha * x
    e = np.exp(z - z.max())
    return float(np.sum(x * e) / np.sum(e))


_KIND_CODE = {
    LayerKind.PCONV: _kernels.PCONV,
    LayerKind.LMORPH: _kernels.LMORPH,
    LayerKind.SMORPH: _kernels.SMORPH,
}


def _prepare(f, state: LayerState, mode: PadMode):
    f = as_image(f, batched=True)
    if mode.kind == "clip":
        raise ValueError("smooth layers support edge or constant padding only")
    if state.kind in (LayerKind.PCONV, LayerKind.LMORPH) and np.any(f <= 0):
        raise DomainError("requires rescaled positive input")
    kt = np.ascontiguousarray(state.kernel[::-1, ::-1])
    r = kt.shape[0] // 2
    padded = np.ascontiguousarray(pad(f, r, mode).reshape(-1, f.shape[-2] + 2 * r, f.shape[-1] + 2 * r))
    return f, kt, padded


def _window_forward(f, state: LayerState, mode: PadMode) -> np.ndarray:
    f, kt, padded = _prepare(f, state, mode)
    out = _kernels.window_forward(_KIND_CODE[state.kind], padded, kt, state.shape_param)
    return out.reshape(f.shape)


def pconv_forward(f, state: LayerState, mode: PadMode = EDGE) -> np.ndarray:
    """p-convolution ``(f^(p+1) * w) / (f^p * w)`` over each window."""
    _expect(state, LayerKind.PCONV)
    return _window_forward(f, state, mode)


def lmorph_forward(f, state: LayerState, mode: PadMode = EDGE) -> np.ndarray:
    _expect(state, LayerKind.LMORPH)
    return _window_forward(f, state, mode)


def smorph_forward(f, state: LayerState, mode: PadMode = EDGE) -> np.ndarray:
    _expect(state, LayerKind.SMORPH)
    return _window_forward(f, state, mode)


def scale_bias_forward(f, state: LayerState) -> np.ndarray:
    _expect(state, LayerKind.SCALE_BIAS)
    return state.scale * np.asarray(f, dtype=np.float64) + state.bias


def forward(f, state: LayerState, mode: PadMode = EDGE) -> np.ndarray:
    if state.kind is LayerKind.SCALE_BIAS:
        return scale_bias_forward(f, state)
    return _window_forward(f, state, mode)


def backward(f, state: LayerState, upstream, mode: PadMode = EDGE) -> Gradients:
    """Gradients of ``sum(upstream * forward(f, state))``.

    Parameter gradients are summed over any leading batch axes.
    """
    f = as_image(f, batched=True)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != f.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {f.shape}")
    if state.kind is LayerKind.SCALE_BIAS:
        return Gradients(
            d_input=state.scale * upstream,
            d_scale=float(np.sum(upstream * f)),
            d_bias=float(np.sum(upstream)),
        )

    _, kt, padded = _prepare(f, state, mode)
    u = np.ascontiguousarray(upstream.reshape(padded.shape[0], *f.shape[-2:]))
    d_padded, d_kt, d_p = _kernels.window_backward(
        _KIND_CODE[state.kind], padded, kt, state.shape_param, u)
    r = kt.shape[0] // 2
    return Gradients(
        d_input=unpad_gradient(d_padded, r, mode).reshape(f.shape),
        d_kernel=d_kt[::-1, ::-1].copy(),
        d_shape_param=float(d_p),
    )


def _expect(state: LayerState, kind: LayerKind):
    if state.kind is not kind:
        raise ValueError(f"expected a {kind.value} layer, got {state.kind.value}")
