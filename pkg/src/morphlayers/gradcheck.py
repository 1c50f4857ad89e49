"""Central finite-difference checks of the analytic gradients.

The differences are taken on :func:`reference_forward`, a direct
transcription of the layer definitions (power ratios and exponentials, no
softmax rewrite) evaluated in extended precision, so that cancellation in
``(f(x + h) - f(x - h)) / 2h`` stays far below the tolerances checked.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import layers, train
from .image import PadMode
from .layers import LayerKind, LayerState


@dataclass
class CheckResult:
    label: str
    max_rel_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_errors(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)`` on coordinates where that scale exceeds ``floor``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > floor
    return np.abs(a - n)[keep] / scale[keep]


def _windows_ref(f, side, mode, dtype):
    r = side // 2
    widths = [(0, 0)] * (f.ndim - 2) + [(r, r)] * 2
    f = np.asarray(f, dtype=dtype)
    if mode.kind == "edge":
        padded = np.pad(f, widths, mode="edge")
    else:
        padded = np.pad(f, widths, mode="constant", constant_values=dtype(mode.value))
    return np.lib.stride_tricks.sliding_window_view(padded, (side, side), axis=(-2, -1))


def reference_forward(f, state: LayerState, mode: PadMode, dtype=np.longdouble) -> np.ndarray:
    """Layer output straight from the defining ratios, in ``dtype`` arithmetic."""
    if state.kind is LayerKind.SCALE_BIAS:
        return dtype(state.scale) * np.asarray(f, dtype=dtype) + dtype(state.bias)
    w = np.asarray(state.kernel, dtype=dtype)[::-1, ::-1]
    p = dtype(state.shape_param)
    win = _windows_ref(f, w.shape[0], mode, dtype)
    axes = (-2, -1)
    if state.kind is LayerKind.PCONV:
        return (w * win ** (p + 1)).sum(axes) / (w * win ** p).sum(axes)
    v = win + w
    if state.kind is LayerKind.LMORPH:
        return (v ** (p + 1)).sum(axes) / (v ** p).sum(axes)
    e = np.exp(p * v)
    return (v * e).sum(axes) / e.sum(axes)


def reference_network_output(net, f, mode: PadMode, rescales, dtype=np.longdouble):
    x = np.asarray(f, dtype=dtype)
    for layer, coeffs in zip(net.layers, rescales):
        if coeffs is not None:
            x = np.asarray(coeffs[0], dtype=dtype) * x + np.asarray(coeffs[1], dtype=dtype)
        x = reference_forward(x, layer, mode, dtype)
    return x


def central_difference(fn, x, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    h = float(h)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        out[i] = float((up - down) / (2 * h))
    return grad


def random_layer_case(kind, rng: np.random.Generator):
    """A random ``(f, state, upstream, mode)`` inside the layer's domain."""
    kind = LayerKind(kind)
    h, w = rng.integers(4, 9, size=2)
    side = int(rng.choice([1, 3, 5]))
    if kind is LayerKind.SMORPH:
        f = rng.uniform(-1.0, 1.0, (h, w))
        state = LayerState(kind, rng.normal(0.0, 0.3, (side, side)), rng.uniform(-10, 10))
        mode = PadMode.edge() if rng.random() < 0.5 else PadMode.constant(rng.uniform(-1, 1))
    elif kind is LayerKind.SCALE_BIAS:
        f = rng.uniform(-1.0, 1.0, (h, w))
        state = LayerState(kind, scale=rng.normal(), bias=rng.normal())
        mode = PadMode.edge()
    else:
        f = rng.uniform(1.0, 2.0, (h, w))
        if kind is LayerKind.PCONV:
            kernel = rng.uniform(0.2, 2.0, (side, side))
        else:
            kernel = rng.uniform(0.05, 0.5, (side, side))
        state = LayerState(kind, kernel, rng.uniform(-10, 10))
        mode = PadMode.edge() if rng.random() < 0.5 else PadMode.constant(rng.uniform(1, 2))
    upstream = rng.normal(size=f.shape)
    return f, state, upstream, mode


def check_layer(f, state: LayerState, upstream, mode: PadMode, h: float = 1e-5) -> CheckResult:
    """Compare :func:`layers.backward` with central differences for one case."""
    grads = layers.backward(f, state, upstream, mode)

    up = np.asarray(upstream, dtype=np.longdouble)

    def objective(f_, state_):
        return np.sum(up * reference_forward(f_, state_, mode))

    errs = [relative_errors(grads.d_input, central_difference(lambda x: objective(x, state), f, h))]
    if state.kind is LayerKind.SCALE_BIAS:
        num_scale = central_difference(lambda s: objective(f, replace(state, scale=float(s))), state.scale, h)
        num_bias = central_difference(lambda b: objective(f, replace(state, bias=float(b))), state.bias, h)
        errs += [relative_errors(grads.d_scale, num_scale), relative_errors(grads.d_bias, num_bias)]
    else:
        num_k = central_difference(lambda k: objective(f, replace(state, kernel=k)), state.kernel, h)
        num_p = central_difference(
            lambda p: objective(f, replace(state, shape_param=float(p))), state.shape_param, h)
        errs += [relative_errors(grads.d_kernel, num_k), relative_errors(grads.d_shape_param, num_p)]
    allerr = np.concatenate(errs)
    return CheckResult(state.kind.value, float(allerr.max(initial=0.0)), int(allerr.size))


def random_network_case(kind, rng: np.random.Generator, depth: int = 2):
    kind = LayerKind(kind)
    net = train.build_network(kind, depth, seed=int(rng.integers(2**31)), side=3)
    morph = []
    for layer in net.morph_layers:
        if kind is LayerKind.PCONV:
            kernel = rng.uniform(0.2, 2.0, (3, 3))
        elif kind is LayerKind.LMORPH:
            kernel = rng.uniform(0.05, 0.5, (3, 3))
        else:
            kernel = rng.normal(0.0, 0.3, (3, 3))
        morph.append(replace(layer, kernel=kernel, shape_param=rng.uniform(-6, 6)))
    scale_bias = replace(net.layers[-1], scale=rng.uniform(0.5, 2.0), bias=rng.normal())
    net = train.Network((*morph, scale_bias))
    f = rng.uniform(0.0, 1.0, (2, 6, 6))
    target = rng.uniform(0.0, 1.0, f.shape)
    return net, f, target


def check_network(net: train.Network, f, target, mode: PadMode = PadMode.edge(),
                  h: float = 1e-5) -> CheckResult:
    """Finite-difference check of every network parameter through the MSE loss.

    Rescaling maps are frozen at their values for the unperturbed network,
    matching how :func:`train.network_backward` differentiates them.
    """
    cache = train.network_forward(net, f, mode)
    _, d_out = train.mse_gradient(cache.output, target)
    grads, _ = train.network_backward(net, cache, d_out, mode)

    tgt = np.asarray(target, dtype=np.longdouble)

    def loss(layers_):
        out = reference_network_output(train.Network(layers_), f, mode, cache.rescales)
        return np.mean((out - tgt) ** 2)

    errs = []
    for i, layer in enumerate(net.layers):
        def swap(**kw):
            return tuple(replace(layer, **kw) if j == i else l for j, l in enumerate(net.layers))
        g = grads[i]
        if layer.kind is LayerKind.SCALE_BIAS:
            errs.append(relative_errors(g.d_scale, central_difference(
                lambda s: loss(swap(scale=float(s))), layer.scale, h)))
            errs.append(relative_errors(g.d_bias, central_difference(
                lambda b: loss(swap(bias=float(b))), layer.bias, h)))
        else:
            errs.append(relative_errors(g.d_kernel, central_difference(
                lambda k: loss(swap(kernel=k)), layer.kernel, h)))
            errs.append(relative_errors(g.d_shape_param, central_difference(
                lambda p: loss(swap(shape_param=float(p))), layer.shape_param, h)))
    allerr = np.concatenate(errs)
    return CheckResult(f"{net.kind.value} network", float(allerr.max(initial=0.0)), int(allerr.size))


def run_suite(cases: int = 100, seed: int = 0, network_cases: int = 10):
    """Random layer and network checks; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    results = []
    for kind in LayerKind:
        for _ in range(cases):
            results.append(check_layer(*random_layer_case(kind, rng)))
    for kind in (LayerKind.PCONV, LayerKind.LMORPH, LayerKind.SMORPH):
        for _ in range(network_cases):
            results.append(check_network(*random_network_case(kind, rng)))
    return results
