"""Adam, reduce-on-plateau scheduling and the mini-batch training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers
from .image import EDGE, PadMode, rescale_coefficients
from .layers import LayerKind, LayerState

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 0.01
    plateau_patience_lr: int = 5
    lr_decay_factor: float = 10.0
    plateau_patience_stop: int = 10
    max_epochs: int = 1000
    seed: int = 0
    rel_tol: float = 1e-4
    divergence_factor: float = 10.0

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "plateau_patience_lr",
                     "plateau_patience_stop", "max_epochs", "rel_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr_decay_factor > 1:
            raise ValueError("lr_decay_factor must be > 1")


@dataclass(frozen=True)
class Network:
    """One or two morphological layers of a single kind, then a scale/bias layer."""

    layers: tuple[LayerState, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        *morph, last = self.layers
        if last.kind is not LayerKind.SCALE_BIAS:
            raise ValueError("last layer must be scale/bias")
        if not 1 <= len(morph) <= 2:
            raise ValueError("network needs one or two morphological layers")
        kinds = {layer.kind for layer in morph}
        if len(kinds) != 1 or LayerKind.SCALE_BIAS in kinds:
            raise ValueError("morphological layers must share one kind")

    @property
    def kind(self) -> LayerKind:
        return self.layers[0].kind

    @property
    def morph_layers(self) -> tuple[LayerState, ...]:
        return self.layers[:-1]


def init_layer(kind: LayerKind, rng: np.random.Generator, side: int = 7) -> LayerState:
    kind = LayerKind(kind)
    if kind is LayerKind.PCONV:
        return LayerState(kind, np.ones((side, side)), 0.0)
    if kind is LayerKind.LMORPH:
        return LayerState(kind, np.abs(rng.normal(0.0, 0.01, (side, side))), 0.0)
    if kind is LayerKind.SMORPH:
        return LayerState(kind, rng.normal(0.0, 0.01, (side, side)), 0.0)
    return LayerState(kind, scale=1.0, bias=0.0)


def build_network(kind, depth: int = 1, seed: int = 0, side: int = 7) -> Network:
    rng = np.random.default_rng(seed)
    morph = [init_layer(kind, rng, side) for _ in range(depth)]
    return Network((*morph, init_layer(LayerKind.SCALE_BIAS, rng)))


@dataclass
class ForwardCache:
    layer_inputs: list      # input actually fed to each layer (after rescale)
    rescales: list          # per-layer (gain, offset), None when not rescaled
    output: np.ndarray

    @property
    def gains(self):
        return [None if r is None else r[0] for r in self.rescales]


def network_forward(net: Network, f, mode: PadMode = EDGE, frozen_rescales=None) -> ForwardCache:
    """Run the network, rescaling onto [1, 2] before every PConv/LMorph layer.

    ``frozen_rescales`` (from an earlier cache) replaces the per-image min/max
    rescaling with fixed affine maps; used for finite-difference checks of
    :func:`network_backward`, which treats those maps as constants.
    """
    x = np.asarray(f, dtype=np.float64)
    inputs, rescales = [], []
    for i, layer in enumerate(net.layers):
        coeffs = None
        if layer.kind.needs_rescale:
            coeffs = frozen_rescales[i] if frozen_rescales else rescale_coefficients(x)
            x = coeffs[0] * x + coeffs[1]
        inputs.append(x)
        rescales.append(coeffs)
        x = layers.forward(x, layer, mode)
    return ForwardCache(inputs, rescales, x)


def network_backward(net: Network, cache: ForwardCache, d_out, mode: PadMode = EDGE):
    """Per-layer :class:`layers.Gradients`, in network order.

    Rescaling is differentiated as an affine map with each image's min and
    max held fixed.
    """
    grads = [None] * len(net.layers)
    d = np.asarray(d_out, dtype=np.float64)
    for i in reversed(range(len(net.layers))):
        g = layers.backward(cache.layer_inputs[i], net.layers[i], d, mode)
        grads[i] = g
        d = g.d_input
        if cache.gains[i] is not None:
            d = d * cache.gains[i]
    return grads, d


# Trainable parameters are handled as a flat list of arrays. PConv kernels are
# stored as log-weights so that the weights stay strictly positive.

def parameters(net: Network) -> list[np.ndarray]:
    params = []
    for layer in net.layers:
        if layer.kind is LayerKind.SCALE_BIAS:
            params += [np.array(layer.scale), np.array(layer.bias)]
        elif layer.kind is LayerKind.PCONV:
            params += [np.log(layer.kernel), np.array(layer.shape_param)]
        else:
            params += [layer.kernel.copy(), np.array(layer.shape_param)]
    return params


def with_parameters(net: Network, params) -> Network:
    """Rebuild ``net`` from a parameter list, projecting LMorph weights onto >= 0."""
    new = []
    it = iter(params)
    for layer in net.layers:
        a, b = next(it), next(it)
        if layer.kind is LayerKind.SCALE_BIAS:
            new.append(replace(layer, scale=float(a), bias=float(b)))
        elif layer.kind is LayerKind.PCONV:
            new.append(replace(layer, kernel=np.exp(a), shape_param=float(b)))
        elif layer.kind is LayerKind.LMORPH:
            new.append(replace(layer, kernel=np.maximum(a, 0.0), shape_param=float(b)))
        else:
            new.append(replace(layer, kernel=np.array(a), shape_param=float(b)))
    return Network(tuple(new))


def parameter_gradients(net: Network, grads) -> list[np.ndarray]:
    out = []
    for layer, g in zip(net.layers, grads):
        if layer.kind is LayerKind.SCALE_BIAS:
            out += [np.array(g.d_scale), np.array(g.d_bias)]
        elif layer.kind is LayerKind.PCONV:
            out += [g.d_kernel * layer.kernel, np.array(g.d_shape_param)]
        else:
            out += [g.d_kernel, np.array(g.d_shape_param)]
    return out


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        ms.append(m)
        vs.append(v)
    return new_params, replace(state, m=ms, v=vs, step=t)


def optimizer_step(net: Network, grads, state: AdamState, lr: float):
    """Adam on the network parameters followed by domain projection."""
    params, state = adam_step(parameters(net), parameter_gradients(net, grads), state, lr)
    return with_parameters(net, params), state


@dataclass(frozen=True)
class PlateauState:
    lr: float
    best: float = math.inf
    wait_lr: int = 0
    wait_stop: int = 0
    stop: bool = False


def plateau_update(loss: float, state: PlateauState, cfg: TrainConfig) -> PlateauState:
    """Advance the schedule by one epoch loss.

    An epoch improves when it beats the best loss so far by more than
    ``cfg.rel_tol`` (relative). After ``plateau_patience_lr`` epochs without
    improvement the rate drops by ``lr_decay_factor``; after
    ``plateau_patience_stop`` such epochs training stops.
    """
    if loss < state.best * (1.0 - cfg.rel_tol):
        return replace(state, best=loss, wait_lr=0, wait_stop=0)
    wait_lr, wait_stop = state.wait_lr + 1, state.wait_stop + 1
    if wait_stop >= cfg.plateau_patience_stop:
        return replace(state, wait_lr=wait_lr, wait_stop=wait_stop, stop=True)
    if wait_lr >= cfg.plateau_patience_lr:
        return replace(state, lr=state.lr / cfg.lr_decay_factor, wait_lr=0, wait_stop=wait_stop)
    return replace(state, wait_lr=wait_lr, wait_stop=wait_stop)


def replay_plateau(history, cfg: TrainConfig) -> PlateauState:
    if len(history) == 0:
        raise ValueError("empty loss history")
    state = PlateauState(cfg.initial_lr)
    for loss in history:
        state = plateau_update(loss, state, cfg)
        if state.stop:
            break
    return state


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)
    converged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.history)

    @property
    def final_loss(self) -> float:
        return self.history[-1].mean_loss


def mse_gradient(out, target):
    diff = out - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def train(net: Network, inputs, targets, cfg: TrainConfig = TrainConfig(),
          mode: PadMode = EDGE) -> TrainResult:
    """Train on ``(inputs, targets)`` with shuffled mini-batches until the loss plateaus.

    Raises :class:`TrainingDiverged` if an epoch loss is non-finite or grows by
    more than ``cfg.divergence_factor`` over the previous epoch.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError("empty dataset")
    if inputs.shape != targets.shape:
        raise ValueError(f"input shape {inputs.shape} != target shape {targets.shape}")

    rng = np.random.default_rng([cfg.seed, 2])
    adam = AdamState.zeros_like(parameters(net))
    sched = PlateauState(cfg.initial_lr)
    result = TrainResult(net)
    prev = None
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cache = network_forward(net, inputs[idx], mode)
            loss, d_out = mse_gradient(cache.output, targets[idx])
            grads, _ = network_backward(net, cache, d_out, mode)
            net, adam = optimizer_step(net, grads, adam, lr)
            total += loss * len(idx)
        epoch_loss = total / n
        result.network = net
        result.history.append(EpochRecord(epoch, epoch_loss, lr))
        if not math.isfinite(epoch_loss) or (
                prev is not None and epoch_loss > cfg.divergence_factor * prev):
            raise TrainingDiverged(f"epoch {epoch}: loss {epoch_loss!r} after {prev!r}")
        prev = epoch_loss
        log.debug("epoch %d loss %.6g lr %g", epoch, epoch_loss, lr)
        sched = plateau_update(epoch_loss, sched, cfg)
        if sched.stop:
            result.converged = True
            break
    return result


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.mean_loss), repr(rec.lr)])


def save_network(path, net: Network) -> None:
    """Serialize as JSON: layer kinds, kernels and scalars."""
    doc = []
    for layer in net.layers:
        entry = {"kind": layer.kind.value}
        if layer.kind is LayerKind.SCALE_BIAS:
            entry.update(scale=layer.scale, bias=layer.bias)
        else:
            entry.update(kernel=layer.kernel.tolist(), shape_param=layer.shape_param)
        doc.append(entry)
    Path(path).write_text(json.dumps({"layers": doc}, indent=1))


def load_network(path) -> Network:
    doc = json.loads(Path(path).read_text())
    out = []
    for entry in doc["layers"]:
        kind = LayerKind(entry["kind"])
        if kind is LayerKind.SCALE_BIAS:
            out.append(LayerState(kind, scale=entry["scale"], bias=entry["bias"]))
        else:
            out.append(LayerState(kind, np.array(entry["kernel"]), entry["shape_param"]))
    return Network(tuple(out))
