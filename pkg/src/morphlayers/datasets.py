"""MNIST IDX ingestion, the target structuring elements and (input, target) pairs."""

from __future__ import annotations

import enum
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle
from .image import EDGE, PadMode
from .layers import LayerKind

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# 7x7 grayscale structuring functions, origin at the center. Cone profile
# 0.4 * (1 - d / (r + 1)) on the support (d: Euclidean distance for the disks
# and the complex shape, L1 for the crosses and the diamond), 0 elsewhere.
# Frozen here so targets never depend on floating-point geometry.
_SE_TABLE = {
    "cross3": [
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0.2, 0, 0, 0],
        [0, 0, 0.2, 0.4, 0.2, 0, 0],
        [0, 0, 0, 0.2, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
    ],
    "cross7": [
        [0, 0, 0, 0.1, 0, 0, 0],
        [0, 0, 0, 0.2, 0, 0, 0],
        [0, 0, 0, 0.3, 0, 0, 0],
        [0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1],
        [0, 0, 0, 0.3, 0, 0, 0],
        [0, 0, 0, 0.2, 0, 0, 0],
        [0, 0, 0, 0.1, 0, 0, 0],
    ],
    "disk2": [
        [0, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0.1333, 0, 0, 0],
        [0, 0, 0.2114, 0.2667, 0.2114, 0, 0],
        [0, 0.1333, 0.2667, 0.4, 0.2667, 0.1333, 0],
        [0, 0, 0.2114, 0.2667, 0.2114, 0, 0],
        [0, 0, 0, 0.1333, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0],
    ],
    "disk3": [
        [0, 0, 0, 0.1, 0, 0, 0],
        [0, 0.1172, 0.1764, 0.2, 0.1764, 0.1172, 0],
        [0, 0.1764, 0.2586, 0.3, 0.2586, 0.1764, 0],
        [0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1],
        [0, 0.1764, 0.2586, 0.3, 0.2586, 0.1764, 0],
        [0, 0.1172, 0.1764, 0.2, 0.1764, 0.1172, 0],
        [0, 0, 0, 0.1, 0, 0, 0],
    ],
    "diamond3": [
        [0, 0, 0, 0.1, 0, 0, 0],
        [0, 0, 0.1, 0.2, 0.1, 0, 0],
        [0, 0.1, 0.2, 0.3, 0.2, 0.1, 0],
        [0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1],
        [0, 0.1, 0.2, 0.3, 0.2, 0.1, 0],
        [0, 0, 0.1, 0.2, 0.1, 0, 0],
        [0, 0, 0, 0.1, 0, 0, 0],
    ],
    "complex": [
        [0, 0, 0, 0.1, 0, 0, 0],
        [0, 0, 0.1764, 0.2, 0, 0, 0],
        [0, 0.1764, 0.2586, 0.3, 0, 0, 0.0838],
        [0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1],
        [0, 0, 0.2586, 0.3, 0.2586, 0, 0],
        [0, 0, 0, 0.2, 0.1764, 0.1172, 0],
        [0, 0, 0, 0.1, 0, 0, 0],
    ],
}

SE_NAMES = tuple(_SE_TABLE)


class IdxError(ValueError):
    """Base class for IDX parse failures."""


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class DimensionMismatchError(IdxError):
    pass


class Op(str, enum.Enum):
    DILATION = "dilation"
    EROSION = "erosion"
    CLOSING = "closing"
    OPENING = "opening"

    @property
    def symbol(self) -> str:
        return {"dilation": "⊕", "erosion": "⊖", "closing": "•", "opening": "◦"}[self.value]

    @property
    def depth(self) -> int:
        """Number of morphological layers needed to express the operation."""
        return 1 if self in (Op.DILATION, Op.EROSION) else 2

    @classmethod
    def parse(cls, text: str) -> "Op":
        aliases = {"dilate": "dilation", "erode": "erosion", "close": "closing",
                   "open": "opening", "⊕": "dilation", "⊖": "erosion",
                   "•": "closing", "◦": "opening"}
        return cls(aliases.get(text, text))


@dataclass(frozen=True)
class ScenarioSpec:
    op: Op
    se: str
    kind: LayerKind
    sample_count: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "op", Op.parse(self.op) if isinstance(self.op, str) else Op(self.op))
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.se not in _SE_TABLE:
            raise ValueError(f"unknown structuring element {self.se!r}")
        if not self.kind.is_morphological:
            raise ValueError("scenario layer must be morphological")
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")


def target_se(name: str) -> np.ndarray:
    try:
        return np.array(_SE_TABLE[name], dtype=np.float64)
    except KeyError:
        raise ValueError(f"unknown structuring element {name!r}") from None


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndims: int) -> np.ndarray:
    header_len = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedPayloadError("truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise TruncatedPayloadError("truncated header")
    dims = struct.unpack(f">{ndims}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = len(raw) - header_len
    if payload < expected:
        raise TruncatedPayloadError(f"truncated payload: {payload} of {expected} bytes")
    if payload > expected:
        raise DimensionMismatchError(
            f"payload has {payload} bytes but header dimensions {dims} imply {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def read_idx_images_raw(path) -> np.ndarray:
    return _parse_idx(_read(path), IMAGE_MAGIC, 3)


def load_idx_images(path) -> np.ndarray:
    """Images ``(count, rows, cols)`` scaled to [0, 1]."""
    return read_idx_images_raw(path) / 255.0


def load_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read(path), LABEL_MAGIC, 1).astype(np.int64)


def write_idx_images(path, images) -> None:
    data = np.asarray(images)
    if data.dtype != np.uint8:
        data = np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
    if data.ndim != 3:
        raise DimensionMismatchError(f"expected (count, rows, cols), got {data.shape}")
    Path(path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, *data.shape) + data.tobytes())


def write_idx_labels(path, labels) -> None:
    data = np.asarray(labels, dtype=np.uint8).ravel()
    Path(path).write_bytes(struct.pack(">2I", LABEL_MAGIC, data.size) + data.tobytes())


_TRAIN_IMAGE_NAMES = (
    "train-images-idx3-ubyte", "train-images.idx3-ubyte",
    "train-images-idx3-ubyte.gz", "train-images.idx3-ubyte.gz",
)


def find_mnist(mnist_dir=None) -> Path | None:
    """Locate the MNIST training images from a directory or ``$MNIST_DIR``."""
    root = mnist_dir or os.environ.get("MNIST_DIR")
    if not root:
        return None
    for name in _TRAIN_IMAGE_NAMES:
        candidate = Path(root) / name
        if candidate.is_file():
            return candidate
    return None


def synthetic_corpus(count: int = 64, seed: int = 0, size: int = 28) -> np.ndarray:
    """Offline stand-in for MNIST: soft random blobs and strokes in [0, 1].

    Deterministic in ``(count, seed)``; the first images do not depend on
    ``count``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((count, size, size))
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(7, size - 7, 2)
            theta = rng.uniform(0, np.pi)
            long_axis = rng.uniform(2.0, 7.0)
            short_axis = rng.uniform(0.8, 2.0)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            img = np.maximum(img, np.exp(-0.5 * ((u / long_axis) ** 2 + (v / short_axis) ** 2) ** 2))
        img = np.clip(1.6 * img - 0.1, 0.0, 1.0)
        out[i] = np.round(img * 255) / 255
    return out


def load_digits(count: int, mnist_dir=None, seed: int = 0) -> np.ndarray:
    """First ``count`` MNIST training digits, or the synthetic corpus if absent."""
    path = find_mnist(mnist_dir)
    if path is None:
        return synthetic_corpus(count, seed=seed)
    images = load_idx_images(path)
    if len(images) < count:
        raise ValueError(f"{path} holds {len(images)} images, {count} requested")
    return images[:count]


def apply_op(images, op: Op, se, mode: PadMode = EDGE) -> np.ndarray:
    """Exact target for ``op``. Erosion uses ``-se`` (see :func:`make_pairs`)."""
    op = Op.parse(op) if isinstance(op, str) else op
    if op is Op.DILATION:
        return oracle.dilate(images, se, mode)
    if op is Op.EROSION:
        return oracle.erode(images, -np.asarray(se), mode)
    if op is Op.CLOSING:
        return oracle.closing(images, se, mode)
    return oracle.opening(images, se, mode)


def make_pairs(images, spec: ScenarioSpec, mode: PadMode = EDGE):
    """Return ``(inputs, targets)`` arrays of shape ``(n, H, W)``.

    Erosion targets are ``f ⊖ (-se)``: the smooth layers tend to
    ``f ⊖ (-w)`` for negative shape parameters, so the learned ``w`` is then
    directly comparable with ``se``. The other operations use ``se`` as is.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) < spec.sample_count:
        raise ValueError(f"need {spec.sample_count} images, got {len(images)}")
    inputs = images[:spec.sample_count]
    return inputs, apply_op(inputs, spec.op, target_se(spec.se), mode)
