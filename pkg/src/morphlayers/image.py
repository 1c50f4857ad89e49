"""Image and kernel containers, padding, rescaling and error metrics.

Images are 2D ``float64`` arrays (rows x cols). Most functions also accept a
stack of images with leading batch axes ``(..., H, W)``. Kernels are square
arrays with an odd side and their origin at the center cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class PadMode:
    """Border policy for windows overlapping the image edge.

    ``kind`` is ``"edge"`` (replicate the nearest pixel), ``"constant"``, or
    ``"clip"``. Clip restricts windows to pixels inside the image, which is
    what the lattice identities of opening and closing need at the border; it
    is only supported by the exact operators in :mod:`morphlayers.oracle`.
    """

    kind: str = "edge"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("edge", "constant", "clip"):
            raise ValueError(f"unknown pad kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError("constant pad value must be finite")

    @classmethod
    def edge(cls) -> "PadMode":
        return cls("edge")

    @classmethod
    def clip(cls) -> "PadMode":
        return cls("clip")

    @classmethod
    def constant(cls, value: float = 0.0) -> "PadMode":
        return cls("constant", float(value))


EDGE = PadMode.edge()


def as_image(f, *, batched: bool = False) -> np.ndarray:
    """Validate and convert to a float64 image (or image stack)."""
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim < 2 or (not batched and arr.ndim != 2):
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    if arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise EmptyInputError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def as_kernel(w, *, allow_sentinel: bool = False) -> np.ndarray:
    """Validate a square kernel with odd side."""
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"kernel must be square, got shape {arr.shape}")
    if arr.shape[0] % 2 != 1:
        raise ValueError(f"kernel side must be odd, got {arr.shape[0]}")
    if not allow_sentinel and not np.all(np.isfinite(arr)):
        raise ValueError("kernel contains non-finite values")
    return arr


def rescale_unit_band(f) -> np.ndarray:
    """Map ``f`` linearly onto [1, 2] using its own min and max.

    For a stack ``(..., H, W)`` each image is rescaled independently. A
    constant image maps to the constant 1.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise EmptyInputError("empty input")
    lo = f.min(axis=(-2, -1), keepdims=True)
    span = f.max(axis=(-2, -1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 1.0 + (f - lo) / safe, 1.0)


def rescale_coefficients(f) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gain, offset)`` with ``rescale_unit_band(f) == gain*f + offset``."""
    f = np.asarray(f, dtype=np.float64)
    lo = f.min(axis=(-2, -1), keepdims=True)
    span = f.max(axis=(-2, -1), keepdims=True) - lo
    gain = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 0.0)
    return gain, 1.0 - gain * lo


def pad(f, margin: int, mode: PadMode = EDGE) -> np.ndarray:
    """Pad the two trailing axes by ``margin`` on every side."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    f = np.asarray(f, dtype=np.float64)
    widths = [(0, 0)] * (f.ndim - 2) + [(margin, margin)] * 2
    if mode.kind == "edge":
        return np.pad(f, widths, mode="edge")
    if mode.kind == "clip":
        raise ValueError("clip mode has no padded values; use the oracle operators")
    return np.pad(f, widths, mode="constant", constant_values=mode.value)


def crop(f, margin: int) -> np.ndarray:
    if margin == 0:
        return f
    return f[..., margin:-margin, margin:-margin]


def unpad_gradient(g, margin: int, mode: PadMode = EDGE) -> np.ndarray:
    """Adjoint of :func:`pad`: fold gradients on padded cells back onto the image.

    With edge replication every border cell is a copy of an edge pixel, so its
    gradient is routed to that pixel. Constant padding carries no gradient.
    """
    if margin == 0:
        return np.array(g, dtype=np.float64)
    g = np.array(g, dtype=np.float64)
    m = margin
    if mode.kind == "edge":
        g[..., m, :] += g[..., :m, :].sum(axis=-2)
        g[..., -m - 1, :] += g[..., -m:, :].sum(axis=-2)
        g[..., :, m] += g[..., :, :m].sum(axis=-1)
        g[..., :, -m - 1] += g[..., :, -m:].sum(axis=-1)
    return g[..., m:-m, m:-m]


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def rmse(a, b) -> float:
    """Root mean square difference between two kernels of the same side."""
    a = as_kernel(a)
    b = as_kernel(b)
    if a.shape != b.shape:
        raise ValueError(f"kernel side mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(mse(a, b)))


def write_pgm(path, f) -> None:
    """Write an image as binary PGM (P5), mapping its min..max onto 0..255."""
    f = as_image(f)
    lo, hi = f.min(), f.max()
    scaled = (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval < 256 into [0, 1] floats."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w) / maxval


def write_kernel_csv(path, w) -> None:
    w = as_kernel(w)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in w:
            writer.writerow([repr(float(v)) for v in row])


def read_kernel_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return as_kernel(rows)


def windows(f, side: int, mode: PadMode = EDGE) -> np.ndarray:
    """Read-only view ``(..., H, W, side, side)`` of the padded neighborhoods.

    ``windows(f)[..., i, j, a, b]`` is the pixel at offset ``(a - r, b - r)``
    from ``(i, j)`` where ``r = side // 2``.
    """
    r = side // 2
    padded = pad(f, r, mode)
    return np.lib.stride_tricks.sliding_window_view(padded, (side, side), axis=(-2, -1))
