"""Network I/O conversions: softmax population code, frame preprocessing, foveal retina.

Images handed to :func:`preprocess_frame` and the PGM helpers use the usual
row-major ``(height, width[, channels])`` layout.  Everything produced here for
the network (retina frames, scenes) is indexed ``[x, y]`` with shape
``(width, height)``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

RETINA_W, RETINA_H = 64, 48


@dataclass(frozen=True)
class PopulationCodec:
    dims: int
    units_per_dim: int = 10
    sigma: float = 0.05

    @property
    def reference_points(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.units_per_dim)

    @property
    def width(self) -> int:
        return self.dims * self.units_per_dim

    def blocks(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.width:
            raise InputError(f"expected {self.width} units, got {p.shape[-1]}")
        return p.reshape(p.shape[:-1] + (self.dims, self.units_per_dim))


def encode_analog(values, codec: PopulationCodec, warnings: Counter | None = None) -> np.ndarray:
    """Gaussian bump over the reference points, softmax-normalized per dimension.

    Accepts ``(..., D)``; returns ``(..., D*K)``.  Values outside [-1, 1] are
    clamped and counted under ``warnings["clamped"]`` when a counter is given.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[-1:] != (codec.dims,):
        raise InputError(f"expected {codec.dims} analog values, got shape {v.shape}")
    out_of_range = int(np.count_nonzero((v < -1.0) | (v > 1.0)))
    if out_of_range and warnings is not None:
        warnings["clamped"] += out_of_range
    v = np.clip(v, -1.0, 1.0)
    logits = -((v[..., None] - codec.reference_points) ** 2) / codec.sigma
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return p.reshape(v.shape[:-1] + (codec.width,))


def decode_analog(p, codec: PopulationCodec) -> np.ndarray:
    """Expectation of the reference points under each K-block: ``(..., D*K) -> (..., D)``."""
    blocks = codec.blocks(p)
    if np.any(blocks < 0):
        raise InputError("population code has negative entries")
    sums = blocks.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise InputError("population code block sums to zero")
    blocks = np.where(np.abs(sums - 1.0) > 1e-6, blocks / sums, blocks)
    r = codec.reference_points
    return np.clip(blocks @ r, r[0], r[-1])


def sample_bilinear(img, xs, ys, fill: float | None):
    """Bilinear samples of ``img[x, y]`` on the grid ``xs x ys`` (continuous pixel-index coordinates).

    Coordinates outside the image read the constant ``fill``, or the nearest
    edge pixel when ``fill`` is None.
    """
    img = np.asarray(img, dtype=float)
    padded = np.pad(img, 1, mode="edge") if fill is None else np.pad(img, 1, constant_values=fill)
    xs = np.clip(np.asarray(xs, dtype=float) + 1.0, 0.0, padded.shape[0] - 1.0)
    ys = np.clip(np.asarray(ys, dtype=float) + 1.0, 0.0, padded.shape[1] - 1.0)
    x0 = np.minimum(np.floor(xs).astype(int), padded.shape[0] - 2)
    y0 = np.minimum(np.floor(ys).astype(int), padded.shape[1] - 2)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[None, :]
    a = padded[np.ix_(x0, y0)]
    b = padded[np.ix_(x0 + 1, y0)]
    c = padded[np.ix_(x0, y0 + 1)]
    d = padded[np.ix_(x0 + 1, y0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _view(img, x_lo: float, y_lo: float, extent_w: float, extent_h: float, fill: float | None):
    """Resample the window ``[x_lo, x_lo+extent_w) x [y_lo, y_lo+extent_h)`` to the retina grid."""
    xs = x_lo + (np.arange(RETINA_W) + 0.5) * (extent_w / RETINA_W) - 0.5
    ys = y_lo + (np.arange(RETINA_H) + 0.5) * (extent_h / RETINA_H) - 0.5
    return sample_bilinear(img, xs, ys, fill)


def preprocess_frame(raw, max_intensity: float | None = None) -> np.ndarray:
    """Grayscale, bilinear resize to 64x48 and map ``[0, max_intensity]`` onto ``[-1, 1]``.

    ``raw`` is ``(H, W)`` or ``(H, W, C)``; the result is a retina frame ``(64, 48)``
    indexed ``[x, y]``.  ``max_intensity`` defaults to the integer dtype maximum,
    or 1.0 for float images.
    """
    raw = np.asarray(raw)
    if raw.size == 0 or raw.ndim not in (2, 3):
        raise InputError(f"expected a nonempty 2-D or 3-D image, got shape {raw.shape}")
    if max_intensity is None:
        max_intensity = float(np.iinfo(raw.dtype).max) if np.issubdtype(raw.dtype, np.integer) else 1.0
    gray = raw.astype(float)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    img = gray.T  # -> [x, y]
    w, h = img.shape
    out = _view(img, 0.0, 0.0, w, h, fill=None)
    return np.clip(2.0 * out / max_intensity - 1.0, -1.0, 1.0)


def render_retina(scene, gaze, focus: float) -> np.ndarray:
    """Foveal view of a scene ``[x, y]`` with values in [-1, 1].

    ``focus < 0`` shows the whole scene extent centered on the gaze point,
    downsampled to 64x48; ``focus >= 0`` shows a window of half the scene
    width and height around the gaze.  Outside the scene reads -1.
    """
    scene = np.asarray(scene, dtype=float)
    w, h = scene.shape
    gx = float(np.clip(gaze[0], 0.0, w))
    gy = float(np.clip(gaze[1], 0.0, h))
    ew, eh = (w, h) if focus < 0 else (w / 2.0, h / 2.0)
    frame = _view(scene, gx - ew / 2.0, gy - eh / 2.0, ew, eh, fill=-1.0)
    return np.clip(frame, -1.0, 1.0)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) portable graymap; returns ``(pixels (H, W), maxval)``."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    payload = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * dtype.itemsize else None
    if payload is None or width == 0 or height == 0:
        raise InputError(f"{path}: PGM payload shorter than {width}x{height}")
    return payload.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, pixels, maxval: int = 255) -> None:
    pixels = np.asarray(pixels)
    height, width = pixels.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{width} {height}\n{maxval}\n".encode()
    Path(path).write_bytes(header + np.clip(pixels, 0, maxval).astype(dtype).tobytes())
