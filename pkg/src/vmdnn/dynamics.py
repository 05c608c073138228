"""Leaky-integrator kernels shared by the dense and convolutional levels.

Map stacks are indexed ``[map, x, y]`` (width first), optionally with a
leading batch axis.  Convolution is valid cross-correlation: no padding and
no kernel flip.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

ACT_A = 1.7159
ACT_B = 0.6667


def activation(x):
    """Scaled hyperbolic tangent ``1.7159 * tanh(0.6667 * x)``."""
    return ACT_A * np.tanh(ACT_B * x)


def activation_derivative(x):
    t = np.tanh(ACT_B * x)
    return ACT_A * ACT_B * (1.0 - t * t)


def conv_output_size(in_size: int, kernel: int, stride: int) -> int:
    """Valid-convolution output length; raises if the kernel does not tile exactly."""
    if kernel < 1 or stride < 1:
        raise ConfigError(f"kernel {kernel} and stride {stride} must be positive")
    span = in_size - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"kernel {kernel} with stride {stride} does not tile input of size {in_size}"
        )
    return span // stride + 1


@dataclass
class LeakyDenseLevel:
    size: int
    tau: float
    edges: list = field(default_factory=list)  # (source name, weight (size, n_source))
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.tau = float(self.tau)
        if self.tau < 1.0:
            raise ConfigError(f"time constant {self.tau} < 1")
        if self.bias is None:
            self.bias = np.zeros(self.size)
        for name, w in self.edges:
            if w.shape[0] != self.size:
                raise ConfigError(f"edge from {name}: weight has {w.shape[0]} rows, level has {self.size}")


@dataclass
class LeakyConvLevel:
    maps: int
    tau: float
    kernels: np.ndarray  # (maps, source maps, kW, kH)
    stride: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.tau = float(self.tau)
        if self.tau < 1.0:
            raise ConfigError(f"time constant {self.tau} < 1")
        if self.kernels.ndim != 4 or self.kernels.shape[0] != self.maps:
            raise ConfigError(f"kernel bank shape {self.kernels.shape} does not match {self.maps} maps")
        if self.bias is None:
            self.bias = np.zeros(self.maps)

    def output_geometry(self, in_w: int, in_h: int) -> tuple[int, int]:
        _, _, kw, kh = self.kernels.shape
        return conv_output_size(in_w, kw, self.stride), conv_output_size(in_h, kh, self.stride)


def leak(u_prev, drive, tau):
    """One leaky-integrator update: ``(1 - 1/tau) u + (1/tau) drive``."""
    return (1.0 - 1.0 / tau) * u_prev + (1.0 / tau) * drive


def conv_windows(x, kw: int, kh: int, stride: int):
    """Strided patch view ``(B, C, oW, oH, kW, kH)`` of a batched map stack ``(B, C, W, H)``."""
    win = sliding_window_view(x, (kw, kh), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def correlate(x, kernels, stride: int):
    """Batched valid cross-correlation summed over source maps.

    ``x`` is ``(B, C, W, H)``, ``kernels`` is ``(K, C, kW, kH)``; returns ``(B, K, oW, oH)``.
    """
    k_out, c, kw, kh = kernels.shape
    if x.shape[1] != c:
        raise ConfigError(f"source has {x.shape[1]} maps, kernel bank expects {c}")
    conv_output_size(x.shape[2], kw, stride)
    conv_output_size(x.shape[3], kh, stride)
    win = conv_windows(x, kw, kh, stride)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def correlate_kernel_grad(x, d, kw: int, kh: int, stride: int):
    """Gradient of ``sum(d * correlate(x, K))`` with respect to ``K``."""
    win = conv_windows(x, kw, kh, stride)
    return np.tensordot(d, win, axes=([0, 2, 3], [0, 2, 3]))


def correlate_input_grad(d, kernels, in_shape, stride: int):
    """Transposed correlation: scatter ``d`` (B, K, oW, oH) back onto the source maps."""
    _, _, kw, kh = kernels.shape
    b, _, ow, oh = d.shape
    cols = np.tensordot(d, kernels, axes=([1], [0]))  # (B, oW, oH, C, kW, kH)
    dx = np.zeros(in_shape)
    if ow * oh <= kw * kh:
        for i in range(ow):
            for j in range(oh):
                x0, y0 = i * stride, j * stride
                dx[:, :, x0:x0 + kw, y0:y0 + kh] += cols[:, i, j]
    else:
        xs = stride * (ow - 1) + 1
        ys = stride * (oh - 1) + 1
        for p in range(kw):
            for q in range(kh):
                dx[:, :, p:p + xs:stride, q:q + ys:stride] += cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return dx


def dense_step(u_prev, sources, level: LeakyDenseLevel):
    """Advance a dense leaky level one step.

    ``sources`` lists activation vectors in the same order as ``level.edges``.
    """
    if len(sources) != len(level.edges):
        raise ConfigError(f"{len(sources)} sources given for {len(level.edges)} edges")
    u_prev = np.asarray(u_prev, dtype=float)
    if u_prev.shape[-1] != level.size:
        raise ConfigError(f"state has {u_prev.shape[-1]} units, level has {level.size}")
    drive = np.broadcast_to(level.bias, u_prev.shape).astype(float)
    for (name, w), y in zip(level.edges, sources):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != w.shape[1]:
            raise ConfigError(f"source {name} has {y.shape[-1]} units, weight expects {w.shape[1]}")
        drive = drive + y @ w.T
    return leak(u_prev, drive, level.tau)


def conv_step(u_prev, source_maps, level: LeakyConvLevel):
    """Advance a convolutional leaky level one step (unbatched or batched stacks)."""
    src = np.asarray(source_maps, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    batched = src.ndim == 4
    if not batched:
        src = src[None]
        u_prev = u_prev[None]
    if src.ndim != 4:
        raise ConfigError(f"source map stack must be 3-D or 4-D, got shape {src.shape}")
    s = correlate(src, level.kernels, level.stride)
    if u_prev.shape != s.shape:
        raise ConfigError(f"state shape {u_prev.shape[1:]} does not match output geometry {s.shape[1:]}")
    u = leak(u_prev, s + level.bias[None, :, None, None], level.tau)
    return u if batched else u[0]
