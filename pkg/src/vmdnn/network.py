"""The seven-level visuo-motor network: parameters, state and the forward pass.

Levels, bottom to top of the vision pathway and back down the motor pathway::

    vi (frame) -> vf (conv) -> vs (conv) -> pfc -> ms -> mf -> mo (softmax blocks)

Within a step each level consumes the activation its lower neighbour has just
computed and the previous-step activations of its recurrent and top-down
sources.  All state arrays carry a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .dynamics import activation, correlate, leak
from .errors import ConfigError, InputError, NumericalDivergence, StateError

LEVELS = ("vf", "vs", "pfc", "ms", "mf", "mo")
VISION_GROUPS = ("vf.kernel", "vf.bias", "vs.kernel", "vs.bias")
PRETRAIN_GROUPS = VISION_GROUPS + ("pfc.kernel", "pfc.rec", "pfc.bias", "head.w", "head.bias")


def group_level(name: str) -> str:
    return name.split(".", 1)[0]


def group_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter groups and their shapes (head excluded)."""
    geo = config.geometry()
    vf, vs = config.vf, config.vs
    p, s, f, o = config.pfc_units, config.ms_units, config.mf_units, config.output_units
    shapes = {
        "vf.kernel": (vf.maps, 1) + tuple(vf.kernel),
        "vf.bias": (vf.maps,),
        "vs.kernel": (vs.maps, vf.maps) + tuple(vs.kernel),
        "vs.bias": (vs.maps,),
        "pfc.kernel": (p, geo["vs"][0]) + tuple(config.pfc_kernel),
        "pfc.rec": (p, p),
    }
    if config.pfc_topdown:
        shapes["pfc.td"] = (p, s)
    shapes.update({"pfc.bias": (p,), "ms.bu": (s, p), "ms.rec": (s, s)})
    if config.ms_topdown:
        shapes["ms.td"] = (s, f)
    shapes.update({
        "ms.bias": (s,),
        "mf.bu": (f, s),
        "mf.rec": (f, f),
        "mf.bias": (f,),
        "mo.w": (o, f),
        "mo.bias": (o,),
    })
    return shapes


def taus(config: NetworkConfig) -> dict[str, float]:
    return {"vf": float(config.vf.tau), "vs": float(config.vs.tau), "pfc": float(config.pfc_tau),
            "ms": float(config.ms_tau), "mf": float(config.mf_tau), "mo": float(config.mo_tau), "head": 1.0}


@dataclass
class ParameterSet:
    config: NetworkConfig
    arrays: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def has_head(self) -> bool:
        return "head.w" in self.arrays

    @property
    def num_classes(self) -> int:
        return self.arrays["head.w"].shape[0] if self.has_head else 0

    def trainable(self) -> list[str]:
        return [n for n in self.arrays if n not in self.frozen]

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, {k: v.copy() for k, v in self.arrays.items()}, set(self.frozen))

    def freeze(self, names) -> None:
        for n in names:
            if n not in self.arrays:
                raise ConfigError(f"no parameter group {n!r}")
            self.frozen.add(n)

    def unfreeze(self, names) -> None:
        self.frozen.difference_update(names)


def _init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def build_network(config: NetworkConfig, seed: int = 0) -> tuple[ParameterSet, "NetworkState"]:
    """Weights and kernels i.i.d. uniform on ``[-init_range, init_range]``; biases zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in group_shapes(config).items():
        arrays[name] = np.zeros(shape) if name.endswith(".bias") else _init(rng, shape, config.init_range)
    return ParameterSet(config, arrays), reset_state(config)


def attach_pretraining_head(params: ParameterSet, num_classes: int, seed: int = 0) -> ParameterSet:
    """Add a softmax classifier fed by the PFC activations."""
    if params.has_head:
        raise StateError("pretraining head already attached")
    if num_classes < 2:
        raise InputError("a classifier needs at least two classes")
    rng = np.random.default_rng(seed)
    params.arrays["head.w"] = _init(rng, (num_classes, params.config.pfc_units), params.config.init_range)
    params.arrays["head.bias"] = np.zeros(num_classes)
    return params


def detach_pretraining_head(params: ParameterSet) -> ParameterSet:
    """Remove the classifier and freeze the pre-trained vision kernels and biases."""
    if not params.has_head:
        raise StateError("no pretraining head attached")
    del params.arrays["head.w"], params.arrays["head.bias"]
    params.frozen.discard("head.w")
    params.frozen.discard("head.bias")
    params.freeze(VISION_GROUPS)
    return params


@dataclass
class NetworkState:
    u: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    t: int = 0

    @property
    def batch(self) -> int:
        return self.u["vf"].shape[0]

    def copy(self) -> "NetworkState":
        return NetworkState({k: v.copy() for k, v in self.u.items()},
                            {k: v.copy() for k, v in self.y.items()}, self.t)


def level_shapes(config: NetworkConfig, num_classes: int = 0) -> dict[str, tuple[int, ...]]:
    geo = config.geometry()
    shapes = {"vf": geo["vf"], "vs": geo["vs"], "pfc": (config.pfc_units,), "ms": (config.ms_units,),
              "mf": (config.mf_units,), "mo": (config.output_units,)}
    if num_classes:
        shapes["head"] = (num_classes,)
    return shapes


def blockwise_softmax(u, block: int):
    z = u.reshape(u.shape[:-1] + (-1, block))
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    z /= z.sum(axis=-1, keepdims=True)
    return z.reshape(u.shape)


def reset_state(config: NetworkConfig, batch: int = 1, num_classes: int = 0) -> NetworkState:
    """Neutral state: all potentials zero, softmax blocks uniform."""
    u, y = {}, {}
    for name, shape in level_shapes(config, num_classes).items():
        u[name] = np.zeros((batch,) + shape)
        y[name] = np.zeros((batch,) + shape)
    y["mo"][:] = 1.0 / config.units_per_dim
    if num_classes:
        y["head"][:] = 1.0 / num_classes
    return NetworkState(u, y, 0)


def _check(u, level: str, step: int) -> None:
    if not np.isfinite(u).all():
        raise NumericalDivergence(level, step)


def vision_step(params: ParameterSet, state: NetworkState, frames, new: NetworkState, drives: dict | None):
    cfg = params.config
    a = params.arrays
    t = state.t + 1
    s = correlate(frames[:, None], a["vf.kernel"], cfg.vf.stride) + a["vf.bias"][None, :, None, None]
    u = leak(state.u["vf"], s, cfg.vf.tau)
    _check(u, "vf", t)
    new.u["vf"], new.y["vf"] = u, activation(u)
    if drives is not None:
        drives["vf"] = s
    s = correlate(new.y["vf"], a["vs.kernel"], cfg.vs.stride) + a["vs.bias"][None, :, None, None]
    u = leak(state.u["vs"], s, cfg.vs.tau)
    _check(u, "vs", t)
    new.u["vs"], new.y["vs"] = u, activation(u)
    if drives is not None:
        drives["vs"] = s


def upper_step(params: ParameterSet, state: NetworkState, y_vs, new: NetworkState, mode: str,
               drives: dict | None):
    cfg = params.config
    a = params.arrays
    t = state.t + 1
    b = y_vs.shape[0]
    prev = state.y

    def settle(level, s, tau):
        u = leak(state.u[level], s, tau)
        _check(u, level, t)
        new.u[level] = u
        if drives is not None:
            drives[level] = s
        return u

    s = correlate(y_vs, a["pfc.kernel"], cfg.pfc_stride).reshape(b, -1)
    s = s + prev["pfc"] @ a["pfc.rec"].T + a["pfc.bias"]
    if cfg.pfc_topdown:
        s = s + prev["ms"] @ a["pfc.td"].T
    new.y["pfc"] = activation(settle("pfc", s, cfg.pfc_tau))

    if mode == "pretrain":
        s = new.y["pfc"] @ a["head.w"].T + a["head.bias"]
        new.y["head"] = blockwise_softmax(settle("head", s, 1.0), s.shape[-1])
        return

    s = new.y["pfc"] @ a["ms.bu"].T + prev["ms"] @ a["ms.rec"].T + a["ms.bias"]
    if cfg.ms_topdown:
        s = s + prev["mf"] @ a["ms.td"].T
    new.y["ms"] = activation(settle("ms", s, cfg.ms_tau))

    s = new.y["ms"] @ a["mf.bu"].T + prev["mf"] @ a["mf.rec"].T + a["mf.bias"]
    new.y["mf"] = activation(settle("mf", s, cfg.mf_tau))

    s = new.y["mf"] @ a["mo.w"].T + a["mo.bias"]
    new.y["mo"] = blockwise_softmax(settle("mo", s, cfg.mo_tau), cfg.units_per_dim)


def _as_batch(frames, retina) -> np.ndarray:
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1:] != tuple(retina):
        raise InputError(f"frame shape {frames.shape} does not match retina {tuple(retina)}")
    return frames


def forward_step(params: ParameterSet, state: NetworkState, frame, mode: str = "action",
                 vision: tuple | None = None, drives: dict | None = None):
    """Advance one step; returns ``(new_state, output)``.

    ``output`` is the concatenated softmax blocks (action mode) or the class
    distribution (pretrain mode), shape ``(batch, units)``.  ``vision`` may
    supply precomputed ``(u_vf, y_vf, u_vs, y_vs)`` for this step, which is
    exact when the vision levels are frozen.
    """
    if mode not in ("action", "pretrain"):
        raise InputError(f"unknown mode {mode!r}")
    if mode == "pretrain" and not params.has_head:
        raise StateError("pretrain mode needs the pretraining head")
    new = NetworkState(dict(state.u), dict(state.y), state.t + 1)
    if vision is None:
        frames = _as_batch(frame, params.config.retina)
        if frames.shape[0] != state.batch:
            raise InputError(f"{frames.shape[0]} frames for a batch of {state.batch}")
        vision_step(params, state, frames, new, drives)
    else:
        new.u["vf"], new.y["vf"], new.u["vs"], new.y["vs"] = vision
    upper_step(params, state, new.y["vs"], new, mode, drives)
    return new, new.y["head" if mode == "pretrain" else "mo"]


@dataclass
class Trajectory:
    """Recorded potentials, activations and drives; arrays are ``(T, batch, ...)``."""
    frames: np.ndarray
    u: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    drive: dict[str, np.ndarray]
    mode: str = "action"

    @property
    def steps(self) -> int:
        return self.frames.shape[0]

    @property
    def outputs(self) -> np.ndarray:
        return self.y["head" if self.mode == "pretrain" else "mo"]

    def vision(self, t: int) -> tuple:
        return self.u["vf"][t], self.y["vf"][t], self.u["vs"][t], self.y["vs"][t]


def run_sequence(params: ParameterSet, frames, mode: str = "action", vision: Trajectory | None = None,
                 record_drive: bool = False) -> Trajectory:
    """Reset, then step through ``frames`` ``(T, W, H)`` or ``(T, B, W, H)`` recording everything.

    Passing ``vision`` reuses the vision levels of an earlier trajectory over the
    same frames (only valid while the vision parameters are unchanged).
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 3:
        frames = frames[:, None]
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise InputError(f"expected a nonempty (T, [B,] W, H) frame array, got {frames.shape}")
    cfg = params.config
    state = reset_state(cfg, frames.shape[1], params.num_classes if mode == "pretrain" else 0)
    levels = list(state.u) if mode == "action" else ["vf", "vs", "pfc", "head"]
    us = {k: [] for k in levels}
    ys = {k: [] for k in levels}
    ds = {k: [] for k in levels}
    for t in range(frames.shape[0]):
        drives = {} if record_drive else None
        try:
            state, _ = forward_step(params, state, frames[t], mode,
                                    vision.vision(t) if vision is not None else None, drives)
        except NumericalDivergence as exc:
            raise NumericalDivergence(exc.level, t + 1, "during run_sequence") from None
        for k in levels:
            us[k].append(state.u[k])
            ys[k].append(state.y[k])
            if record_drive and k in drives:
                ds[k].append(drives[k])
    return Trajectory(frames, {k: np.stack(v) for k, v in us.items()},
                      {k: np.stack(v) for k, v in ys.items()},
                      {k: np.stack(v) for k, v in ds.items() if v}, mode)
