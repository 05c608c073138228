"""Central finite-difference check of the analytic BPTT gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import PopulationCodec, encode_analog
from .network import PRETRAIN_GROUPS, ParameterSet, run_sequence
from .training import bptt, kl_loss

TOL = 1e-5
# denominators below this are treated as this value, so vanishing gradients
# are compared on an absolute scale of FLOOR * tolerance
FLOOR = 1e-6
# a central difference of a loss L carries about eps * |L| / h of rounding
# noise; entries are compared absolutely once they drop below this many
# noise units divided by the tolerance
NOISE_UNITS = 10.0


@dataclass
class GroupReport:
    name: str
    worst: float  # relative error with the resolution floor
    index: tuple
    analytic: float
    numeric: float
    strict: float = 0.0  # relative error with only FLOOR, ignoring finite-difference noise
    unresolved: int = 0  # entries below the resolution floor

    def passed(self, tol: float = TOL) -> bool:
        return self.worst <= tol


def relative_error(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, FLOOR))


def resolution_floor(loss: float, h: float, tol: float = TOL) -> float:
    """Smallest gradient magnitude whose relative error ``tol`` a central difference can resolve."""
    return NOISE_UNITS * np.finfo(float).eps * abs(loss) / h / tol


def randomize(params: ParameterSet, scale: float = 1.0, seed: int = 0) -> ParameterSet:
    """Redraw every group, biases included, uniform on ``[-scale, scale]``.

    Zero biases and small weights keep the upper levels near their fixed point,
    where weight gradients sink into finite-difference roundoff.
    """
    rng = np.random.default_rng(seed)
    for name in params.arrays:
        params.arrays[name] = rng.uniform(-scale, scale, size=params.arrays[name].shape)
    return params


def random_problem(params: ParameterSet, steps: int, batch: int = 1, seed: int = 0, mode: str = "action"):
    """Random frames in [-1, 1], random valid target distributions and a random step mask."""
    rng = np.random.default_rng(seed)
    cfg = params.config
    frames = rng.uniform(-1, 1, size=(steps, batch) + tuple(cfg.retina))
    if mode == "pretrain":
        targets = np.eye(params.num_classes)[rng.integers(0, params.num_classes, size=batch)]
        targets = np.broadcast_to(targets, (steps, batch, params.num_classes)).copy()
    else:
        codec = PopulationCodec(cfg.dims, cfg.units_per_dim)
        targets = encode_analog(rng.uniform(-0.9, 0.9, size=(steps, batch, cfg.dims)), codec)
    mask = rng.uniform(0.5, 1.0, size=(steps, batch))
    return frames, targets, mask


def total_loss(params: ParameterSet, frames, targets, mask, mode: str = "action") -> float:
    return kl_loss(targets, run_sequence(params, frames, mode=mode).outputs, mask)


def check_gradients(params: ParameterSet, frames, targets, mask, mode: str = "action", h: float = 1e-5,
                    backward=bptt, tol: float = TOL) -> list[GroupReport]:
    """Compare ``backward`` against central differences for every scalar of every trainable group."""
    traj = run_sequence(params, frames, mode=mode)
    floor = resolution_floor(kl_loss(targets, traj.outputs, mask), h, tol)
    grads = backward(params, traj, targets, mask)
    names = [n for n in params.trainable() if mode == "action" or n in PRETRAIN_GROUPS]
    if mode == "action":
        names = [n for n in names if not n.startswith("head.")]
    reports = []
    for name in names:
        arr = params.arrays[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = total_loss(params, frames, targets, mask, mode)
            arr[idx] = orig - h
            down = total_loss(params, frames, targets, mask, mode)
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        err = relative_error(grads[name], numeric, floor)
        strict = relative_error(grads[name], numeric)
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        unresolved = int(np.count_nonzero(np.maximum(np.abs(grads[name]), np.abs(numeric)) < floor))
        reports.append(GroupReport(name, float(err[worst]) if err.size else 0.0, tuple(int(i) for i in worst),
                                   float(grads[name][worst]), float(numeric[worst]),
                                   float(strict.max()) if err.size else 0.0, unresolved))
    return reports
