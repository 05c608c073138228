"""KL loss, leaky-integrator BPTT, gradient descent and the two-phase protocol."""
from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import PopulationCodec, encode_analog
from .config import Config, NetworkConfig
from .dynamics import activation_derivative, correlate_input_grad, correlate_kernel_grad
from .errors import CheckpointError, ConfigError, InputError, NumericalDivergence, StateError
from .network import (LEVELS, PRETRAIN_GROUPS, VISION_GROUPS, ParameterSet, Trajectory, group_level,
                      group_shapes, run_sequence, taus)

log = logging.getLogger(__name__)

EPS = 1e-12


def kl_loss(targets, outputs, mask=None) -> float:
    """``sum_t mask_t sum_i tgt log(tgt / max(out, eps))`` with ``0 log 0 = 0``."""
    targets = np.asarray(targets, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    if targets.shape != outputs.shape:
        raise InputError(f"target shape {targets.shape} != output shape {outputs.shape}")
    return float(np.sum(_kl_terms(targets, outputs, mask)))


def _kl_terms(targets, outputs, mask):
    safe_t = np.where(targets > 0, targets, 1.0)
    terms = np.where(targets > 0, targets * (np.log(safe_t) - np.log(np.maximum(outputs, EPS))), 0.0)
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        terms = terms * mask.reshape(mask.shape + (1,) * (terms.ndim - mask.ndim))
    return terms


def _dense_grad(dd, y):
    """Accumulated outer product over the batch: ``(B, n_out), (B, n_in) -> (n_out, n_in)``."""
    return dd.T @ y


def bptt(params: ParameterSet, traj: Trajectory, targets, mask=None) -> dict[str, np.ndarray]:
    """Gradients of the masked KL loss for every trainable group.

    ``targets`` are softmax blocks ``(T, B, units)``; ``mask`` is ``(T,)`` or
    ``(T, B)`` per-step weights.  Deltas follow the leaky recursion: each
    level's ``dE/du`` carries ``(1 - 1/tau)`` of its own future delta plus
    ``f'(u)`` times the back-projected drive deltas of every level it feeds.
    """
    if traj.u is None or not traj.y:
        raise StateError("trajectory has no recorded states")
    cfg = params.config
    a = params.arrays
    mode = traj.mode
    out_level = "head" if mode == "pretrain" else "mo"
    if out_level not in traj.y:
        raise StateError(f"trajectory was not recorded in {mode} mode")
    y_out = traj.y[out_level]
    targets = np.asarray(targets, dtype=float)
    if targets.shape != y_out.shape:
        raise InputError(f"target shape {targets.shape} != output shape {y_out.shape}")
    T, B = y_out.shape[:2]
    if mask is None:
        mask = np.ones((T, B))
    mask = np.broadcast_to(np.asarray(mask, dtype=float).reshape((T, -1)), (T, B))

    trainable = set(params.trainable())
    if mode == "pretrain":
        trainable &= set(PRETRAIN_GROUPS)
    grads = {n: np.zeros_like(a[n]) for n in params.arrays if n in trainable}
    order = ["vf", "vs", "pfc"] + (["head"] if mode == "pretrain" else ["ms", "mf", "mo"])
    # vision levels receive no top-down input, so their deltas are only needed
    # when some group at or below them is trainable
    lowest = min((order.index(group_level(n)) for n in grads), default=len(order))
    active = order[min(lowest, 2):]
    tau = taus(cfg)
    keep = {k: 1.0 - 1.0 / tau[k] for k in order}
    gain = {k: 1.0 / tau[k] for k in order}

    def prev(level, t):
        if t > 0:
            return traj.y[level][t - 1]
        return np.zeros_like(traj.y[level][0])

    def add(name, value):
        if name in grads:
            grads[name] += value

    g_next = {k: np.zeros_like(traj.u[k][0]) for k in active}
    dd_next = {k: np.zeros_like(traj.u[k][0]) for k in active}
    for t in range(T - 1, -1, -1):
        g, dd = {}, {}
        top = active[-1]
        g[top] = mask[t][:, None] * (y_out[t] - targets[t]) + keep[top] * g_next[top]
        dd[top] = gain[top] * g[top]
        if mode == "pretrain":
            add("head.w", _dense_grad(dd["head"], traj.y["pfc"][t]))
            add("head.bias", dd["head"].sum(0))
        else:
            add("mo.w", _dense_grad(dd["mo"], traj.y["mf"][t]))
            add("mo.bias", dd["mo"].sum(0))

            e = dd["mo"] @ a["mo.w"] + dd_next["mf"] @ a["mf.rec"]
            if cfg.ms_topdown:
                e = e + dd_next["ms"] @ a["ms.td"]
            g["mf"] = keep["mf"] * g_next["mf"] + activation_derivative(traj.u["mf"][t]) * e
            dd["mf"] = gain["mf"] * g["mf"]
            add("mf.bu", _dense_grad(dd["mf"], traj.y["ms"][t]))
            add("mf.rec", _dense_grad(dd["mf"], prev("mf", t)))
            add("mf.bias", dd["mf"].sum(0))

            e = dd["mf"] @ a["mf.bu"] + dd_next["ms"] @ a["ms.rec"]
            if cfg.pfc_topdown:
                e = e + dd_next["pfc"] @ a["pfc.td"]
            g["ms"] = keep["ms"] * g_next["ms"] + activation_derivative(traj.u["ms"][t]) * e
            dd["ms"] = gain["ms"] * g["ms"]
            add("ms.bu", _dense_grad(dd["ms"], traj.y["pfc"][t]))
            add("ms.rec", _dense_grad(dd["ms"], prev("ms", t)))
            add("ms.td", _dense_grad(dd["ms"], prev("mf", t)))
            add("ms.bias", dd["ms"].sum(0))

        above = dd["head"] @ a["head.w"] if mode == "pretrain" else dd["ms"] @ a["ms.bu"]
        e = above + dd_next["pfc"] @ a["pfc.rec"]
        g["pfc"] = keep["pfc"] * g_next["pfc"] + activation_derivative(traj.u["pfc"][t]) * e
        dd["pfc"] = gain["pfc"] * g["pfc"]
        kw, kh = cfg.pfc_kernel
        d4 = dd["pfc"][:, :, None, None]
        add("pfc.kernel", correlate_kernel_grad(traj.y["vs"][t], d4, kw, kh, cfg.pfc_stride))
        add("pfc.rec", _dense_grad(dd["pfc"], prev("pfc", t)))
        if mode == "action":
            add("pfc.td", _dense_grad(dd["pfc"], prev("ms", t)))
        add("pfc.bias", dd["pfc"].sum(0))

        if "vs" in active:
            e = correlate_input_grad(dd["pfc"][:, :, None, None], a["pfc.kernel"], traj.y["vs"][t].shape,
                                     cfg.pfc_stride)
            g["vs"] = keep["vs"] * g_next["vs"] + activation_derivative(traj.u["vs"][t]) * e
            dd["vs"] = gain["vs"] * g["vs"]
            kw, kh = cfg.vs.kernel
            add("vs.kernel", correlate_kernel_grad(traj.y["vf"][t], dd["vs"], kw, kh, cfg.vs.stride))
            add("vs.bias", dd["vs"].sum((0, 2, 3)))
        if "vf" in active:
            e = correlate_input_grad(dd["vs"], a["vs.kernel"], traj.y["vf"][t].shape, cfg.vs.stride)
            g["vf"] = keep["vf"] * g_next["vf"] + activation_derivative(traj.u["vf"][t]) * e
            dd["vf"] = gain["vf"] * g["vf"]
            kw, kh = cfg.vf.kernel
            add("vf.kernel", correlate_kernel_grad(traj.frames[t][:, None], dd["vf"], kw, kh, cfg.vf.stride))
            add("vf.bias", dd["vf"].sum((0, 2, 3)))
        g_next, dd_next = g, dd
    return grads


class SGD:
    """Plain gradient descent; optional heavy-ball momentum (off by default)."""

    def __init__(self, lr: float, momentum: float = 0.0, clip: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate {lr} < 0")
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray], epoch: int = 0) -> None:
        bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise NumericalDivergence(bad[0], epoch, f"non-finite gradient in groups {bad}")
        scale = 1.0
        if self.clip > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                scale = self.clip / norm
        for name, g in grads.items():
            if name in params.frozen:
                continue
            if scale != 1.0:
                g = g * scale
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params.arrays[name] -= self.lr * g


def sgd_update(params: ParameterSet, grads: dict[str, np.ndarray], lr: float) -> ParameterSet:
    """Decrement each trainable group by ``lr * grad``; frozen groups are left untouched."""
    SGD(lr).step(params, grads)
    return params


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    sequence_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def write_records(records: list[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(r.loss), f"{r.seconds:.6f}"])


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length sequences into ``(T_max, B, ...)``; returns the array and a validity mask."""
    T = max(len(s) for s in seqs)
    out = np.zeros((T, len(seqs)) + seqs[0].shape[1:])
    valid = np.zeros((T, len(seqs)))
    for b, s in enumerate(seqs):
        out[:len(s), b] = s
        out[len(s):, b] = s[-1]
        valid[:len(s), b] = 1.0
    return out, valid


def delay_window_mask(lengths, window: float) -> np.ndarray:
    """``(T_max, B)`` mask selecting the last ``ceil(window * T)`` steps of each sequence."""
    T = max(lengths)
    mask = np.zeros((T, len(lengths)))
    for b, n in enumerate(lengths):
        k = max(1, int(np.ceil(window * n - 1e-9)))
        mask[n - k:n, b] = 1.0
    return mask


def pretrain(params: ParameterSet, frames: list[np.ndarray], labels, epochs: int, lr: float,
             window: float = 0.2, momentum: float = 0.0, clip: float = 0.0, callback=None):
    """Delay-response classifier training of the vision levels and PFC through the head.

    ``frames`` is a list of ``(T, W, H)`` sequences; the class target only
    counts over the final ``window`` fraction of each sequence.  One full-batch
    update per epoch.
    """
    if not params.has_head:
        raise StateError("attach the pretraining head before pretraining")
    labels = np.asarray(labels, dtype=int)
    C = params.num_classes
    if labels.min() < 0 or labels.max() >= C:
        raise InputError(f"labels must lie in [0, {C})")
    x, _ = _pad(frames)
    mask = delay_window_mask([len(f) for f in frames], window)
    targets = np.broadcast_to(np.eye(C)[labels], (x.shape[0], len(labels), C))
    opt = SGD(lr, momentum, clip)
    saved = set(params.frozen)
    params.frozen |= set(params.arrays) - set(PRETRAIN_GROUPS)
    records = []
    try:
        for epoch in range(epochs):
            start = time.perf_counter()
            traj = run_sequence(params, x, mode="pretrain")
            per_seq = _kl_terms(targets, traj.outputs, mask).sum(axis=(0, 2))
            grads = bptt(params, traj, targets, mask)
            opt.step(params, grads, epoch)
            rec = TrainRecord(epoch, float(per_seq.sum()), per_seq.tolist(), time.perf_counter() - start)
            records.append(rec)
            if callback is not None:
                callback(rec)
    finally:
        params.frozen = saved
    return params, records


def classify(params: ParameterSet, frames: list[np.ndarray], window: float = 0.2) -> np.ndarray:
    """Predicted class per sequence: argmax of the head output averaged over the delay window."""
    x, _ = _pad(frames)
    mask = delay_window_mask([len(f) for f in frames], window)
    out = run_sequence(params, x, mode="pretrain").outputs
    return np.argmax((out * mask[:, :, None]).sum(0), axis=-1)


def check_coupled_protocol(params: ParameterSet) -> None:
    if params.has_head:
        raise StateError("detach the pretraining head before coupled training")
    open_groups = [n for n in VISION_GROUPS if n not in params.frozen]
    if open_groups:
        raise ConfigError(f"vision groups must be frozen for coupled training: {open_groups}")


def train_coupled(params: ParameterSet, frames: list[np.ndarray], analog_targets: list[np.ndarray],
                  epochs: int, lr: float = 1e-4, sigma: float = 0.05, momentum: float = 0.0,
                  clip: float = 0.0, callback=None):
    """Joint training of PFC and the motor levels on teacher sequences, vision frozen.

    ``analog_targets`` are ``(T, D)`` teacher trajectories in [-1, 1]; they are
    population-coded and the KL loss covers every output step.
    """
    check_coupled_protocol(params)
    cfg = params.config
    codec = PopulationCodec(cfg.dims, cfg.units_per_dim, sigma)
    x, valid = _pad(frames)
    tgt, _ = _pad([np.asarray(a, dtype=float) for a in analog_targets])
    targets = encode_analog(tgt, codec)
    vision = run_sequence(params, x)  # vision levels are frozen: reuse them every epoch
    opt = SGD(lr, momentum, clip)
    records = []
    for epoch in range(epochs):
        start = time.perf_counter()
        traj = run_sequence(params, x, vision=vision)
        per_seq = _kl_terms(targets, traj.outputs, valid).sum(axis=(0, 2))
        grads = bptt(params, traj, targets, valid)
        opt.step(params, grads, epoch)
        rec = TrainRecord(epoch, float(per_seq.sum()), per_seq.tolist(), time.perf_counter() - start)
        records.append(rec)
        if callback is not None:
            callback(rec)
    return params, records


# --- checkpoints -----------------------------------------------------------

MAGIC = b"VMDN"
VERSION = 1


def save_checkpoint(params: ParameterSet, config: Config, path) -> None:
    """Little-endian: magic, u32 version, u32-prefixed config text, u32 group count,
    then per group: u32-prefixed name, u8 frozen flag, u32 ndim, u32 dims, f64 payload."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    text = config.to_text().encode()
    chunks += [struct.pack("<I", len(text)), text, struct.pack("<I", len(params.arrays))]
    for name, arr in params.arrays.items():
        nb = name.encode()
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<B", name in params.frozen),
                   struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                   np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect: NetworkConfig | None = None) -> tuple[ParameterSet, Config]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    With ``expect`` given, the stored groups must match the layout of that
    network configuration; the first mismatching group is named otherwise.
    """
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    try:
        config = Config.from_text(r.take(r.u32()).decode())
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad config echo: {exc}") from None
    arrays, frozen = {}, set()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        flag = r.take(1)[0]
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(float)
        if flag:
            frozen.add(name)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    _check_layout(arrays, config.network, path, "its own config echo")
    if expect is not None:
        _check_layout(arrays, expect, path, "the expected config")
    return ParameterSet(config.network, arrays, frozen), config


def _check_layout(arrays: dict, net: NetworkConfig, path, what: str) -> None:
    try:
        shapes = group_shapes(net)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: group {name} missing (required by {what})")
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: group {name} has shape {arrays[name].shape}, "
                                  f"{what} needs {shape}")
    extra = [n for n in arrays if n not in shapes and not n.startswith("head.")]
    if extra:
        raise CheckpointError(f"{path}: group {extra[0]} not part of {what}")


__all__ = ["kl_loss", "bptt", "sgd_update", "SGD", "pretrain", "train_coupled", "classify",
           "save_checkpoint", "load_checkpoint", "TrainRecord", "write_records", "delay_window_mask",
           "LEVELS"]
