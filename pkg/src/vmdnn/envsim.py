"""Deterministic 2D visuo-motor toy world.

The scene is a ``width x height`` grayscale canvas indexed ``[x, y]`` with y
growing downwards.  The agent controls a gaze point, a focus level, a hand
and a grasp level through ``D = 6`` analog commands::

    [gaze dx, gaze dy, hand dx, hand dy, grasp, focus]

Motion commands are velocities scaled by ``max_speed`` px/step; grasp and
focus are levels set directly.  Teacher trajectories are produced by a
scripted stage machine and executed through the same :func:`step_world` the
closed loop uses, so a network that reproduces the teacher commands
reproduces the teacher frames.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import PopulationCodec, decode_analog, encode_analog, render_retina
from .config import WorldConfig
from .errors import InputError
from .network import ParameterSet, forward_step, reset_state

D = 6
GAZE, HAND, GRASP, FOCUS = slice(0, 2), slice(2, 4), 4, 5
STAGES = ("cue", "attend", "reach", "focus", "grasp", "lift")

BACKGROUND = -0.7
# the screen matches the desk so pretrained vision keeps its operating point on the desk
SCREEN_SHADE = BACKGROUND
SHAPES = {"standing-bar": (4.0, 12.0), "laying-bar": (12.0, 4.0), "box": (8.0, 8.0), "obstacle": (6.0, 24.0)}
# each kind has its own shade so coarse vision features can tell them apart
SHADES = {"standing-bar": 0.8, "laying-bar": 0.3, "box": 0.6, "obstacle": 0.1}
OPEN, CLOSED = -0.8, 0.8
LOW, HIGH = -0.8, 0.8
VMAX, ACCEL = 0.75, 0.25


@dataclass
class WorldObject:
    x: float
    y: float
    shape: str
    intensity: float = 0.8
    lifted: bool = False

    @property
    def size(self) -> tuple[float, float]:
        return SHAPES[self.shape]

    def contains(self, x: float, y: float) -> bool:
        w, h = self.size
        return abs(x - self.x) < w / 2 and abs(y - self.y) < h / 2


@dataclass
class Cue:
    """A dot that appears at ``origin``, moves sideways for ``steps`` steps from ``onset``, then vanishes."""
    direction: int  # -1 left, +1 right
    onset: int
    steps: int = 10
    speed: float = 1.6
    origin: tuple[float, float] = (64.0, 20.0)
    size: float = 4.0

    def position(self, t: int):
        if t >= self.onset + self.steps:
            return None
        k = min(max(t - self.onset + 1, 0), self.steps)
        return self.origin[0] + self.direction * self.speed * k, self.origin[1]


@dataclass
class WorldState:
    width: int = 128
    height: int = 96
    objects: list[WorldObject] = field(default_factory=list)
    hand: tuple[float, float] = (64.0, 88.0)
    grasp: float = OPEN
    gaze: tuple[float, float] = (64.0, 48.0)
    focus: float = LOW
    cue: Cue | None = None
    screen: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1
    target: int | None = None  # index of the object the task asks for
    obstacle: int | None = None
    held: int | None = None
    collided: bool = False
    t: int = 0

    def copy(self) -> "WorldState":
        return dataclasses.replace(self, objects=[dataclasses.replace(o) for o in self.objects])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        d = dict(d)
        d["objects"] = [WorldObject(**o) for o in d["objects"]]
        if d.get("cue") is not None:
            c = dict(d["cue"])
            c["origin"] = tuple(c["origin"])
            d["cue"] = Cue(**c)
        for k in ("hand", "gaze", "screen"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _clamp(p, w, h):
    return float(np.clip(p[0], 0.0, w)), float(np.clip(p[1], 0.0, h))


def step_world(world: WorldState, commands, config: WorldConfig = WorldConfig()) -> WorldState:
    """Apply one step of decoded commands; returns a new state, the input is not modified."""
    c = np.clip(np.asarray(commands, dtype=float), -1.0, 1.0)
    if c.shape != (D,):
        raise InputError(f"expected {D} commands, got shape {c.shape}")
    w = world.copy()
    w.t += 1
    w.gaze = _clamp((w.gaze[0] + c[0] * config.max_speed, w.gaze[1] + c[1] * config.max_speed), w.width, w.height)
    old = w.hand
    w.hand = _clamp((old[0] + c[2] * config.max_speed, old[1] + c[3] * config.max_speed), w.width, w.height)
    w.grasp = float(c[GRASP])
    w.focus = float(c[FOCUS])
    if w.held is not None:
        if w.grasp > 0.5:
            obj = w.objects[w.held]
            obj.x += w.hand[0] - old[0]
            obj.y += w.hand[1] - old[1]
        else:
            w.held = None
    if w.held is None and w.grasp > 0.5:
        for i, obj in enumerate(w.objects):
            if i != w.obstacle and np.hypot(w.hand[0] - obj.x, w.hand[1] - obj.y) <= config.grasp_radius:
                obj.lifted = True
                w.held = i
                break
    if w.obstacle is not None and w.objects[w.obstacle].contains(*w.hand):
        w.collided = True
    return w


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    p = np.arange(n)
    return np.clip(np.minimum(p + 1, hi) - np.maximum(p, lo), 0.0, 1.0)


def _paint(canvas, cx, cy, w, h, value):
    cov = np.outer(_coverage(cx - w / 2, cx + w / 2, canvas.shape[0]),
                   _coverage(cy - h / 2, cy + h / 2, canvas.shape[1]))
    canvas *= 1.0 - cov
    canvas += cov * value


def render_scene(world: WorldState) -> np.ndarray:
    """Anti-aliased rendering of screen, cue dot, objects and hand."""
    canvas = np.full((world.width, world.height), BACKGROUND)
    if world.screen is not None:
        x0, y0, x1, y1 = world.screen
        _paint(canvas, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, SCREEN_SHADE)
    if world.cue is not None:
        pos = world.cue.position(world.t)
        if pos is not None:
            _paint(canvas, pos[0], pos[1], world.cue.size, world.cue.size, 1.0)
    for obj in world.objects:
        w, h = obj.size
        _paint(canvas, obj.x, obj.y, w, h, obj.intensity)
    _paint(canvas, world.hand[0], world.hand[1], 6.0, 6.0, 0.0 if world.grasp <= 0.5 else -0.4)
    return canvas


def observe(world: WorldState) -> np.ndarray:
    return render_retina(render_scene(world), world.gaze, world.focus)


# --- teacher scripts -------------------------------------------------------

def _trapezoid(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.minimum(np.minimum(k + 1, n - k), round(VMAX / ACCEL)) * ACCEL


def speed_profile(distance: float, max_speed: float = 4.0, steps: int | None = None) -> np.ndarray:
    """Nonnegative command sequence covering ``|distance|`` px with ramps of at most ACCEL per step.

    Without ``steps`` the shortest trapezoid peaking at VMAX is used; with it the
    trapezoid of that length is scaled down to the distance.
    """
    need = abs(distance) / max_speed
    if need < 1e-12:
        return np.zeros(0) if steps is None else np.zeros(steps)
    n = 1
    if steps is None:
        while _trapezoid(n).sum() < need:
            n += 1
    else:
        n = steps
        if _trapezoid(n).sum() < need:
            raise ValueError(f"{abs(distance):g} px does not fit in {steps} steps")
    prof = _trapezoid(n)
    return prof * (need / prof.sum())


class Script:
    """Accumulates teacher commands channel by channel, then plays them through the world."""

    def __init__(self, world: WorldState, config: WorldConfig):
        self.world0 = world
        self.config = config
        self.rows: list[np.ndarray] = []
        self.stages: list[str] = []
        self.levels = {GRASP: world.grasp, FOCUS: world.focus}
        self.pos = {"gaze": np.array(world.gaze, float), "hand": np.array(world.hand, float)}

    def _blank(self, n, stage):
        for _ in range(n):
            row = np.zeros(D)
            row[GRASP], row[FOCUS] = self.levels[GRASP], self.levels[FOCUS]
            self.rows.append(row)
            self.stages.append(stage)
        return len(self.rows) - n

    def hold(self, n: int, stage: str):
        self._blank(n, stage)

    def phase(self, stage: str, gaze=None, hand=None, grasp=None, focus=None, steps: int | None = None):
        """Concurrent moves to absolute targets and level ramps; lasts as long as the slowest channel.

        ``steps`` stretches the moves to a fixed duration so stage timing does not depend on distance.
        """
        plans = {}
        for key, target, chans in (("gaze", gaze, (0, 1)), ("hand", hand, (2, 3))):
            if target is None:
                continue
            delta = np.asarray(target, float) - self.pos[key]
            dist = float(np.hypot(*delta))
            prof = speed_profile(dist, self.config.max_speed, steps)
            unit = delta / dist if dist > 0 else np.zeros(2)
            plans[chans] = prof[:, None] * unit[None, :]
            self.pos[key] = np.asarray(target, float)
        for ch, level in ((GRASP, grasp), (FOCUS, focus)):
            if level is None:
                continue
            start = self.levels[ch]
            n = int(np.ceil(abs(level - start) / 0.2 - 1e-9))
            plans[ch] = np.linspace(start, level, n + 1)[1:]
            self.levels[ch] = level
        n = max((len(p) for p in plans.values()), default=0)
        if self.rows and n:
            # back-to-back moves on one effector get a rest step, so reversals stay within ACCEL
            last = self.rows[-1]
            if any(np.any(last[list(key)] != 0) for key in plans if isinstance(key, tuple)):
                pause = last.copy()
                pause[:4] = 0.0
                self.rows.append(pause)
                self.stages.append(self.stages[-1])
        first = self._blank(n, stage)
        for key, plan in plans.items():
            for k in range(n):
                if isinstance(key, tuple):
                    if k < len(plan):
                        self.rows[first + k][list(key)] = plan[k]
                else:
                    self.rows[first + k][key] = plan[min(k, len(plan) - 1)]

    def play(self, codec: PopulationCodec, label: int, name: str) -> "TeacherTrajectory":
        targets = np.array(self.rows)
        # the closed loop executes decoded network outputs, so the teacher does too
        executed = decode_analog(encode_analog(targets, codec), codec)
        world = self.world0.copy()
        frames = []
        for row in executed:
            frames.append(observe(world))
            world = step_world(world, row, self.config)
        return TeacherTrajectory(np.array(frames), targets, list(self.stages), label, self.world0.copy(), name,
                                 world)


@dataclass
class TeacherTrajectory:
    frames: np.ndarray  # (T, W, H)
    targets: np.ndarray  # (T, D)
    stages: list[str]
    label: int
    world_init: WorldState
    name: str = ""
    world_final: WorldState | None = None

    def __len__(self) -> int:
        return len(self.targets)


SCREEN = (44.0, 8.0, 84.0, 32.0)
SCREEN_GAZE = (64.0, 20.0)
HAND_START = (64.0, 88.0)


def _cue_world(config: WorldConfig, cue: Cue | None) -> WorldState:
    return WorldState(config.width, config.height, hand=HAND_START, gaze=SCREEN_GAZE, focus=HIGH,
                      cue=cue, screen=SCREEN)


def make_branching_dataset(config: WorldConfig = WorldConfig(), seed: int = 0, pre_cue: int = 4,
                           sigma: float = 0.05) -> list[TeacherTrajectory]:
    """Eight sequences: a dot moving left/right on a screen selects the left/right object in one of
    four standing/laying layouts.  Label = 4 * cue_index + layout_index; cue_index 0 is left.

    The script is deterministic; ``seed`` is accepted for interface symmetry and not used.
    """
    del seed
    codec = PopulationCodec(D, 10, sigma)
    out = []
    layouts = [(a, b) for a in ("standing-bar", "laying-bar") for b in ("standing-bar", "laying-bar")]
    for ci, direction in enumerate((-1, 1)):
        for li, (left, right) in enumerate(layouts):
            cue = Cue(direction, onset=pre_cue, steps=config.cue_steps)
            world = _cue_world(config, cue)
            world.objects = [WorldObject(40.0, 74.0, left, SHADES[left]),
                             WorldObject(88.0, 74.0, right, SHADES[right])]
            world.target = 0 if direction < 0 else 1
            obj = world.objects[world.target]
            s = Script(world, config)
            s.hold(pre_cue + config.cue_steps, "cue")
            s.phase("attend", gaze=(64.0, 56.0), focus=LOW)
            s.hold(3, "attend")
            s.phase("attend", gaze=(obj.x, obj.y))
            if obj.shape == "laying-bar":  # from the top
                s.phase("reach", hand=(obj.x, obj.y - 12.0), steps=14)
            else:  # from the side facing the hand
                side = 1.0 if obj.x < HAND_START[0] else -1.0
                s.phase("reach", hand=(obj.x + side * 12.0, obj.y), steps=14)
            s.phase("focus", hand=(obj.x, obj.y), focus=HIGH)
            s.phase("grasp", grasp=CLOSED)
            s.phase("lift", hand=(obj.x, obj.y - 12.0))
            s.hold(3, "lift")
            out.append(s.play(codec, 4 * ci + li, f"{'left' if direction < 0 else 'right'}-{left}-{right}"))
    return out


OBSTACLE_XS = (52.0, 56.0, 60.0)
OBJECT_XS = (76.0, 80.0, 84.0)


def reach_world(config: WorldConfig, obstacle_x: float, object_x: float) -> WorldState:
    world = WorldState(config.width, config.height, hand=(32.0, 84.0), gaze=(64.0, 48.0), focus=LOW)
    world.objects = [WorldObject(object_x, 70.0, "box", SHADES["box"]),
                     WorldObject(obstacle_x, 66.0, "obstacle", SHADES["obstacle"])]
    world.target, world.obstacle = 0, 1
    return world


def reach_teacher(config: WorldConfig, obstacle_x: float, object_x: float, codec: PopulationCodec,
                  label: int = 0) -> TeacherTrajectory:
    world = reach_world(config, obstacle_x, object_x)
    obj, obs = world.objects
    s = Script(world, config)
    s.hold(3, "attend")
    # fixed durations fit the largest distances on the grid
    s.phase("attend", gaze=(obs.x, obs.y), steps=10)
    s.phase("reach", hand=(obs.x, obs.y - obs.size[1] / 2 - 10.0), steps=19)
    s.phase("attend", gaze=(obj.x, obj.y), steps=13)
    s.phase("reach", hand=(obj.x, obj.y - 12.0), steps=14)
    s.phase("focus", hand=(obj.x, obj.y), focus=HIGH)
    s.phase("grasp", grasp=CLOSED)
    s.phase("lift", hand=(obj.x, obj.y - 12.0))
    s.hold(3, "lift")
    return s.play(codec, label, f"obstacle{obstacle_x:g}-object{object_x:g}")


def make_reach_dataset(config: WorldConfig = WorldConfig(), seed: int = 0, sigma: float = 0.05):
    """Nine teacher sequences on the 3x3 obstacle/object grid, plus a held-out world sampler.

    The sampler draws positions uniformly strictly inside the trained intervals.
    """
    codec = PopulationCodec(D, 10, sigma)
    train = [reach_teacher(config, bx, ox, codec, 3 * i + j)
             for i, bx in enumerate(OBSTACLE_XS) for j, ox in enumerate(OBJECT_XS)]
    rng = np.random.default_rng(seed)

    def held_out(n: int) -> list[WorldState]:
        out = []
        for _ in range(n):
            bx = rng.uniform(OBSTACLE_XS[0], OBSTACLE_XS[-1])
            ox = rng.uniform(OBJECT_XS[0], OBJECT_XS[-1])
            while not (OBSTACLE_XS[0] < bx < OBSTACLE_XS[-1]):
                bx = rng.uniform(OBSTACLE_XS[0], OBSTACLE_XS[-1])
            while not (OBJECT_XS[0] < ox < OBJECT_XS[-1]):
                ox = rng.uniform(OBJECT_XS[0], OBJECT_XS[-1])
            out.append(reach_world(config, bx, ox))
        return out

    return train, held_out


def make_moving_dot_dataset(config: WorldConfig = WorldConfig(), seed: int = 0):
    """Two-class delay-response set: the dot moves left (0) or right (1), then the screen stays blank.

    Onset, origin and speed vary per sequence; returns ``(frames list, labels)``.
    """
    rng = np.random.default_rng(seed)
    frames, labels = [], []
    T = config.pretrain_frames
    for k in range(2 * config.pretrain_per_class):
        label = k % 2
        cue = Cue(1 if label else -1, onset=int(rng.integers(2, 9)), steps=config.cue_steps,
                  speed=float(rng.uniform(1.2, 2.0)),
                  origin=(64.0 + rng.uniform(-6, 6), 20.0 + rng.uniform(-4, 4)))
        world = _cue_world(config, cue)
        seq = []
        for _ in range(T):
            seq.append(observe(world))
            world = dataclasses.replace(world, t=world.t + 1)
        frames.append(np.array(seq))
        labels.append(label)
    return frames, np.array(labels)


# --- closed loop -----------------------------------------------------------

@dataclass
class TrialResult:
    success: bool
    success_step: int | None
    commands: np.ndarray  # (T, D) decoded commands
    frames: np.ndarray  # (T, W, H)
    worlds: list[WorldState]  # state before each step, plus the final one
    u: dict[str, np.ndarray]  # per level (T, ...)
    y: dict[str, np.ndarray]
    drive: dict[str, np.ndarray]
    failure: str = ""

    @property
    def pfc(self) -> np.ndarray:
        return self.y["pfc"]


def task_status(world: WorldState, radius: float) -> tuple[bool, str]:
    """``(success, failure reason)`` for the current world."""
    if world.collided:
        return False, "hand entered obstacle"
    for i, obj in enumerate(world.objects):
        if obj.lifted and i != world.target:
            return False, f"lifted wrong object {i}"
    if world.target is None:
        return False, ""
    obj = world.objects[world.target]
    near = np.hypot(world.hand[0] - obj.x, world.hand[1] - obj.y) <= radius
    return bool(obj.lifted and near and world.grasp > 0.5), ""


def run_trial(params: ParameterSet, world_init: WorldState, steps: int, config: WorldConfig = WorldConfig(),
              sigma: float = 0.05) -> TrialResult:
    """Closed loop for ``steps`` steps: observe, network step, decode, act.

    Success is the first step at which the target object is lifted with the
    hand on it and grasp closed, provided no failure (obstacle entered, wrong
    object lifted) happened earlier.
    """
    cfg = params.config
    codec = PopulationCodec(cfg.dims, cfg.units_per_dim, sigma)
    if cfg.dims != D:
        raise InputError(f"network has {cfg.dims} analog outputs, the toy world needs {D}")
    state = reset_state(cfg)
    world = world_init.copy()
    worlds, frames, commands = [world], [], []
    rec_u, rec_y, rec_d = {}, {}, {}
    success_step, failure = None, ""
    for t in range(steps):
        frame = observe(world)
        drives = {}
        state, out = forward_step(params, state, frame, drives=drives)
        cmd = decode_analog(out[0], codec)
        world = step_world(world, cmd, config)
        frames.append(frame)
        commands.append(cmd)
        worlds.append(world)
        for k in state.u:
            rec_u.setdefault(k, []).append(state.u[k][0])
            rec_y.setdefault(k, []).append(state.y[k][0])
            rec_d.setdefault(k, []).append(drives[k][0])
        if success_step is None and not failure:
            ok, failure = task_status(world, config.grasp_radius)
            if ok:
                success_step = t + 1
    stack = lambda d: {k: np.array(v) for k, v in d.items()}  # noqa: E731
    return TrialResult(success_step is not None, success_step, np.array(commands), np.array(frames), worlds,
                       stack(rec_u), stack(rec_y), stack(rec_d), failure)


def trial_steps(teacher_len: int) -> int:
    return 3 * teacher_len


@dataclass
class DivergenceReport:
    distance: np.ndarray  # (T,)
    proj_a: np.ndarray  # (T, 2)
    proj_b: np.ndarray  # (T, 2)
    stages: list[str] | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "distance", "a_pc1", "a_pc2", "b_pc1", "b_pc2"])
            for t in range(len(self.distance)):
                stage = self.stages[t] if self.stages and t < len(self.stages) else ""
                w.writerow([t, stage, repr(float(self.distance[t])), *(repr(float(v)) for v in self.proj_a[t]),
                            *(repr(float(v)) for v in self.proj_b[t])])


def pfc_divergence_report(pfc_a, pfc_b, stages=None) -> DivergenceReport:
    """Per-step L2 distance between two PFC activation trajectories and their projection
    onto the first two principal components of the pooled states."""
    a = np.asarray(pfc_a, dtype=float)
    b = np.asarray(pfc_b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    dist = np.sqrt(((a - b) ** 2).sum(axis=1))
    pooled = np.concatenate([a, b])
    mean = pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(pooled - mean, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], a.shape[1]))])
    # fix the sign of each component for reproducible output
    signs = np.where(comps[np.arange(2), np.abs(comps).argmax(axis=1)] < 0, -1.0, 1.0)
    comps = comps * signs[:, None]
    return DivergenceReport(dist, (a - mean) @ comps.T, (b - mean) @ comps.T, stages)


# --- dataset files ---------------------------------------------------------

DATASET_MAGIC = b"VMDS"
DATASET_VERSION = 1


def write_dataset(path, seqs: list[TeacherTrajectory], units_per_dim: int = 10) -> None:
    """Little-endian: magic, u32 version, u32 count, then per sequence a header
    (u32 D, u32 K, u32 T, u32 W, u32 H, i32 label), T*W*H f32 frames (row-major
    over ``[t, x, y]``), T*D f64 targets, and u32-prefixed JSON metadata
    (name, stages, initial world)."""
    chunks = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(seqs))]
    for s in seqs:
        T, W, H = s.frames.shape
        chunks.append(struct.pack("<IIIIIi", s.targets.shape[1], units_per_dim, T, W, H, s.label))
        chunks.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(s.targets, dtype="<f8").tobytes())
        meta = json.dumps({"name": s.name, "stages": s.stages, "world_init": s.world_init.to_dict()}).encode()
        chunks += [struct.pack("<I", len(meta)), meta]
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path) -> list[TeacherTrajectory]:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise InputError(f"{path}: not a dataset file")
    pos = 4
    try:
        version, n = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != DATASET_VERSION:
            raise InputError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
        out = []
        for _ in range(n):
            d, _k, T, W, H, label = struct.unpack_from("<IIIIIi", data, pos)
            pos += 24
            frames = np.frombuffer(data, "<f4", T * W * H, pos).reshape(T, W, H).astype(float)
            pos += 4 * T * W * H
            targets = np.frombuffer(data, "<f8", T * d, pos).reshape(T, d).astype(float)
            pos += 8 * T * d
            (m,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + m > len(data):
                raise InputError(f"{path}: truncated metadata")
            meta = json.loads(data[pos:pos + m])
            pos += m
            out.append(TeacherTrajectory(frames, targets, meta["stages"], label,
                                         WorldState.from_dict(meta["world_init"]), meta["name"]))
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: malformed dataset: {exc}") from None
    return out
