"""Run configuration and the flat ``key = value`` config file format.

Every field of :class:`Config` has exactly one key.  Sizes such as kernels
are written ``WxH``; booleans as ``true``/``false``.  Lines starting with
``#`` are comments.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import conv_output_size
from .errors import ConfigError


@dataclass(frozen=True)
class ConvSpec:
    maps: int
    kernel: tuple[int, int]
    stride: int
    tau: float


@dataclass(frozen=True)
class NetworkConfig:
    retina: tuple[int, int] = (64, 48)
    vf: ConvSpec = ConvSpec(3, (22, 14), 2, 2.0)
    vs: ConvSpec = ConvSpec(6, (8, 6), 2, 30.0)
    pfc_units: int = 20
    pfc_kernel: tuple[int, int] = (8, 7)
    pfc_stride: int = 1
    pfc_tau: float = 150.0
    ms_units: int = 30
    ms_tau: float = 10.0
    mf_units: int = 50
    mf_tau: float = 2.0
    dims: int = 11
    units_per_dim: int = 10
    mo_tau: float = 1.0
    pfc_topdown: bool = True  # M_S -> PFC
    ms_topdown: bool = True  # M_F -> M_S
    init_range: float = 0.025

    @property
    def output_units(self) -> int:
        return self.dims * self.units_per_dim

    def geometry(self) -> dict[str, tuple[int, int, int]]:
        """Per-level (maps, width, height); raises ConfigError naming the bad level."""
        w, h = self.retina
        geo = {"vi": (1, w, h)}
        for name, spec in (("vf", self.vf), ("vs", self.vs)):
            try:
                w = conv_output_size(w, spec.kernel[0], spec.stride)
                h = conv_output_size(h, spec.kernel[1], spec.stride)
            except ConfigError as exc:
                raise ConfigError(f"level {name}: {exc}") from None
            geo[name] = (spec.maps, w, h)
        try:
            pw = conv_output_size(w, self.pfc_kernel[0], self.pfc_stride)
            ph = conv_output_size(h, self.pfc_kernel[1], self.pfc_stride)
        except ConfigError as exc:
            raise ConfigError(f"level pfc: {exc}") from None
        if (pw, ph) != (1, 1):
            raise ConfigError(f"level pfc: kernel {self.pfc_kernel} leaves a {pw}x{ph} map, expected 1x1")
        if self.pfc_stride != 1:
            # a whole-map kernel has a single position, so any other stride is a typo
            raise ConfigError(f"level pfc: stride {self.pfc_stride} must be 1 for a whole-map kernel")
        geo["pfc"] = (self.pfc_units, 1, 1)
        return geo

    def validate(self) -> None:
        self.geometry()
        taus = {"vf": self.vf.tau, "vs": self.vs.tau, "pfc": self.pfc_tau,
                "ms": self.ms_tau, "mf": self.mf_tau, "mo": self.mo_tau}
        for name, tau in taus.items():
            if tau < 1:
                raise ConfigError(f"level {name}: time constant {tau} < 1")
        sizes = {"vf": self.vf.maps, "vs": self.vs.maps, "pfc": self.pfc_units, "ms": self.ms_units,
                 "mf": self.mf_units, "mo.dims": self.dims, "mo.units_per_dim": self.units_per_dim}
        for name, n in sizes.items():
            if n < 1:
                raise ConfigError(f"level {name}: size {n} must be positive")
        if self.init_range < 0:
            raise ConfigError("init.range must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.0
    epochs: int = 46000
    pretrain_lr: float = 1e-4
    pretrain_epochs: int = 2000
    pretrain_momentum: float = 0.0
    pretrain_clip: float = 0.0
    window: float = 0.2
    clip: float = 0.0  # 0 disables gradient-norm clipping


@dataclass(frozen=True)
class WorldConfig:
    width: int = 128
    height: int = 96
    max_speed: float = 4.0
    grasp_radius: float = 3.0
    cue_steps: int = 10
    pretrain_per_class: int = 20
    pretrain_frames: int = 40


@dataclass(frozen=True)
class Config:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    sigma: float = 0.05

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(self).items())

    @classmethod
    def from_text(cls, text: str) -> "Config":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        return _build(values)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


# key -> (section, attribute path, parser)
def _size(v: str) -> tuple[int, int]:
    parts = v.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected WxH, got {v!r}")
    return int(parts[0]), int(parts[1])


def _bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {v!r}")


_KEYS = {
    "retina.size": ("network", ("retina",), _size),
    "vf.maps": ("network", ("vf", "maps"), int),
    "vf.kernel": ("network", ("vf", "kernel"), _size),
    "vf.stride": ("network", ("vf", "stride"), int),
    "vf.tau": ("network", ("vf", "tau"), float),
    "vs.maps": ("network", ("vs", "maps"), int),
    "vs.kernel": ("network", ("vs", "kernel"), _size),
    "vs.stride": ("network", ("vs", "stride"), int),
    "vs.tau": ("network", ("vs", "tau"), float),
    "pfc.units": ("network", ("pfc_units",), int),
    "pfc.kernel": ("network", ("pfc_kernel",), _size),
    "pfc.stride": ("network", ("pfc_stride",), int),
    "pfc.tau": ("network", ("pfc_tau",), float),
    "pfc.topdown": ("network", ("pfc_topdown",), _bool),
    "ms.units": ("network", ("ms_units",), int),
    "ms.tau": ("network", ("ms_tau",), float),
    "ms.topdown": ("network", ("ms_topdown",), _bool),
    "mf.units": ("network", ("mf_units",), int),
    "mf.tau": ("network", ("mf_tau",), float),
    "mo.dims": ("network", ("dims",), int),
    "mo.units_per_dim": ("network", ("units_per_dim",), int),
    "mo.tau": ("network", ("mo_tau",), float),
    "init.range": ("network", ("init_range",), float),
    "codec.sigma": (None, ("sigma",), float),
    "train.lr": ("train", ("lr",), float),
    "train.momentum": ("train", ("momentum",), float),
    "train.epochs": ("train", ("epochs",), int),
    "train.pretrain_lr": ("train", ("pretrain_lr",), float),
    "train.pretrain_epochs": ("train", ("pretrain_epochs",), int),
    "train.pretrain_momentum": ("train", ("pretrain_momentum",), float),
    "train.pretrain_clip": ("train", ("pretrain_clip",), float),
    "train.window": ("train", ("window",), float),
    "train.clip": ("train", ("clip",), float),
    "world.width": ("world", ("width",), int),
    "world.height": ("world", ("height",), int),
    "world.max_speed": ("world", ("max_speed",), float),
    "world.grasp_radius": ("world", ("grasp_radius",), float),
    "world.cue_steps": ("world", ("cue_steps",), int),
    "world.pretrain_per_class": ("world", ("pretrain_per_class",), int),
    "world.pretrain_frames": ("world", ("pretrain_frames",), int),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return f"{v[0]}x{v[1]}"
    return repr(v) if isinstance(v, float) else str(v)


def _get(cfg: Config, section, path):
    obj = cfg if section is None else getattr(cfg, section)
    for attr in path:
        obj = getattr(obj, attr)
    return obj


def _flatten(cfg: Config) -> dict:
    return {key: _get(cfg, section, path) for key, (section, path, _) in _KEYS.items()}


def _build(values: dict) -> Config:
    cfg = Config()
    for key, raw in values.items():
        section, path, parse = _KEYS[key]
        try:
            value = parse(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if section is None:
            cfg = dataclasses.replace(cfg, **{path[0]: value})
            continue
        sec = getattr(cfg, section)
        if len(path) == 2:
            inner = dataclasses.replace(getattr(sec, path[0]), **{path[1]: value})
            sec = dataclasses.replace(sec, **{path[0]: inner})
        else:
            sec = dataclasses.replace(sec, **{path[0]: value})
        cfg = dataclasses.replace(cfg, **{section: sec})
    cfg.network.validate()
    return cfg


def paper_config() -> Config:
    """Layer sizes, kernels, strides and time constants of the original iCub model."""
    return Config()


def toy_config() -> Config:
    """Desk-scale network for the 2D toy world: same time constants, smaller vision kernels.

    64x48 -> (k 8x8, s4) 3x15x11 -> (k 5x3, s2) 6x6x5 -> (k 6x5) 20 -> 30 -> 50 -> 6x10.
    """
    net = NetworkConfig(
        vf=ConvSpec(3, (8, 8), 4, 2.0),
        vs=ConvSpec(6, (5, 3), 2, 30.0),
        pfc_kernel=(6, 5),
        dims=6,
    )
    # plain descent at the full-scale rate stalls here; heavy-ball momentum and clipping converge
    train = TrainConfig(lr=0.01, momentum=0.9, clip=5.0, epochs=10000,
                        pretrain_lr=0.01, pretrain_momentum=0.9, pretrain_clip=5.0, pretrain_epochs=300)
    return Config(network=net, train=train)


def tiny_config() -> Config:
    """Gradient-check network of about two thousand parameters on a 16x12 retina."""
    net = NetworkConfig(
        retina=(16, 12),
        vf=ConvSpec(2, (4, 4), 2, 2.0),
        vs=ConvSpec(3, (3, 3), 2, 3.0),
        pfc_units=10,
        pfc_kernel=(3, 2),
        pfc_tau=5.0,
        ms_units=16,
        ms_tau=4.0,
        mf_units=20,
        mf_tau=2.0,
        dims=2,
        units_per_dim=5,
        mo_tau=1.0,
        init_range=0.5,
    )
    return Config(network=net)


PRESETS = {"paper": paper_config, "toy": toy_config, "tiny": tiny_config}


def load_config(spec: str | None) -> Config:
    """Load from a path, or from a preset name (``paper``, ``toy``, ``tiny``)."""
    if spec is None:
        return toy_config()
    if spec in PRESETS:
        return PRESETS[spec]()
    return Config.load(spec)


def config_fields() -> list[str]:
    return list(_KEYS)


__all__ = [
    "Config", "ConvSpec", "NetworkConfig", "TrainConfig", "WorldConfig",
    "paper_config", "toy_config", "tiny_config", "load_config", "config_fields",
]
