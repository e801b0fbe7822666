"""Run configuration: TOML sections mapped onto the module dataclasses.

Every section is optional and falls back to defaults. Unknown sections or
keys are rejected so typos surface as validation errors instead of being
silently ignored.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .classical import RlConfig, WienerConfig
from .core import GridSpec
from .gaussians import InitConfig, VoxelizeConfig
from .optics import OpticsConfig
from .optimizer import LossConfig, TrainConfig
from .phantoms import BeadSpec, LinePhantomSpec


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class GridConfig:
    dims: list = field(default_factory=lambda: [48, 48, 16])
    pitch: list = field(default_factory=lambda: [0.25, 0.25, 0.5])
    # None centers the grid on the optical axis
    origin: list | None = None

    def spec(self) -> GridSpec:
        if self.origin is None:
            return GridSpec.centered(self.dims, self.pitch)
        return GridSpec(self.dims, self.pitch, self.origin)


@dataclass
class OpticsSection:
    layout: str = "hexagonal"
    n_rings: int = 1
    spacing: float = 6.0
    parallax: float = 0.35
    view_centers: list | None = None
    parallax_slope: list | None = None
    base_sigma: float = 0.35
    defocus_slope: float = 0.1
    magnification: float = 20.0
    na: float = 0.45

    def build(self) -> OpticsConfig:
        extra = dict(base_sigma=self.base_sigma, defocus_slope=self.defocus_slope,
                     magnification=self.magnification, na=self.na)
        if self.layout == "hexagonal":
            return OpticsConfig.hexagonal(self.n_rings, self.spacing, self.parallax, **extra)
        if self.layout == "custom":
            if self.view_centers is None or self.parallax_slope is None:
                raise ConfigError("optics.layout = 'custom' needs view_centers and parallax_slope")
            return OpticsConfig(self.view_centers, self.parallax_slope, **extra)
        raise ConfigError(f"optics.layout must be 'hexagonal' or 'custom', got {self.layout!r}")


@dataclass
class SensorConfig:
    dims: list = field(default_factory=lambda: [160, 160])


@dataclass
class NoiseConfig:
    enabled: bool = False
    photon_scale: float = 200.0
    gaussian_sigma: float = 0.0
    seed: int = 1


@dataclass
class ExtendedSpec:
    """Beads scattered through the volume plus line groups on selected planes."""
    beads: BeadSpec = field(default_factory=lambda: BeadSpec(count=12, radius_sigma=0.4,
                                                            min_separation=1.5, seed=4))
    lines: LinePhantomSpec = field(default_factory=lambda: LinePhantomSpec(
        spacings=[0.96], orientation="y", length_fraction=0.7, intensity=0.8))


@dataclass
class PhantomConfig:
    kind: str = "beads"
    beads: BeadSpec = field(default_factory=BeadSpec)
    lines: LinePhantomSpec = field(default_factory=LinePhantomSpec)
    extended: ExtendedSpec = field(default_factory=ExtendedSpec)


@dataclass
class GatSection:
    n_kernels: int = 400
    # divide the measurement by its total flux ("sum"), its maximum ("peak") or
    # nothing ("none") before training; the result is rescaled afterwards
    normalize_measurement: str = "sum"


@dataclass
class MetricsConfig:
    per_layer: bool = True
    frc: bool = True
    mip: bool = True
    # list of {p0 = [x, y, z], p1 = [x, y, z], n = samples}
    profiles: list = field(default_factory=list)
    fwhm: bool = False
    # bead centers (um, x/y/z) for the FWHM report
    bead_centers: list = field(default_factory=list)
    # line-group dip threshold for the resolution test
    dip_ratio: float = 0.85


@dataclass
class PathsConfig:
    output_dir: str = "."
    volume: str | None = None
    image: str | None = None
    psf: str | None = None
    ground_truth: str | None = None
    recon: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    # None means no synthesis block: the PSF must come from paths.psf
    optics: OpticsSection | None = field(default_factory=OpticsSection)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    wiener: WienerConfig = field(default_factory=WienerConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    voxelize: VoxelizeConfig = field(default_factory=VoxelizeConfig)
    init: InitConfig = field(default_factory=InitConfig)
    gat: GatSection = field(default_factory=GatSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def grid_spec(self) -> GridSpec:
        return self.grid.spec()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _build(cls, data, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = _nested_type(cls, name)
        key = f"{where}.{name}" if where else name
        if ftype is None:
            kwargs[name] = value
            continue
        # partial tables override the field's own default instance, not the bare class defaults
        factory = fields[name].default_factory
        if isinstance(value, dict) and factory is not dataclasses.MISSING:
            default = factory()
            if default is not None:
                value = deep_merge(_plain(dataclasses.asdict(default)), value)
        kwargs[name] = _build(ftype, value, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'top level'}] {exc}") from exc


_NESTED = {
    (RunConfig, "grid"): GridConfig, (RunConfig, "optics"): OpticsSection,
    (RunConfig, "sensor"): SensorConfig, (RunConfig, "phantom"): PhantomConfig,
    (RunConfig, "noise"): NoiseConfig, (RunConfig, "wiener"): WienerConfig,
    (RunConfig, "rl"): RlConfig, (RunConfig, "loss"): LossConfig,
    (RunConfig, "train"): TrainConfig, (RunConfig, "voxelize"): VoxelizeConfig,
    (RunConfig, "init"): InitConfig, (RunConfig, "gat"): GatSection,
    (RunConfig, "metrics"): MetricsConfig, (RunConfig, "paths"): PathsConfig,
    (PhantomConfig, "beads"): BeadSpec, (PhantomConfig, "lines"): LinePhantomSpec,
    (PhantomConfig, "extended"): ExtendedSpec,
    (ExtendedSpec, "beads"): BeadSpec, (ExtendedSpec, "lines"): LinePhantomSpec,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` with a TOML-syntax value, as a nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    out: dict = {}
    node = out
    keys = path.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def load_config(path=None, overrides=(), base: dict | None = None) -> RunConfig:
    """Merge ``base``, the TOML file at ``path`` and ``key=value`` overrides, then validate."""
    data = copy.deepcopy(base) if base else {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = deep_merge(data, tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for text in overrides:
        data = deep_merge(data, parse_override(text))
    # an absent [optics] table means no PSF synthesis block
    data.setdefault("optics", None)
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.grid_spec()
        if cfg.optics is not None:
            cfg.optics.build()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(cfg.sensor.dims) != 2 or min(cfg.sensor.dims) < 1:
        raise ConfigError("sensor.dims must be two positive integers")
    if cfg.phantom.kind not in ("beads", "lines", "extended"):
        raise ConfigError(f"phantom.kind must be beads, lines or extended, got {cfg.phantom.kind!r}")
    if cfg.noise.photon_scale <= 0:
        raise ConfigError("noise.photon_scale must be > 0")
    if cfg.noise.gaussian_sigma < 0:
        raise ConfigError("noise.gaussian_sigma must be >= 0")
    if cfg.gat.normalize_measurement not in ("sum", "peak", "none"):
        raise ConfigError("gat.normalize_measurement must be sum, peak or none")
    if cfg.gat.n_kernels < 1:
        raise ConfigError("gat.n_kernels must be >= 1")
    for name in ("volume", "image", "psf", "ground_truth", "recon"):
        value = getattr(cfg.paths, name)
        if value is not None and not os.path.exists(value):
            raise ConfigError(f"paths.{name} does not exist: {value}")
