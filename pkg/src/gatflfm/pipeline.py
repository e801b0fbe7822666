"""End-to-end reconstruction runs shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .classical import RlConfig, WienerConfig, rl_deconvolve, wiener_reconstruct
from .config import ConfigError, ExtendedSpec, RunConfig, load_config
from .core import GridSpec, PsfStack, SensorImage, VoxelGrid
from .gaussians import GaussianCloud, InitConfig, init_from_volume
from .metrics import frc_qe, fwhm, line_profile, mip, psnr, resolved_peaks
from .optics import forward_project, synthesize_psf
from .optimizer import (LossConfig, TrainConfig, TrainResult, effective_rank, scale_cloud_density,
                        train)
from .phantoms import add_noise, line_layout, phantom_beads, phantom_lines

logger = logging.getLogger(__name__)


# --- scenario presets -------------------------------------------------------------
# Desk-scale stand-ins for the simulation experiments: 7-view hexagonal PSF,
# grids at most 64 x 64 x 16 and sensors at most 256 x 256.

_BEADS_SCENE = {
    "grid": {"dims": [48, 48, 16], "pitch": [0.25, 0.25, 0.5]},
    "optics": {"spacing": 6.0, "parallax": 0.35, "base_sigma": 0.35, "defocus_slope": 0.1},
    "sensor": {"dims": [128, 128]},
}

PRESETS: dict[str, dict] = {
    "beads": {
        **_BEADS_SCENE,
        "phantom": {"kind": "beads",
                    "beads": {"count": 6, "radius_sigma": 0.4, "min_separation": 2.0, "seed": 2}},
        "rl": {"iterations": 100},
        "gat": {"n_kernels": 400},
        "train": {"iterations": 5000},
    },
    "lines": {
        "grid": {"dims": [64, 64, 8], "pitch": [0.12, 0.12, 0.5]},
        "optics": {"spacing": 9.0, "parallax": 0.35, "base_sigma": 0.35, "defocus_slope": 0.1},
        "sensor": {"dims": [256, 256]},
        "phantom": {"kind": "lines", "lines": {"orientation": "y"}},
        "rl": {"iterations": 100},
        "gat": {"n_kernels": 400},
        "train": {"iterations": 1500},
    },
    # RL runs long here so its best iterate (by volume PSNR) can be picked
    "extended": {
        **_BEADS_SCENE,
        "phantom": {"kind": "extended", "extended": {"lines": {"line_width": 0.5}}},
        "noise": {"enabled": True, "photon_scale": 3000.0, "seed": 1},
        "rl": {"iterations": 2000},
        "gat": {"n_kernels": 600},
        "train": {"iterations": 5000},
    },
    # noisier variant with faster shape updates and eager densification,
    # a regime where unregularized kernels collapse into needles
    "erank": {
        **_BEADS_SCENE,
        "phantom": {"kind": "extended", "extended": {"lines": {"line_width": 0.5}}},
        "noise": {"enabled": True, "photon_scale": 1000.0, "seed": 1},
        "rl": {"iterations": 100},
        "gat": {"n_kernels": 600},
        "train": {"iterations": 4000, "tau_grad": 1e-3, "lr_log_scale": 1e-2},
    },
}


def preset(name: str, overrides=()) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(name)
    return load_config(None, overrides, base=PRESETS[name])


# --- simulation --------------------------------------------------------------------

def phantom_extended(grid: GridSpec, spec: ExtendedSpec) -> VoxelGrid:
    beads, _ = phantom_beads(grid, spec.beads)
    lines = phantom_lines(grid, spec.lines)
    return beads.with_values(beads.values + lines.values)


def make_phantom(cfg: RunConfig) -> tuple[VoxelGrid, dict]:
    grid = cfg.grid_spec()
    kind = cfg.phantom.kind
    if kind == "beads":
        vol, centers = phantom_beads(grid, cfg.phantom.beads)
        return vol, {"centers": centers.tolist()}
    if kind == "lines":
        groups = line_layout(grid, cfg.phantom.lines)
        return phantom_lines(grid, cfg.phantom.lines), {"line_centers": [g.tolist() for g in groups]}
    return phantom_extended(grid, cfg.phantom.extended), {}


def make_psf(cfg: RunConfig) -> PsfStack:
    if cfg.optics is None:
        raise ConfigError("no [optics] section to synthesize a PSF from")
    return synthesize_psf(cfg.optics.build(), cfg.sensor.dims, cfg.grid_spec())


def make_measurement(vol: VoxelGrid, psf: PsfStack, cfg: RunConfig) -> SensorImage:
    img = forward_project(vol, psf)
    img = SensorImage(img.values, vol.pitch[0], img.meta)
    if cfg.noise.enabled:
        img = add_noise(img, cfg.noise.photon_scale, cfg.noise.gaussian_sigma, cfg.noise.seed)
        img = img.with_values(np.maximum(img.values, 0))
    return img


# --- reconstructions -------------------------------------------------------------

def reconstruct_wiener(img: SensorImage, psf: PsfStack, grid: GridSpec,
                       cfg: WienerConfig) -> VoxelGrid:
    return wiener_reconstruct(img, psf, cfg, grid)


@dataclass
class RlRun:
    volume: VoxelGrid
    likelihood: list
    best_iteration: int | None = None
    best_psnr: float | None = None
    psnr_curve: list = field(default_factory=list)
    best_volume: np.ndarray | None = None


def reconstruct_rl(img: SensorImage, psf: PsfStack, grid: GridSpec, cfg: RlConfig,
                   ground_truth: VoxelGrid | None = None) -> RlRun:
    """RL with the configured iteration count.

    With a ground truth the volume-PSNR is tracked every iteration and the
    best iterate is kept alongside the final one.
    """
    if ground_truth is None:
        vol, hist = rl_deconvolve(img, psf, cfg, grid)
        return RlRun(vol, hist)
    curve: list[float] = []
    best = {"psnr": -math.inf, "it": 0, "vol": None}

    def track(k, estimate):
        p = psnr(VoxelGrid.from_grid(estimate, grid), ground_truth)
        curve.append(p)
        if p > best["psnr"]:
            best.update(psnr=p, it=k, vol=estimate.copy())

    vol, hist = rl_deconvolve(img, psf, cfg, grid, callback=track)
    return RlRun(vol, hist, best["it"], best["psnr"], curve, best["vol"])


NORMALIZE_MODES = ("sum", "peak", "none")


@dataclass
class GatRun:
    volume: VoxelGrid
    result: TrainResult
    init_cloud: GaussianCloud
    scale: float

    @property
    def cloud(self) -> GaussianCloud:
        return scale_cloud_density(self.result.cloud, self.scale)


def reconstruct_gat(img: SensorImage, psf: PsfStack, grid: GridSpec, *, n_kernels: int = 400,
                    seed: int = 0, wiener: WienerConfig | None = None, init: InitConfig | None = None,
                    loss: LossConfig | None = None, train_cfg: TrainConfig | None = None,
                    vox=None, normalize: str = "sum", log_path=None, checkpoint_dir=None) -> GatRun:
    """Wiener-initialized Gaussian-cloud reconstruction.

    ``normalize`` divides the measurement by its total flux (``"sum"``) or its
    peak (``"peak"``) before training; ``"none"`` trains on raw values. The
    returned volume and cloud are scaled back either way.
    """
    values = np.asarray(img.values, dtype=np.float64)
    scale = measurement_scale(values, normalize)
    meas = SensorImage(values / scale, img.pixel_pitch)
    seed_vol = wiener_reconstruct(meas, psf, wiener or WienerConfig(), grid)
    nonzero = np.count_nonzero(seed_vol.values > 0)
    cloud = init_from_volume(seed_vol, min(n_kernels, max(1, nonzero // 10)), seed, init)
    train_cfg = train_cfg or TrainConfig()
    if train_cfg.seed != seed:
        train_cfg = replace(train_cfg, seed=seed)
    result = train(meas.values, psf, grid, cloud, loss, train_cfg, vox,
                   log_path=log_path, checkpoint_dir=checkpoint_dir)
    volume = result.volume.with_values(result.volume.values * scale)
    return GatRun(volume, result, cloud, scale)


def measurement_scale(values: np.ndarray, mode: str) -> float:
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {NORMALIZE_MODES}, got {mode!r}")
    ref = {"sum": values.sum(), "peak": values.max(), "none": 1.0}[mode]
    return float(ref) if ref > 0 else 1.0


def gat_from_config(img, psf, cfg: RunConfig, **kw) -> GatRun:
    return reconstruct_gat(img, psf, cfg.grid_spec(), n_kernels=cfg.gat.n_kernels, seed=cfg.seed,
                           wiener=cfg.wiener, init=cfg.init, loss=cfg.loss, train_cfg=cfg.train,
                           vox=cfg.voxelize, normalize=cfg.gat.normalize_measurement, **kw)


# --- analysis helpers -------------------------------------------------------------

def bead_fwhm(vol: VoxelGrid, center, half_span_xy: float = 2.0, half_span_z: float = 4.0,
              step: float = 0.02) -> tuple[float, float]:
    """Lateral (x) and axial (z) FWHM through ``center`` after snapping it to the local maximum."""
    grid = vol.grid
    idx = np.rint(grid.physical_to_index(center)).astype(int)
    lo = np.maximum(idx - 2, 0)
    hi = np.minimum(idx + 3, np.asarray(grid.dims))
    block = vol.values[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
    kz, ky, kx = np.unravel_index(np.argmax(block), block.shape)
    c = grid.index_to_physical([lo[0] + kx, lo[1] + ky, lo[2] + kz])

    def clip_span(axis, half):
        a = grid.origin[axis]
        b = a + (grid.dims[axis] - 1) * grid.pitch[axis]
        return max(a, c[axis] - half), min(b, c[axis] + half)

    x0, x1 = clip_span(0, half_span_xy)
    z0, z1 = clip_span(2, half_span_z)
    nx = int(round((x1 - x0) / step)) + 1
    nz = int(round((z1 - z0) / step)) + 1
    px = line_profile(vol, [x0, c[1], c[2]], [x1, c[1], c[2]], nx, normalize=False)
    pz = line_profile(vol, [c[0], c[1], z0], [c[0], c[1], z1], nz, normalize=False)
    return fwhm(px, (x1 - x0) / (nx - 1)), fwhm(pz, (z1 - z0) / (nz - 1))


def mean_bead_fwhm(vol: VoxelGrid, centers) -> dict:
    lateral, axial = [], []
    for c in centers:
        try:
            lat, ax = bead_fwhm(vol, c)
        except ValueError:
            lat, ax = math.nan, math.nan
        lateral.append(lat)
        axial.append(ax)
    return {"lateral": lateral, "axial": axial,
            "mean_lateral": float(np.nanmean(lateral)) if np.any(np.isfinite(lateral)) else math.nan,
            "mean_axial": float(np.nanmean(axial)) if np.any(np.isfinite(axial)) else math.nan}


def line_group_resolved(vol: VoxelGrid, centers, dip_ratio: float = 0.85,
                        orientation: str = "y") -> bool:
    """Three-peak test on the z-MIP, averaged along the central half of the lines."""
    grid = vol.grid
    image = mip(vol, "z")
    if orientation == "y":
        n = grid.dims[1]
        profile = image[n // 4:n - n // 4].mean(axis=0)
        idx = (np.asarray(centers) - grid.origin[0]) / grid.pitch[0]
    else:
        n = grid.dims[0]
        profile = image[:, n // 4:n - n // 4].mean(axis=1)
        idx = (np.asarray(centers) - grid.origin[1]) / grid.pitch[1]
    return resolved_peaks(profile, idx, dip_ratio)


def erank_percentile(cloud: GaussianCloud, q: float = 5.0) -> float:
    return float(np.percentile(effective_rank(cloud.log_scale), q))


def volume_scores(vol: VoxelGrid, gt: VoxelGrid | None) -> dict:
    out = {}
    if gt is not None:
        out["psnr"] = psnr(vol, gt)
    try:
        out["frc_qe"] = frc_qe(vol)
    except ValueError:
        out["frc_qe"] = math.nan
    return out
