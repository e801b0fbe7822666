"""Wiener-filter inversion and Richardson-Lucy deconvolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from . import optics
from .core import GridSpec, PsfStack, SensorImage, VoxelGrid
from .optics import ProjectionOperator


@dataclass
class WienerConfig:
    # None selects 0.05 * max_j max|H_j~|
    w: float | None = None
    clamp_negative: bool = True

    def __post_init__(self):
        if self.w is not None and self.w < 0:
            raise ValueError("Wiener parameter w must be >= 0")


@dataclass
class RlConfig:
    iterations: int = 100
    # None selects 1e-9 * max(img)
    epsilon: float | None = None
    record_likelihood: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("RL iterations must be >= 1")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("RL epsilon must be > 0")


def _centered_crop(h: int, w: int, ny: int, nx: int) -> tuple[slice, slice]:
    # sensor pixel h//2 holds the volume center voxel ny//2
    y0 = h // 2 - ny // 2
    x0 = w // 2 - nx // 2
    return slice(y0, y0 + ny), slice(x0, x0 + nx)


def psf_spectrum(psf: PsfStack) -> np.ndarray:
    """Sensor-sized 2D DFT of each slice, with the kernel center moved to the origin."""
    kernels = sfft.ifftshift(np.asarray(psf.kernels, dtype=np.float64), axes=(1, 2))
    return sfft.fft2(kernels, workers=optics.FFT_WORKERS)


def default_wiener_w(psf: PsfStack) -> float:
    return 0.05 * float(np.abs(psf_spectrum(psf)).max())


def wiener_reconstruct(img: SensorImage, psf: PsfStack, cfg: WienerConfig,
                       grid: GridSpec) -> VoxelGrid:
    """Per-depth regularized inverse filter, cropped to ``grid`` laterally."""
    if tuple(img.dims) != tuple(psf.dims):
        raise ValueError(f"image dims {img.dims} != PSF slice dims {psf.dims}")
    if grid.dims[2] != psf.nz:
        raise ValueError(f"grid has {grid.dims[2]} z slices but PSF has {psf.nz}")
    H = psf_spectrum(psf)
    w = default_wiener_w(psf) if cfg.w is None else float(cfg.w)
    denom = np.abs(H) ** 2 + w * w
    if np.any(denom == 0):
        raise ZeroDivisionError("w = 0 and the PSF spectrum has zero bins")
    I = sfft.fft2(np.asarray(img.values, dtype=np.float64), workers=optics.FFT_WORKERS)
    slices = sfft.ifft2(I[None] * np.conj(H) / denom, workers=optics.FFT_WORKERS).real
    h, wd = psf.dims
    nx, ny, _ = grid.dims
    sy, sx = _centered_crop(h, wd, ny, nx)
    out = slices[:, sy, sx]
    if cfg.clamp_negative:
        out = np.maximum(out, 0)
    return VoxelGrid.from_grid(out, grid)


def poisson_log_likelihood(img: np.ndarray, projected: np.ndarray, eps: float) -> float:
    return float(np.sum(img * np.log(projected + eps) - projected))


def rl_deconvolve(img: SensorImage, psf: PsfStack, cfg: RlConfig, grid: GridSpec,
                  init: VoxelGrid | None = None, callback=None) -> tuple[VoxelGrid, list[float]]:
    """Flat-field-corrected Richardson-Lucy.

    ``O <- O * H^T(I / (H O + eps)) / (H^T 1 + eps)``. Returns the estimate
    and the Poisson log-likelihood after each iteration (empty if not
    recorded). ``callback(k, volume_array)`` is called after iteration ``k``.
    """
    data = np.asarray(img.values, dtype=np.float64)
    if np.any(data < 0):
        raise ValueError("RL needs a nonnegative measurement")
    if not np.any(psf.kernels > 0):
        raise ValueError("RL needs a nonzero PSF")
    op = ProjectionOperator(psf, grid.shape)
    eps = cfg.epsilon if cfg.epsilon is not None else 1e-9 * max(float(data.max()), 1e-30)

    if init is None:
        estimate = np.full(grid.shape, data.mean() / grid.dims[2])
    else:
        if init.values.shape != grid.shape:
            raise ValueError(f"init shape {init.values.shape} != grid shape {grid.shape}")
        estimate = np.asarray(init.values, dtype=np.float64).copy()
        if np.any(estimate < 0):
            raise ValueError("RL init must be nonnegative")

    norm = op.sensitivity() + eps
    history: list[float] = []
    for k in range(cfg.iterations):
        projected = np.maximum(op.apply(estimate), 0)
        ratio = data / (projected + eps)
        estimate = estimate * np.maximum(op.adjoint(ratio), 0) / norm
        if cfg.record_likelihood:
            projected = np.maximum(op.apply(estimate), 0)
            history.append(poisson_log_likelihood(data, projected, eps))
        if callback is not None:
            callback(k + 1, estimate)
    return VoxelGrid.from_grid(estimate, grid), history
