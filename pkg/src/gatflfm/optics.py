"""FLFM imaging model: simplified multi-view PSF and the per-depth convolution.

The sensor image is ``I = sum_j H_j * O_j``. The volume is embedded centered on
the sensor grid, so a voxel at lateral offset ``(dx, dy)`` from the volume
center (index ``n // 2``) contributes a copy of ``H_j`` translated by that
offset. The padded FFT size avoids circular wrap-around, which keeps
:func:`back_project` an exact adjoint of :func:`forward_project`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import fft as sfft

from .core import GridSpec, PsfStack, SensorImage, VoxelGrid

FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    global FFT_WORKERS
    FFT_WORKERS = max(1, int(n))


@dataclass
class OpticsConfig:
    """Geometry of the simplified FLFM PSF.

    Positions are sensor micrometers measured from the sensor center pixel
    (``h // 2, w // 2``), in object-space-equivalent units.
    """

    view_centers: list = field(default_factory=lambda: [[0.0, 0.0]])
    parallax_slope: list = field(default_factory=lambda: [[0.0, 0.0]])
    base_sigma: float = 1.0
    defocus_slope: float = 0.0
    magnification: float = 20.0
    na: float = 0.45

    def __post_init__(self):
        self.view_centers = np.asarray(self.view_centers, dtype=float).reshape(-1, 2)
        self.parallax_slope = np.asarray(self.parallax_slope, dtype=float).reshape(-1, 2)
        self.validate()

    @property
    def n_views(self) -> int:
        return len(self.view_centers)

    def validate(self) -> None:
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.parallax_slope.shape != self.view_centers.shape:
            raise ValueError("parallax_slope needs one 2D vector per view")
        if not self.base_sigma > 0:
            raise ValueError("base_sigma must be > 0")
        if self.defocus_slope < 0:
            raise ValueError("defocus_slope must be >= 0")
        diffs = self.view_centers[:, None, :] - self.view_centers[None, :, :]
        dist = np.linalg.norm(diffs, axis=-1) + np.eye(self.n_views)
        if np.any(dist == 0):
            raise ValueError("view_centers must be pairwise distinct")

    @classmethod
    def hexagonal(cls, n_rings: int = 1, spacing: float = 10.0, parallax: float = 0.5,
                  **kwargs) -> "OpticsConfig":
        """Views on a hexagonal lattice; parallax points radially outward.

        One ring gives the classic 7-view layout. A view's parallax slope is
        proportional to its pupil position, ``parallax`` per lattice step.
        """
        centers = [(0.0, 0.0)]
        for ring in range(1, n_rings + 1):
            for side in range(6):
                a0 = np.pi / 3 * side
                a1 = np.pi / 3 * (side + 1)
                p0 = ring * np.array([np.cos(a0), np.sin(a0)])
                p1 = ring * np.array([np.cos(a1), np.sin(a1)])
                for k in range(ring):
                    centers.append(tuple(p0 + (p1 - p0) * k / ring))
        centers = np.asarray(centers)
        slopes = centers * parallax
        return cls(view_centers=centers * spacing, parallax_slope=slopes, **kwargs)

    def to_json(self) -> dict:
        return {
            "view_centers": self.view_centers.tolist(),
            "parallax_slope": self.parallax_slope.tolist(),
            "base_sigma": self.base_sigma, "defocus_slope": self.defocus_slope,
            "magnification": self.magnification, "na": self.na,
        }


def spot_sigma(cfg: OpticsConfig, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return cfg.base_sigma * np.sqrt(1.0 + (cfg.defocus_slope * z / cfg.base_sigma) ** 2)


def synthesize_psf(cfg: OpticsConfig, sensor_dims, grid: GridSpec) -> PsfStack:
    """Sum of per-view Gaussian spots, shifted by parallax and widened by defocus."""
    h, w = (int(d) for d in sensor_dims)
    pitch = grid.pitch[0]
    if not np.isclose(grid.pitch[0], grid.pitch[1]):
        raise ValueError("the forward model needs square lateral voxels (dx == dy)")
    cfg.validate()
    z_planes = grid.z_planes
    xs = (np.arange(w) - w // 2) * pitch
    ys = (np.arange(h) - h // 2) * pitch
    half_w, half_h = (w - 1 - w // 2) * pitch, (h - 1 - h // 2) * pitch
    lo_x, lo_y = -(w // 2) * pitch, -(h // 2) * pitch

    kernels = np.zeros((len(z_planes), h, w))
    for j, z in enumerate(z_planes):
        sigma = float(spot_sigma(cfg, z))
        for v in range(cfg.n_views):
            cx, cy = cfg.view_centers[v] + cfg.parallax_slope[v] * z
            margin = 3 * sigma
            if cx - margin < lo_x or cx + margin > half_w or cy - margin < lo_y or cy + margin > half_h:
                raise ValueError(f"spot of view {v} at z={z:g} um leaves the sensor "
                                 f"(center ({cx:.3g}, {cy:.3g}) um, 3 sigma = {margin:.3g} um)")
            gx = np.exp(-0.5 * ((xs - cx) / sigma) ** 2)
            gy = np.exp(-0.5 * ((ys - cy) / sigma) ** 2)
            spot = np.outer(gy, gx)
            kernels[j] += spot / spot.sum()
        kernels[j] /= kernels[j].sum()
    return PsfStack(kernels.astype(np.float32), z_planes, normalized=True)


@lru_cache(maxsize=64)
def _fast_len(n: int) -> int:
    return sfft.next_fast_len(n, real=True)


class ProjectionOperator:
    """Precomputed FFT form of the forward model for a fixed volume size.

    ``apply`` and ``adjoint`` work on plain arrays and are exactly linear
    (no clamping); training uses them directly so gradients stay consistent.
    """

    def __init__(self, psf: PsfStack, vol_shape):
        nz, ny, nx = (int(s) for s in vol_shape)
        if psf.nz == 0:
            raise ValueError("empty PSF")
        if nz != psf.nz:
            raise ValueError(f"volume has {nz} z slices but PSF has {psf.nz}")
        h, w = psf.dims
        if ny > h or nx > w:
            raise ValueError(f"volume lateral size {(ny, nx)} exceeds sensor {(h, w)}")
        self.psf = psf
        self.vol_shape = (nz, ny, nx)
        self.sensor_shape = (h, w)
        self.pad = (_fast_len(h + ny - 1), _fast_len(w + nx - 1))
        self.offset = (ny // 2, nx // 2)
        self.kernel_ft = sfft.rfft2(np.asarray(psf.kernels, dtype=np.float64), s=self.pad,
                                    workers=FFT_WORKERS)

    def apply(self, volume: np.ndarray) -> np.ndarray:
        volume = np.asarray(volume, dtype=np.float64)
        if volume.shape != self.vol_shape:
            raise ValueError(f"volume shape {volume.shape} != operator shape {self.vol_shape}")
        vol_ft = sfft.rfft2(volume, s=self.pad, workers=FFT_WORKERS)
        total = np.einsum("jab,jab->ab", vol_ft, self.kernel_ft)
        full = sfft.irfft2(total, s=self.pad, workers=FFT_WORKERS)
        oy, ox = self.offset
        h, w = self.sensor_shape
        return full[oy:oy + h, ox:ox + w]

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.sensor_shape:
            raise ValueError(f"image shape {image.shape} != sensor shape {self.sensor_shape}")
        img_ft = sfft.rfft2(image, s=self.pad, workers=FFT_WORKERS)
        corr = sfft.irfft2(img_ft[None] * np.conj(self.kernel_ft), s=self.pad, workers=FFT_WORKERS)
        # corr[k] = sum_p I[p] H[p - k]; the adjoint needs lag k = q - offset
        nz, ny, nx = self.vol_shape
        oy, ox = self.offset
        iy = (np.arange(ny) - oy) % self.pad[0]
        ix = (np.arange(nx) - ox) % self.pad[1]
        return corr[:, iy[:, None], ix[None, :]]

    def sensitivity(self) -> np.ndarray:
        """``H^T 1``: the flat-field response of every voxel."""
        return self.adjoint(np.ones(self.sensor_shape))


def forward_project(vol: VoxelGrid, psf: PsfStack, op: ProjectionOperator | None = None) -> SensorImage:
    """Project a volume onto the sensor.

    For a nonnegative volume, round-off negatives down to ``-1e-6 * max`` are
    clamped to 0; anything more negative raises. Signed volumes pass through
    unclamped.
    """
    op = op or ProjectionOperator(psf, vol.values.shape)
    image = op.apply(vol.values)
    if vol.values.size and vol.values.min() >= 0:
        peak = image.max(initial=0.0)
        floor = -1e-6 * peak
        if image.min(initial=0.0) < floor:
            raise ArithmeticError(f"projection produced {image.min():.3e} < {floor:.3e}")
        image = np.maximum(image, 0)
    return SensorImage(image, vol.pitch[0], {"volume_embedding": "centered"})


def back_project(img: SensorImage, psf: PsfStack, vol_grid: GridSpec,
                 op: ProjectionOperator | None = None) -> VoxelGrid:
    """Exact adjoint of :func:`forward_project` onto ``vol_grid``."""
    if tuple(img.dims) != tuple(psf.dims):
        raise ValueError(f"image dims {img.dims} != PSF slice dims {psf.dims}")
    op = op or ProjectionOperator(psf, vol_grid.shape)
    return VoxelGrid.from_grid(op.adjoint(img.values), vol_grid)
