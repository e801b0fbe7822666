"""Shared domain types, coordinate conventions and raw file I/O.

Array layout used throughout the package:

* volumes are stored as ``values[iz, iy, ix]`` (z-major, x fastest), so a
  C-ordered dump is exactly the on-disk order;
* sensor images are ``values[row, col]`` with rows along y and columns along x;
* PSF stacks are ``kernels[j, row, col]``.

``dims`` always follows the field order of the type: ``(nx, ny, nz)`` for
volumes and grids, ``(h, w)`` for images.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file on disk does not match its header."""


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]
    pitch: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        pitch = tuple(float(p) for p in self.pitch)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(pitch) != 3 or len(origin) != 3:
            raise ValueError("dims, pitch and origin must each have 3 components")
        if min(dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if min(pitch) <= 0:
            raise ValueError(f"grid pitch must be > 0, got {pitch}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, dims, pitch) -> "GridSpec":
        """Grid whose voxel ``n // 2`` sits at physical coordinate 0 on each axis.

        This is the voxel the forward model treats as the optical axis.
        """
        origin = tuple(-(int(n) // 2) * float(p) for n, p in zip(dims, pitch))
        return cls(tuple(dims), tuple(pitch), origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def z_planes(self) -> np.ndarray:
        return self.origin[2] + self.pitch[2] * np.arange(self.dims[2])

    @property
    def extent(self) -> float:
        """Length of the grid diagonal in micrometers."""
        return float(np.linalg.norm(np.asarray(self.dims) * np.asarray(self.pitch)))

    def index_to_physical(self, idx) -> np.ndarray:
        """Map ``(ix, iy, iz)`` indices (last axis) to micrometers."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.pitch)

    def physical_to_index(self, pos) -> np.ndarray:
        """Inverse of :meth:`index_to_physical`; returns fractional indices."""
        return (np.asarray(pos, dtype=float) - np.asarray(self.origin)) / np.asarray(self.pitch)

    def voxel_centers(self) -> np.ndarray:
        """Physical centers as an array of shape ``(nz, ny, nx, 3)`` in (x, y, z) order."""
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        return self.index_to_physical(np.stack([ix, iy, iz], axis=-1))

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "pitch_um": list(self.pitch), "origin_um": list(self.origin)}


@dataclass(frozen=True)
class VoxelGrid:
    values: np.ndarray
    pitch: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"volume values must be 3D (nz, ny, nx), got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        # validates pitch/origin/dims
        object.__setattr__(self, "pitch", GridSpec(self.dims, self.pitch, self.origin).pitch)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_grid(cls, values, grid: GridSpec) -> "VoxelGrid":
        values = np.asarray(values)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid shape {grid.shape}")
        return cls(values, grid.pitch, grid.origin)

    @classmethod
    def zeros(cls, grid: GridSpec, dtype=np.float64) -> "VoxelGrid":
        return cls.from_grid(np.zeros(grid.shape, dtype=dtype), grid)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.pitch, self.origin)

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.pitch, self.origin)

    def clamped(self) -> "VoxelGrid":
        return self.with_values(np.maximum(self.values, 0))


@dataclass(frozen=True)
class SensorImage:
    values: np.ndarray
    pixel_pitch: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"sensor image must be 2D, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be > 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    def with_values(self, values) -> "SensorImage":
        return SensorImage(values, self.pixel_pitch, dict(self.meta))


@dataclass(frozen=True)
class PsfStack:
    kernels: np.ndarray
    z_planes: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        kernels = np.asarray(self.kernels)
        if kernels.ndim != 3 or kernels.shape[0] < 1:
            raise ValueError(f"PSF kernels must have shape (nz, h, w) with nz >= 1, got {kernels.shape}")
        if not np.issubdtype(kernels.dtype, np.floating):
            kernels = kernels.astype(np.float64)
        z = np.asarray(self.z_planes, dtype=float)
        if z.shape != (kernels.shape[0],):
            raise ValueError(f"z_planes has {z.size} entries, kernels have {kernels.shape[0]} slices")
        if z.size > 1 and np.any(np.diff(z) <= 0):
            raise ValueError("z_planes must be strictly increasing")
        if np.any(kernels < 0):
            raise ValueError("PSF kernels must be nonnegative")
        if self.normalized:
            sums = kernels.sum(axis=(1, 2))
            if np.any(np.abs(sums - 1) > 1e-6):
                raise ValueError("PSF flagged normalized but slice sums deviate from 1")
        kernels.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "z_planes", z)

    @property
    def nz(self) -> int:
        return self.kernels.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.kernels.shape[1:])

    def normalize(self) -> "PsfStack":
        sums = self.kernels.sum(axis=(1, 2), keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("cannot normalize a PSF slice with zero energy")
        return PsfStack(self.kernels / sums, self.z_planes, normalized=True)


def normalize_peak(vol: VoxelGrid) -> VoxelGrid:
    peak = vol.values.max()
    if not peak > 0:
        raise ValueError("cannot peak-normalize a volume whose maximum is not positive")
    return vol.with_values(vol.values / peak)


# --- raw file I/O -----------------------------------------------------------

def _header_path(path) -> str:
    return os.fspath(path) + ".json"


def _write_raw(path, array: np.ndarray, header: dict) -> None:
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    payload = np.ascontiguousarray(array, dtype="<f4")
    header = dict(header, dtype="float32-le", format_version=FORMAT_VERSION)
    try:
        with open(path, "wb") as fh:
            fh.write(payload.tobytes())
        with open(_header_path(path), "w") as fh:
            json.dump(header, fh, indent=2)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _read_raw(path, count_of) -> tuple[np.ndarray, dict]:
    hpath = _header_path(path)
    if not os.path.exists(hpath):
        raise FileNotFoundError(f"header not found: {hpath}")
    try:
        with open(hpath) as fh:
            header = json.load(fh)
        expected = 4 * int(count_of(header))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header {hpath}: {exc}") from exc
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} bytes from header, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32), header


def save_volume(vol: VoxelGrid, path) -> None:
    """Write ``vol`` as raw float32 LE plus a ``.json`` sidecar."""
    _write_raw(path, vol.values, {
        "dims": list(vol.dims), "pitch_um": list(vol.pitch), "origin_um": list(vol.origin),
    })


def load_volume(path) -> VoxelGrid:
    data, header = _read_raw(path, lambda h: np.prod([int(d) for d in h["dims"]]))
    try:
        nx, ny, nz = (int(d) for d in header["dims"])
        vol = VoxelGrid(data.reshape(nz, ny, nx), tuple(header["pitch_um"]),
                        tuple(header.get("origin_um", (0.0, 0.0, 0.0))))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed header for {path}: {exc}") from exc
    return vol


def save_image(img: SensorImage, path) -> None:
    header = {"dims": list(img.dims), "pixel_pitch_um": img.pixel_pitch}
    if img.meta:
        header["meta"] = img.meta
    _write_raw(path, img.values, header)


def load_image(path, clamp: bool = True) -> SensorImage:
    """Load a sensor image; negative counts are clamped to 0 and reported."""
    data, header = _read_raw(path, lambda h: np.prod([int(d) for d in h["dims"]]))
    h, w = (int(d) for d in header["dims"])
    values = data.reshape(h, w)
    meta = dict(header.get("meta", {}))
    if clamp:
        n_clamped = int(np.count_nonzero(values < 0))
        if n_clamped:
            logger.warning("%s: clamped %d negative pixels to 0", path, n_clamped)
            values = np.maximum(values, 0)
        meta["clamped_pixels"] = n_clamped
    return SensorImage(values, float(header.get("pixel_pitch_um", 1.0)), meta)


def save_psf(psf: PsfStack, path) -> None:
    h, w = psf.dims
    _write_raw(path, psf.kernels, {
        "dims": [h, w, psf.nz], "z_planes_um": [float(z) for z in psf.z_planes],
        "normalized": bool(psf.normalized),
    })


def load_psf(path, renormalize: bool = False) -> tuple[PsfStack, int]:
    """Load a PSF stack; returns the stack and the number of clamped entries.

    Negative entries are clamped to zero. When ``renormalize`` is set every
    slice is rescaled to unit sum.
    """
    data, header = _read_raw(path, lambda h: np.prod([int(d) for d in h["dims"]]))
    try:
        h, w, nz = (int(d) for d in header["dims"])
        z = np.asarray(header["z_planes_um"], dtype=float)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed PSF header for {path}: {exc}") from exc
    if z.size != nz:
        raise FormatError(f"{path}: header lists {z.size} z planes for nz={nz}")
    kernels = data.reshape(nz, h, w)
    n_clamped = int(np.count_nonzero(kernels < 0))
    if n_clamped:
        logger.warning("%s: clamped %d negative PSF entries to 0", path, n_clamped)
        kernels = np.maximum(kernels, 0)
    normalized = bool(header.get("normalized", False))
    if renormalize:
        psf = PsfStack(kernels, z).normalize()
    else:
        sums = kernels.sum(axis=(1, 2), dtype=np.float64)
        normalized = normalized and bool(np.all(np.abs(sums - 1) <= 1e-6))
        psf = PsfStack(kernels, z, normalized=normalized)
    return psf, n_clamped
