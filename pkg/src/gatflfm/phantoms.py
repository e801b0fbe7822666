"""Synthetic ground truths: Gaussian beads and line-pair groups, plus sensor noise."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GridSpec, SensorImage, VoxelGrid


@dataclass
class BeadSpec:
    count: int = 10
    radius_sigma: float = 1.0
    min_separation: float = 0.0
    intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not self.radius_sigma > 0:
            raise ValueError("radius_sigma must be > 0")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if not self.intensity > 0:
            raise ValueError("intensity must be > 0")


@dataclass
class LinePhantomSpec:
    spacings: list = field(default_factory=lambda: [1.68, 1.44, 1.20, 0.96, 0.72, 0.48])
    line_width: float = 0.24
    lines_per_group: int = 3
    # lines run along this lateral axis; groups are laid out along the other one
    orientation: str = "y"
    # fraction of the grid the lines cover along their own axis
    length_fraction: float = 0.6
    # voxel z indices holding the lines; None -> the central plane only
    z_indices: list | None = None
    intensity: float = 1.0

    def __post_init__(self):
        if not self.spacings or any(s <= 0 for s in self.spacings):
            raise ValueError("spacings must be a nonempty list of positive values")
        if not self.line_width > 0:
            raise ValueError("line_width must be > 0")
        if self.lines_per_group < 1:
            raise ValueError("lines_per_group must be >= 1")
        if self.orientation not in ("x", "y"):
            raise ValueError("orientation must be 'x' or 'y'")
        if not 0 < self.length_fraction <= 1:
            raise ValueError("length_fraction must lie in (0, 1]")


def _gaussian_blob(grid: GridSpec, center, sigma: float) -> np.ndarray:
    xs, ys, zs = (grid.origin[a] + grid.pitch[a] * np.arange(grid.dims[a]) for a in range(3))
    gx = np.exp(-0.5 * ((xs - center[0]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((ys - center[1]) / sigma) ** 2)
    gz = np.exp(-0.5 * ((zs - center[2]) / sigma) ** 2)
    return gz[:, None, None] * gy[None, :, None] * gx[None, None, :]


def phantom_beads(grid: GridSpec, spec: BeadSpec, centers=None) -> tuple[VoxelGrid, np.ndarray]:
    """Isotropic Gaussian beads placed uniformly at random.

    Centers keep ``3 * radius_sigma`` from every border and ``min_separation``
    from each other. Passing ``centers`` skips the random placement.
    """
    if centers is None:
        rng = np.random.default_rng(spec.seed)
        margin = 3 * spec.radius_sigma
        lo = np.asarray(grid.origin) + margin
        hi = np.asarray(grid.origin) + (np.asarray(grid.dims) - 1) * np.asarray(grid.pitch) - margin
        if spec.count and np.any(hi < lo):
            raise ValueError("grid too small for beads of this size")
        placed: list[np.ndarray] = []
        attempts = 0
        budget = 10_000 * max(spec.count, 1)
        while len(placed) < spec.count:
            attempts += 1
            if attempts > budget:
                raise RuntimeError(f"placed only {len(placed)} of {spec.count} beads "
                                   f"after {budget} attempts")
            c = rng.uniform(lo, hi)
            if all(np.linalg.norm(c - p) >= spec.min_separation for p in placed):
                placed.append(c)
        centers = np.asarray(placed).reshape(-1, 3)
    else:
        centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    values = np.zeros(grid.shape)
    for c in centers:
        values += spec.intensity * _gaussian_blob(grid, c, spec.radius_sigma)
    return VoxelGrid.from_grid(values, grid), centers


def line_layout(grid: GridSpec, spec: LinePhantomSpec) -> list[np.ndarray]:
    """Line center coordinates (um, along the layout axis) for each group.

    Groups are centered as a block on the grid and separated by three times the
    largest spacing. Raises if a group falls outside the grid.
    """
    axis = 0 if spec.orientation == "y" else 1
    n = spec.lines_per_group
    gap = 3 * max(spec.spacings)
    widths = [(n - 1) * s + spec.line_width for s in spec.spacings]
    total = sum(widths) + gap * (len(widths) - 1)
    # snap the block start so the first line sits on a voxel center
    pitch = grid.pitch[axis]
    origin = grid.origin[axis]

    def snap(x):
        return origin + round((x - origin) / pitch) * pitch

    start = snap(-total / 2 + spec.line_width / 2)
    lo = grid.origin[axis] - pitch / 2
    hi = grid.origin[axis] + (grid.dims[axis] - 0.5) * pitch
    groups = []
    pos = start
    for s, width in zip(spec.spacings, widths):
        centers = pos + s * np.arange(n)
        if centers[0] - spec.line_width / 2 < lo or centers[-1] + spec.line_width / 2 > hi:
            raise ValueError(f"line group with spacing {s} um does not fit in the grid "
                             f"({centers[0]:.3f}..{centers[-1]:.3f} um outside {lo:.3f}..{hi:.3f})")
        groups.append(centers)
        pos = origin + np.ceil((centers[-1] + gap + spec.line_width - origin) / pitch - 1e-9) * pitch
    return groups


def _box_fill(coords: np.ndarray, pitch: float, lo: float, hi: float) -> np.ndarray:
    """Fraction of each voxel (centered at ``coords``) covered by ``[lo, hi]``."""
    left = np.maximum(coords - pitch / 2, lo)
    right = np.minimum(coords + pitch / 2, hi)
    return np.clip(right - left, 0, None) / pitch


def phantom_lines(grid: GridSpec, spec: LinePhantomSpec) -> VoxelGrid:
    """Groups of parallel lines with rectangular cross-section.

    A voxel's value is the fraction of its width covered by a line, so a line
    narrower than the pitch centered on a voxel fills that column only.
    """
    axis = 0 if spec.orientation == "y" else 1
    along = 1 - axis
    groups = line_layout(grid, spec)
    coords = grid.origin[axis] + grid.pitch[axis] * np.arange(grid.dims[axis])
    profile = np.zeros(grid.dims[axis])
    for centers in groups:
        for c in centers:
            profile += _box_fill(coords, grid.pitch[axis], c - spec.line_width / 2,
                                 c + spec.line_width / 2)
    n_along = grid.dims[along]
    length = max(1, int(round(spec.length_fraction * n_along)))
    start = (n_along - length) // 2
    mask = np.zeros(n_along)
    mask[start:start + length] = 1.0
    plane = np.outer(mask, profile) if axis == 0 else np.outer(profile, mask)
    z_idx = spec.z_indices if spec.z_indices is not None else [grid.dims[2] // 2]
    values = np.zeros(grid.shape)
    for iz in z_idx:
        values[int(iz)] = spec.intensity * np.minimum(plane, 1.0)
    return VoxelGrid.from_grid(values, grid)


def add_noise(img: SensorImage, photon_scale: float, gaussian_sigma: float, seed) -> SensorImage:
    """Poisson shot noise at ``photon_scale`` photons per unit plus Gaussian read noise."""
    values = np.asarray(img.values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("add_noise needs a nonnegative image")
    if not photon_scale > 0:
        raise ValueError("photon_scale must be > 0")
    rng = np.random.default_rng(seed)
    noisy = rng.poisson(values * photon_scale) / photon_scale
    if gaussian_sigma > 0:
        noisy = noisy + rng.normal(0.0, gaussian_sigma, size=values.shape)
    meta = dict(img.meta, photon_scale=photon_scale, gaussian_sigma=gaussian_sigma, noise_seed=seed)
    return SensorImage(noisy, img.pixel_pitch, meta)
