"""Quantitative evaluation: PSNR, Fourier ring correlation, profiles, FWHM, MIPs."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core import VoxelGrid

AXES = {"x": 2, "y": 1, "z": 0}


def psnr(recon: VoxelGrid, gt: VoxelGrid, per_layer: bool = False):
    """PSNR in dB after scaling both volumes by the ground-truth maximum.

    Returns ``math.inf`` (or inf entries) where the volumes are identical.
    With ``per_layer`` the value is computed for every x-y slice.
    """
    a = np.asarray(recon.values, dtype=np.float64)
    b = np.asarray(gt.values, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr needs equal dims, got {recon.dims} and {gt.dims}")
    peak = b.max()
    if not peak > 0:
        raise ValueError("ground truth maximum must be > 0")
    sq = ((a - b) / peak) ** 2
    mse = sq.mean(axis=(1, 2)) if per_layer else sq.mean()
    with np.errstate(divide="ignore"):
        out = 10 * np.log10(1.0 / mse)
    return out if per_layer else float(out)


def _ring_index(shape) -> tuple[np.ndarray, int]:
    h, w = shape
    fy = np.fft.fftfreq(h) * min(h, w)
    fx = np.fft.fftfreq(w) * min(h, w)
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return np.rint(radius).astype(np.int64), min(h, w) // 2


def frc(a, b) -> np.ndarray:
    """Fourier ring correlation for integer-radius rings 0..Nyquist.

    Rings where either image carries no power are reported as 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("frc needs two 2D images of equal shape")
    if not np.any(a) or not np.any(b):
        raise ValueError("frc is undefined for an all-zero image")
    fa, fb = np.fft.fft2(a), np.fft.fft2(b)
    rings, nyq = _ring_index(a.shape)
    sel = rings <= nyq
    idx = rings[sel]
    cross = np.bincount(idx, (fa * np.conj(fb)).real[sel], minlength=nyq + 1)
    pa = np.bincount(idx, (np.abs(fa) ** 2)[sel], minlength=nyq + 1)
    pb = np.bincount(idx, (np.abs(fb) ** 2)[sel], minlength=nyq + 1)
    denom = np.sqrt(pa * pb)
    curve = np.divide(cross, denom, out=np.zeros_like(cross), where=denom > 0)
    return np.clip(curve, -1.0, 1.0)


def frc_qe(vol: VoxelGrid) -> float:
    """Mean over adjacent z-slice pairs of the ring-averaged FRC.

    Pairs involving an all-zero slice are skipped.
    """
    scores = []
    values = np.asarray(vol.values, dtype=np.float64)
    for k in range(values.shape[0] - 1):
        if np.any(values[k]) and np.any(values[k + 1]):
            scores.append(frc(values[k], values[k + 1]).mean())
    if not scores:
        raise ValueError("frc_qe needs at least two adjacent nonzero slices")
    return float(np.mean(scores))


def line_profile(vol: VoxelGrid, p0, p1, n: int, normalize: bool = True) -> np.ndarray:
    """Trilinear samples along the segment ``p0 -> p1`` (um, x/y/z order)."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    grid = vol.grid
    i0, i1 = grid.physical_to_index(p0), grid.physical_to_index(p1)
    upper = np.asarray(grid.dims) - 1
    tol = 1e-9
    for idx in (i0, i1):
        if np.any(idx < -tol) or np.any(idx > upper + tol):
            raise ValueError(f"profile endpoint {grid.index_to_physical(idx)} um lies outside the volume")
    t = np.linspace(0.0, 1.0, n)
    pts = i0[None, :] + t[:, None] * (i1 - i0)[None, :]
    pts = np.clip(pts, 0, upper)
    # map_coordinates indexes (z, y, x)
    samples = ndimage.map_coordinates(np.asarray(vol.values, dtype=np.float64),
                                      pts[:, ::-1].T, order=1, mode="nearest")
    if normalize:
        peak = samples.max()
        if peak > 0:
            samples = samples / peak
    return samples


def fwhm(profile, sample_pitch: float) -> float:
    """Full width at half maximum above the profile minimum, linearly interpolated."""
    y = np.asarray(profile, dtype=np.float64)
    k = int(np.argmax(y))
    base = y.min()
    half = base + 0.5 * (y[k] - base)
    if not y[k] > base:
        raise ValueError("peak not resolved")
    left = k
    while left > 0 and y[left] > half:
        left -= 1
    right = k
    while right < y.size - 1 and y[right] > half:
        right += 1
    if y[left] > half or y[right] > half:
        raise ValueError("peak not resolved")
    xl = left + (half - y[left]) / (y[left + 1] - y[left])
    xr = right - (half - y[right]) / (y[right - 1] - y[right])
    return float((xr - xl) * sample_pitch)


def mip(vol: VoxelGrid, axis: str) -> np.ndarray:
    """Maximum intensity projection along ``x``, ``y`` or ``z``."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    return np.asarray(vol.values).max(axis=AXES[axis])


def resolved_peaks(profile, centers, dip_ratio: float = 0.85) -> bool:
    """True if the profile shows one peak per expected center, separated by dips.

    ``centers`` are sample indices (floats allowed) of the expected peaks. A peak
    is the profile maximum within half a spacing of its center; every dip
    between neighbouring peaks must fall to at most ``dip_ratio`` of the lower
    peak.
    """
    y = np.asarray(profile, dtype=np.float64)
    centers = np.asarray(centers, dtype=float)
    if centers.size < 2:
        raise ValueError("need at least two expected peaks")
    half = 0.5 * np.min(np.diff(centers))
    peaks = []
    for c in centers:
        lo = max(int(np.ceil(c - half)), 0)
        hi = min(int(np.floor(c + half)), y.size - 1)
        window = y[lo:hi + 1]
        j = lo + int(np.argmax(window))
        if j in (lo, hi) and not (lo == 0 or hi == y.size - 1):
            return False
        peaks.append(j)
    for a, b in zip(peaks[:-1], peaks[1:]):
        if b - a < 2:
            return False
        dip = y[a + 1:b].min()
        if dip > dip_ratio * min(y[a], y[b]):
            return False
    return True


@dataclass
class MetricsReport:
    psnr_overall: float | None = None
    psnr_per_layer: list = field(default_factory=list)
    frc_curve: list = field(default_factory=list)
    frc_qe: float | None = None
    profiles: dict = field(default_factory=dict)
    fwhm: list = field(default_factory=list)
    identical: bool = False

    def to_json(self) -> dict:
        data = asdict(self)

        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return "identical" if x > 0 else None
            if isinstance(x, list):
                return [clean(v) for v in x]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            return x
        return clean(data)

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(["kind", "index", "value"])
                for i, v in enumerate(self.psnr_per_layer):
                    out.writerow(["psnr_layer", i, "inf" if not math.isfinite(v) else repr(float(v))])
                for i, v in enumerate(self.frc_curve):
                    out.writerow(["frc_ring", i, repr(float(v))])


def save_mip_png(image: np.ndarray, path) -> dict:
    """Write a 16-bit grayscale PNG with min-max scaling; returns the scaling sidecar."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((image - lo) / span * 65535).astype(np.uint16)
    Image.fromarray(scaled).save(path)
    sidecar = {"min": lo, "max": hi, "bit_depth": 16}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return sidecar
