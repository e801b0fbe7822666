"""Anisotropic 3D Gaussian kernel cloud and its voxelizer.

A kernel is ``rho * exp(-0.5 (x - mu)^T Sigma^-1 (x - mu))`` with
``Sigma = R S S^T R^T``. Stored parameters are unconstrained:
``rho = softplus(density_raw)``, ``s = exp(log_scale)`` and ``R`` comes from
the normalized quaternion ``(w, x, y, z)``.

Voxelization is truncated at a Mahalanobis radius ``cutoff_sigma``. Kernels are
binned into cubic tiles by their axis-aligned bounding box at that radius and
each tile sums its kernels in ascending kernel order, so the result does not
depend on the tile size.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .core import GridSpec, VoxelGrid

GC_MAGIC = b"GCLOUD\x00\x01"
GC_VERSION = 1
GC_FIELDS = (("density_raw", 1), ("mean", 3), ("log_scale", 3), ("quat", 4))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive input")
    # log(expm1(y)) without overflow for large y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GaussianCloud:
    density_raw: np.ndarray
    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        self.density_raw = np.asarray(self.density_raw, dtype=np.float64).reshape(-1)
        m = self.density_raw.size
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(m, 3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(m, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(m, 4)

    @classmethod
    def from_physical(cls, density, mean, scale, quat=None) -> "GaussianCloud":
        """Build from activated values: densities, means (um), scales (um)."""
        density = np.atleast_1d(np.asarray(density, dtype=np.float64))
        m = density.size
        if quat is None:
            quat = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
        return cls(softplus_inv(density), mean, np.log(np.asarray(scale, dtype=np.float64)), quat)

    @property
    def m(self) -> int:
        return self.density_raw.size

    @property
    def density(self) -> np.ndarray:
        return softplus(self.density_raw)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def params(self) -> dict[str, np.ndarray]:
        return {"density_raw": self.density_raw, "mean": self.mean,
                "log_scale": self.log_scale, "quat": self.quat}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.density_raw.copy(), self.mean.copy(),
                             self.log_scale.copy(), self.quat.copy())

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.density_raw[idx], self.mean[idx],
                             self.log_scale[idx], self.quat[idx])

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([a, b]) for a, b in
                               zip(self.params().values(), other.params().values())))

    def covariances(self) -> np.ndarray:
        return covariances(self.log_scale, self.quat)


# --- covariance assembly -------------------------------------------------------

def normalize_quat(quat) -> np.ndarray:
    quat = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero quaternion")
    return quat / norm


def quat_to_rotation(quat) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions ``(w, x, y, z)``."""
    w, x, y, z = np.moveaxis(normalize_quat(quat), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotation_quat_jacobian(qn: np.ndarray) -> np.ndarray:
    """d R / d q for unit quaternions: array (m, 4, 3, 3)."""
    w, x, y, z = qn.T
    zero = np.zeros_like(w)
    dw = np.stack([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dx = np.stack([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = np.stack([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dz = np.stack([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    # each stack is (3, 3, m)
    return 2 * np.stack([dw, dx, dy, dz]).transpose(3, 0, 1, 2)


def covariances(log_scale, quat) -> np.ndarray:
    R = quat_to_rotation(quat)
    s2 = np.exp(2 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


def assemble_covariance(log_scale, quat) -> np.ndarray:
    """``R S S^T R^T`` for a single kernel."""
    return covariances(np.asarray(log_scale, dtype=float)[None], np.asarray(quat, dtype=float)[None])[0]


def precisions(log_scale, quat) -> np.ndarray:
    R = quat_to_rotation(quat)
    inv_s2 = np.exp(-2 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ij,...j,...kj->...ik", R, inv_s2, R)


def eval_gaussian(rho: float, mu, sigma, x) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is not positive definite") from exc
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    y = np.linalg.solve(chol, d)
    return float(rho * np.exp(-0.5 * y @ y))


# --- voxelizer ----------------------------------------------------------------

@dataclass
class VoxelizeConfig:
    cutoff_sigma: float = 3.0
    tile_size: int = 8

    def __post_init__(self):
        if self.cutoff_sigma < 1:
            raise ValueError("cutoff_sigma must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")


def _kernel_boxes(mean, cov, grid: GridSpec, cutoff: float):
    """Inclusive voxel index boxes (m, 3) clipped to the grid; empty when lo > hi."""
    ext = cutoff * np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    origin = np.asarray(grid.origin)
    pitch = np.asarray(grid.pitch)
    lo = np.floor((mean - ext - origin) / pitch).astype(np.int64)
    hi = np.ceil((mean + ext - origin) / pitch).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.dims) - 1)
    return lo, hi


@numba.njit(cache=True)
def _bin_tiles(lo, hi, tile, ntiles):
    ntx, nty, ntz = ntiles
    counts = np.zeros(ntx * nty * ntz + 1, dtype=np.int64)
    m = lo.shape[0]
    for k in range(m):
        if lo[k, 0] > hi[k, 0] or lo[k, 1] > hi[k, 1] or lo[k, 2] > hi[k, 2]:
            continue
        for tz in range(lo[k, 2] // tile, hi[k, 2] // tile + 1):
            for ty in range(lo[k, 1] // tile, hi[k, 1] // tile + 1):
                for tx in range(lo[k, 0] // tile, hi[k, 0] // tile + 1):
                    counts[(tz * nty + ty) * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(m):
        if lo[k, 0] > hi[k, 0] or lo[k, 1] > hi[k, 1] or lo[k, 2] > hi[k, 2]:
            continue
        for tz in range(lo[k, 2] // tile, hi[k, 2] // tile + 1):
            for ty in range(lo[k, 1] // tile, hi[k, 1] // tile + 1):
                for tx in range(lo[k, 0] // tile, hi[k, 0] // tile + 1):
                    t = (tz * nty + ty) * ntx + tx
                    ids[fill[t]] = k
                    fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _render_tiles(rho, mean, prec, lo, hi, offsets, ids, origin, pitch, dims, tile, ntiles, cut2):
    nx, ny, nz = dims
    ntx, nty, ntz = ntiles
    out = np.zeros((nz, ny, nx))
    for t in range(ntx * nty * ntz):
        tx = t % ntx
        ty = (t // ntx) % nty
        tz = t // (ntx * nty)
        for n in range(offsets[t], offsets[t + 1]):
            k = ids[n]
            x0 = max(lo[k, 0], tx * tile)
            x1 = min(hi[k, 0], tx * tile + tile - 1)
            y0 = max(lo[k, 1], ty * tile)
            y1 = min(hi[k, 1], ty * tile + tile - 1)
            z0 = max(lo[k, 2], tz * tile)
            z1 = min(hi[k, 2], tz * tile + tile - 1)
            p00 = prec[k, 0, 0]
            p01 = prec[k, 0, 1]
            p02 = prec[k, 0, 2]
            p11 = prec[k, 1, 1]
            p12 = prec[k, 1, 2]
            p22 = prec[k, 2, 2]
            r = rho[k]
            for iz in range(z0, z1 + 1):
                dz = origin[2] + iz * pitch[2] - mean[k, 2]
                for iy in range(y0, y1 + 1):
                    dy = origin[1] + iy * pitch[1] - mean[k, 1]
                    for ix in range(x0, x1 + 1):
                        dx = origin[0] + ix * pitch[0] - mean[k, 0]
                        q = (p00 * dx * dx + p11 * dy * dy + p22 * dz * dz
                             + 2.0 * (p01 * dx * dy + p02 * dx * dz + p12 * dy * dz))
                        if q <= cut2:
                            out[iz, iy, ix] += r * np.exp(-0.5 * q)
    return out


@numba.njit(cache=True)
def _accumulate_kernels(mean, prec, lo, hi, grad, origin, pitch, cut2):
    """Per-kernel sums of g*E, g*E*d and g*E*d d^T over voxels inside the cutoff."""
    m = mean.shape[0]
    s0 = np.zeros(m)
    s1 = np.zeros((m, 3))
    s2 = np.zeros((m, 3, 3))
    for k in range(m):
        p00 = prec[k, 0, 0]
        p01 = prec[k, 0, 1]
        p02 = prec[k, 0, 2]
        p11 = prec[k, 1, 1]
        p12 = prec[k, 1, 2]
        p22 = prec[k, 2, 2]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        axx = 0.0
        axy = 0.0
        axz = 0.0
        ayy = 0.0
        ayz = 0.0
        azz = 0.0
        for iz in range(lo[k, 2], hi[k, 2] + 1):
            dz = origin[2] + iz * pitch[2] - mean[k, 2]
            for iy in range(lo[k, 1], hi[k, 1] + 1):
                dy = origin[1] + iy * pitch[1] - mean[k, 1]
                for ix in range(lo[k, 0], hi[k, 0] + 1):
                    g = grad[iz, iy, ix]
                    if g == 0.0:
                        continue
                    dx = origin[0] + ix * pitch[0] - mean[k, 0]
                    q = (p00 * dx * dx + p11 * dy * dy + p22 * dz * dz
                         + 2.0 * (p01 * dx * dy + p02 * dx * dz + p12 * dy * dz))
                    if q <= cut2:
                        ge = g * np.exp(-0.5 * q)
                        a0 += ge
                        a1 += ge * dx
                        a2 += ge * dy
                        a3 += ge * dz
                        axx += ge * dx * dx
                        axy += ge * dx * dy
                        axz += ge * dx * dz
                        ayy += ge * dy * dy
                        ayz += ge * dy * dz
                        azz += ge * dz * dz
        s0[k] = a0
        s1[k, 0] = a1
        s1[k, 1] = a2
        s1[k, 2] = a3
        s2[k, 0, 0] = axx
        s2[k, 0, 1] = axy
        s2[k, 0, 2] = axz
        s2[k, 1, 0] = axy
        s2[k, 1, 1] = ayy
        s2[k, 1, 2] = ayz
        s2[k, 2, 0] = axz
        s2[k, 2, 1] = ayz
        s2[k, 2, 2] = azz
    return s0, s1, s2


def voxelize(cloud: GaussianCloud, grid: GridSpec, cfg: VoxelizeConfig | None = None) -> VoxelGrid:
    cfg = cfg or VoxelizeConfig()
    if cloud.m == 0:
        raise ValueError("cannot voxelize an empty cloud")
    cov = cloud.covariances()
    prec = precisions(cloud.log_scale, cloud.quat)
    lo, hi = _kernel_boxes(cloud.mean, cov, grid, cfg.cutoff_sigma)
    tile = int(cfg.tile_size)
    ntiles = tuple(-(-n // tile) for n in grid.dims)
    offsets, ids = _bin_tiles(lo, hi, tile, ntiles)
    out = _render_tiles(cloud.density, cloud.mean, prec, lo, hi, offsets, ids,
                        np.asarray(grid.origin), np.asarray(grid.pitch), grid.dims,
                        tile, ntiles, float(cfg.cutoff_sigma) ** 2)
    return VoxelGrid.from_grid(out, grid)


def voxelize_backward(cloud: GaussianCloud, grid: GridSpec, cfg: VoxelizeConfig | None,
                      grad_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * voxelize(cloud))`` w.r.t. the raw parameters.

    Truncation boundaries are treated as fixed (the cutoff indicator has zero
    derivative almost everywhere).
    """
    cfg = cfg or VoxelizeConfig()
    grad_out = np.asarray(getattr(grad_out, "values", grad_out), dtype=np.float64)
    if grad_out.shape != grid.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != grid shape {grid.shape}")
    if not np.all(np.isfinite(grad_out)):
        raise ValueError("grad_out must be finite")
    qn = normalize_quat(cloud.quat)
    R = quat_to_rotation(qn)
    s2 = np.exp(2 * cloud.log_scale)
    cov = np.einsum("mij,mj,mkj->mik", R, s2, R)
    prec = np.einsum("mij,mj,mkj->mik", R, 1.0 / s2, R)
    lo, hi = _kernel_boxes(cloud.mean, cov, grid, cfg.cutoff_sigma)
    sE, sEd, sEdd = _accumulate_kernels(cloud.mean, prec, lo, hi, grad_out,
                                        np.asarray(grid.origin), np.asarray(grid.pitch),
                                        float(cfg.cutoff_sigma) ** 2)
    rho = cloud.density
    g_density_raw = sE * sigmoid(cloud.density_raw)
    g_mean = np.einsum("mij,mj->mi", prec, rho[:, None] * sEd)
    # dL/dP = -rho/2 * sEdd  ->  dL/dSigma = P (rho/2 sEdd) P
    g_cov = 0.5 * rho[:, None, None] * np.einsum("mij,mjk,mkl->mil", prec, sEdd, prec)
    rtgr = np.einsum("mji,mjk,mkl->mil", R, g_cov, R)
    g_log_scale = 2.0 * s2 * np.diagonal(rtgr, axis1=1, axis2=2)
    g_R = 2.0 * np.einsum("mij,mjk,mk->mik", g_cov, R, s2)
    g_qn = np.einsum("mij,maij->ma", g_R, _rotation_quat_jacobian(qn))
    norm = np.linalg.norm(cloud.quat, axis=1, keepdims=True)
    g_quat = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / norm
    return {"density_raw": g_density_raw, "mean": g_mean,
            "log_scale": g_log_scale, "quat": g_quat}


# --- initialization -------------------------------------------------------------

@dataclass
class InitConfig:
    percentile: float = 90.0
    scale_factor: float = 1.5

    def __post_init__(self):
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")


def init_from_volume(vol: VoxelGrid, n: int, seed, cfg: InitConfig | None = None) -> GaussianCloud:
    """Sample kernel centers from a volume, proportional to intensity.

    Candidates are voxels at or above the ``percentile`` of the nonzero
    intensities. Each kernel takes its voxel's intensity as density and an
    isotropic scale of ``scale_factor`` voxel pitches.
    """
    cfg = cfg or InitConfig()
    values = np.maximum(np.asarray(vol.values, dtype=np.float64), 0).ravel()
    nonzero = values[values > 0]
    if nonzero.size == 0:
        raise ValueError("initializer found no signal")
    threshold = np.percentile(nonzero, cfg.percentile)
    candidates = np.flatnonzero((values >= threshold) & (values > 0))
    if n > candidates.size:
        raise ValueError(f"requested {n} kernels but only {candidates.size} candidate voxels")
    weights = values[candidates] / values[candidates].sum()
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=n, replace=False, p=weights)
    nz, ny, nx = vol.values.shape
    iz, iy, ix = np.unravel_index(chosen, (nz, ny, nx))
    mean = vol.grid.index_to_physical(np.stack([ix, iy, iz], axis=1))
    scale = cfg.scale_factor * min(vol.pitch)
    return GaussianCloud.from_physical(values[chosen], mean, np.full((n, 3), scale))


# --- checkpoint -------------------------------------------------------------------

def save_cloud(cloud: GaussianCloud, path) -> None:
    """Write a ``.gc`` checkpoint: magic, header length, JSON header, float32 payload."""
    arrays = [cloud.density_raw[:, None], cloud.mean, cloud.log_scale, cloud.quat]
    payload = np.concatenate(arrays, axis=1)
    if not np.all(np.isfinite(payload)):
        raise ValueError(f"refusing to write non-finite cloud parameters to {path}")
    header = json.dumps({
        "format_version": GC_VERSION, "m": cloud.m, "dtype": "float32-le",
        "fields": [{"name": n, "width": w} for n, w in GC_FIELDS], "layout": "row-per-kernel",
    }).encode()
    with open(path, "wb") as fh:
        fh.write(GC_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(GC_MAGIC)] != GC_MAGIC:
        raise ValueError(f"{path} is not a Gaussian cloud checkpoint")
    pos = len(GC_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    header = json.loads(raw[pos + 4:pos + 4 + hlen])
    if header.get("format_version") != GC_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    width = sum(f["width"] for f in header["fields"])
    m = int(header["m"])
    body = raw[pos + 4 + hlen:]
    if len(body) != 4 * m * width:
        raise ValueError(f"{path}: expected {4 * m * width} payload bytes, found {len(body)}")
    table = np.frombuffer(body, dtype="<f4").reshape(m, width).astype(np.float64)
    cols, start = {}, 0
    for f in header["fields"]:
        cols[f["name"]] = table[:, start:start + f["width"]]
        start += f["width"]
    return GaussianCloud(cols["density_raw"], cols["mean"], cols["log_scale"], cols["quat"])
