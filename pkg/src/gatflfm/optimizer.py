"""Training loop for the Gaussian cloud: losses, Adam updates, density control."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft as sfft

from . import optics
from .core import GridSpec, PsfStack, SensorImage, VoxelGrid
from .gaussians import (GaussianCloud, VoxelizeConfig, _kernel_boxes, save_cloud, softplus,
                        softplus_inv, quat_to_rotation, voxelize, voxelize_backward)
from .optics import ProjectionOperator

logger = logging.getLogger(__name__)

GROUPS = ("density_raw", "mean", "log_scale", "quat")


class TrainingError(RuntimeError):
    pass


class CloudCollapsed(TrainingError):
    pass


@dataclass
class LossConfig:
    alpha: float = 1e-3
    lambda_erank: float = 1e-2
    e_min: float = 1.2

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_erank < 0:
            raise ValueError("loss weights must be >= 0")
        if not 1 < self.e_min <= 3:
            raise ValueError("e_min must lie in (1, 3]")


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_density: float = 0.05
    # multiplied by the grid diagonal length (um)
    lr_mean: float = 1.6e-4
    lr_log_scale: float = 5e-3
    lr_quat: float = 1e-3
    lr_mean_final: float = 0.01
    # final fraction for the density, scale and rotation groups
    lr_final: float = 0.01
    densify_interval: int = 100
    densify_until: float = 0.5
    # threshold on |dL/dmu| * pitch / mean loss over the densify window
    tau_grad: float = 5e-3
    tau_scale: float = 2.0
    tau_prune: float = 1e-3
    split_factor: float = 1.6
    # densification stops adding kernels beyond max_growth x the initial count
    max_growth: float = 4.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr_density", "lr_mean", "lr_log_scale", "lr_quat", "lr_mean_final", "lr_final",
                     "tau_grad", "tau_scale", "tau_prune", "split_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.max_growth >= 1:
            raise ValueError("max_growth must be >= 1")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if not 0 <= self.densify_until <= 1:
            raise ValueError("densify_until must lie in [0, 1]")


@dataclass
class TrainState:
    moment1: dict
    moment2: dict
    grad_accum: np.ndarray
    grad_count: np.ndarray
    loss_accum: float = 0.0
    loss_count: int = 0
    step: int = 0
    history: dict = field(default_factory=lambda: {k: [] for k in ("total", "mse", "fdl", "erank", "m")})
    events: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, cloud: GaussianCloud) -> "TrainState":
        params = cloud.params()
        return cls(moment1={k: np.zeros_like(v) for k, v in params.items()},
                   moment2={k: np.zeros_like(v) for k, v in params.items()},
                   grad_accum=np.zeros(cloud.m), grad_count=np.zeros(cloud.m, dtype=np.int64))

    def reset_accumulators(self) -> None:
        self.grad_accum = np.zeros_like(self.grad_accum)
        self.grad_count = np.zeros_like(self.grad_count)
        self.loss_accum = 0.0
        self.loss_count = 0

    def select(self, keep: np.ndarray, n_new: int) -> "TrainState":
        """Keep rows ``keep`` of every per-kernel array and append ``n_new`` zero rows."""
        def take(a):
            pad = np.zeros((n_new,) + a.shape[1:], dtype=a.dtype)
            return np.concatenate([a[keep], pad])
        return TrainState({k: take(v) for k, v in self.moment1.items()},
                          {k: take(v) for k, v in self.moment2.items()},
                          take(self.grad_accum), take(self.grad_count),
                          self.loss_accum, self.loss_count,
                          self.step, self.history, self.events, self.final)

    def relative_grad(self) -> np.ndarray:
        """Mean positional gradient per kernel, relative to the mean loss of the window."""
        mean_loss = self.loss_accum / self.loss_count if self.loss_count else 1.0
        return self.grad_accum / np.maximum(self.grad_count, 1) / max(mean_loss, 1e-300)


# --- loss terms ---------------------------------------------------------------

def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def fdl(x, y) -> float:
    """Sum of moduli of the difference of unnormalized 2D DFTs."""
    a, b = _values(x), _values(y)
    if a.shape != b.shape:
        raise ValueError(f"fdl needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.abs(sfft.fft2(a - b, workers=optics.FFT_WORKERS)).sum())


def _fdl_and_grad(residual: np.ndarray) -> tuple[float, np.ndarray]:
    D = sfft.fft2(residual, workers=optics.FFT_WORKERS)
    mag = np.abs(D)
    unit = np.divide(D, mag, out=np.zeros_like(D), where=mag > 0)
    grad = sfft.ifft2(unit, workers=optics.FFT_WORKERS).real * residual.size
    return float(mag.sum()), grad


def effective_rank(log_scale) -> np.ndarray:
    log_scale = np.atleast_2d(np.asarray(log_scale, dtype=np.float64))
    log_lam = 2 * log_scale
    log_p = log_lam - np.logaddexp.reduce(log_lam, axis=1, keepdims=True)
    p = np.exp(log_p)
    return np.exp(-np.sum(p * log_p, axis=1))


def erank_penalty(cloud: GaussianCloud, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Hinge on the effective rank of each covariance; returns value and d/d log_scale."""
    log_lam = 2 * cloud.log_scale
    log_p = log_lam - np.logaddexp.reduce(log_lam, axis=1, keepdims=True)
    p = np.exp(log_p)
    entropy = -np.sum(p * log_p, axis=1)
    erank = np.exp(entropy)
    active = erank < cfg.e_min
    value = cfg.lambda_erank * float(np.mean(np.where(active, cfg.e_min - erank, 0.0)))
    # d entropy / d log s_k = -2 p_k (log p_k + entropy)
    d_entropy = -2 * p * (log_p + entropy[:, None])
    grad = np.where(active[:, None], -cfg.lambda_erank / cloud.m * erank[:, None] * d_entropy, 0.0)
    return value, grad


def loss_and_grad(cloud: GaussianCloud, measurement, psf: PsfStack, grid: GridSpec,
                  loss_cfg: LossConfig, vox_cfg: VoxelizeConfig | None = None,
                  op: ProjectionOperator | None = None) -> tuple[dict, dict]:
    """Total loss ``MSE + alpha * FDL + erank`` on the projected cloud and its gradients."""
    vox_cfg = vox_cfg or VoxelizeConfig()
    op = op or ProjectionOperator(psf, grid.shape)
    meas = _values(measurement)
    volume = voxelize(cloud, grid, vox_cfg).values
    residual = op.apply(volume) - meas
    mse = float(np.mean(residual ** 2))
    g_img = 2.0 * residual / residual.size
    fdl_value = 0.0
    if loss_cfg.alpha > 0:
        fdl_value, g_fdl = _fdl_and_grad(residual)
        g_img += loss_cfg.alpha * g_fdl
    grads = voxelize_backward(cloud, grid, vox_cfg, op.adjoint(g_img))
    erank_value = 0.0
    if loss_cfg.lambda_erank > 0:
        erank_value, g_erank = erank_penalty(cloud, loss_cfg)
        grads["log_scale"] = grads["log_scale"] + g_erank
    components = {"total": mse + loss_cfg.alpha * fdl_value + erank_value,
                  "mse": mse, "fdl": fdl_value, "erank": erank_value}
    return components, grads


# --- density control ------------------------------------------------------------

def densify_and_prune(cloud: GaussianCloud, state: TrainState, grid: GridSpec, cfg: TrainConfig,
                      rng: np.random.Generator, vox_cfg: VoxelizeConfig | None = None,
                      max_kernels: int | None = None) -> tuple[GaussianCloud, TrainState]:
    """Prune faint kernels, split large high-gradient ones, clone small high-gradient ones.

    With ``max_kernels`` only the highest-gradient candidates are densified,
    as many as fit under the limit after pruning. Clones share their parent's density equally with it, so cloning leaves the
    voxelized volume unchanged; the clone starts with zero Adam moments and
    separates from its parent through the optimizer.
    """
    vox_cfg = vox_cfg or VoxelizeConfig()
    if state.grad_accum.shape != (cloud.m,):
        raise ValueError("state accumulators are not aligned with the cloud")
    rho = cloud.density
    scale = cloud.scale
    avg_grad = state.relative_grad()
    lo, hi = _kernel_boxes(cloud.mean, cloud.covariances(), grid, vox_cfg.cutoff_sigma)
    outside = np.any(lo > hi, axis=1)
    prune = (rho < cfg.tau_prune * rho.max()) | outside
    hot = (avg_grad > cfg.tau_grad) & ~prune
    if max_kernels is not None:
        room = max(0, max_kernels - int(np.count_nonzero(~prune)))
        if np.count_nonzero(hot) > room:
            ranked = np.flatnonzero(hot)[np.argsort(-avg_grad[hot], kind="stable")]
            hot = np.zeros_like(hot)
            hot[ranked[:room]] = True
    big = scale.max(axis=1) > cfg.tau_scale * min(grid.pitch)
    split = hot & big
    clone = hot & ~big

    keep = ~prune & ~split
    kept = cloud.subset(keep)
    clone_in_kept = clone[keep]
    if np.any(clone_in_kept):
        kept.density_raw[clone_in_kept] = softplus_inv(0.5 * rho[keep][clone_in_kept])
    clones = kept.subset(clone_in_kept)

    parents = cloud.subset(split)
    n_split = parents.m
    if n_split:
        R = quat_to_rotation(parents.quat)
        children = []
        for _ in range(2):
            local = rng.standard_normal((n_split, 3)) * parents.scale
            child = parents.copy()
            child.mean = parents.mean + np.einsum("mij,mj->mi", R, local)
            child.log_scale = parents.log_scale - math.log(cfg.split_factor)
            # two children at scale s/f carry the parent's integrated mass
            child.density_raw = softplus_inv(parents.density * cfg.split_factor ** 3 / 2)
            children.append(child)
        new = clones.concat(children[0]).concat(children[1])
    else:
        new = clones
    result = kept.concat(new)
    if result.m == 0:
        raise CloudCollapsed(
            f"cloud collapsed: density control removed all {cloud.m} kernels "
            f"(max rho {rho.max():.3e}, prune floor {cfg.tau_prune * rho.max():.3e}, "
            f"{int(outside.sum())} outside the grid)")
    new_state = state.select(keep, new.m)
    new_state.reset_accumulators()
    new_state.events.append({"step": state.step, "pruned": int(prune.sum()),
                             "split": int(n_split), "cloned": int(clone.sum()), "m": result.m})
    return result, new_state


# --- optimizer -----------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: TrainState, lrs: dict, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    for name in GROUPS:
        g = grads[name]
        m1 = state.moment1[name]
        m2 = state.moment2[name]
        m1 *= cfg.beta1
        m1 += (1 - cfg.beta1) * g
        m2 *= cfg.beta2
        m2 += (1 - cfg.beta2) * g * g
        params[name] -= lrs[name] * (m1 / c1) / (np.sqrt(m2 / c2) + cfg.adam_eps)


def learning_rates(cfg: TrainConfig, grid: GridSpec, it: int) -> dict:
    frac = it / max(cfg.iterations - 1, 1)
    mean_lr = cfg.lr_mean * grid.extent * cfg.lr_mean_final ** frac
    decay = cfg.lr_final ** frac
    return {"density_raw": cfg.lr_density * decay, "mean": mean_lr,
            "log_scale": cfg.lr_log_scale * decay, "quat": cfg.lr_quat * decay}


@dataclass
class TrainResult:
    cloud: GaussianCloud
    volume: VoxelGrid
    state: TrainState


def train(measurement, psf: PsfStack, grid: GridSpec, cloud_init: GaussianCloud,
          loss_cfg: LossConfig | None = None, train_cfg: TrainConfig | None = None,
          vox_cfg: VoxelizeConfig | None = None, log_path=None, checkpoint_dir=None,
          callback=None) -> TrainResult:
    """Optimize the cloud so its projection matches ``measurement``.

    Every step records the pre-update loss. Density control runs every
    ``densify_interval`` steps while fewer than ``densify_until * iterations``
    steps have completed. ``callback(it, cloud, components)`` is invoked after
    each step.
    """
    loss_cfg = loss_cfg or LossConfig()
    cfg = train_cfg or TrainConfig()
    vox_cfg = vox_cfg or VoxelizeConfig()
    meas = _values(measurement)
    if not np.all(np.isfinite(meas)):
        raise ValueError("measurement contains non-finite values")
    op = ProjectionOperator(psf, grid.shape)
    cloud = cloud_init.copy()
    state = TrainState.fresh(cloud)
    rng = np.random.default_rng(cfg.seed)
    max_kernels = math.ceil(cfg.max_growth * cloud.m)
    pitch = min(grid.pitch)
    log = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            comps, grads = loss_and_grad(cloud, meas, psf, grid, loss_cfg, vox_cfg, op)
            if not all(math.isfinite(v) for v in comps.values()):
                raise TrainingError(f"non-finite loss at iteration {it}: {comps}")
            for key in ("total", "mse", "fdl", "erank"):
                state.history[key].append(comps[key])
            state.history["m"].append(cloud.m)
            # positional gradient measured per voxel-pitch displacement
            state.grad_accum += np.linalg.norm(grads["mean"], axis=1) * pitch
            state.grad_count += 1
            state.loss_accum += comps["total"]
            state.loss_count += 1
            lrs = learning_rates(cfg, grid, it)
            adam_step(cloud.params(), grads, state, lrs, cfg)
            done = it + 1
            if done % cfg.densify_interval == 0 and done < cfg.densify_until * cfg.iterations:
                cloud, state = densify_and_prune(cloud, state, grid, cfg, rng, vox_cfg, max_kernels)
            if log is not None:
                log.write(json.dumps({"iteration": it, "m": cloud.m, **comps,
                                      "lr": lrs}) + "\n")
            if checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_cloud(cloud, os.path.join(checkpoint_dir, f"iter_{done:06d}.gc"))
            if callback is not None:
                callback(it, cloud, comps)
    finally:
        if log is not None:
            log.close()
    volume = voxelize(cloud, grid, vox_cfg).clamped()
    residual = op.apply(volume.values) - meas
    state.final = {"mse": float(np.mean(residual ** 2)), "fdl": fdl(residual, np.zeros_like(residual)),
                   "m": cloud.m}
    return TrainResult(cloud, volume, state)


def config_echo(*cfgs) -> dict:
    return {type(c).__name__: asdict(c) for c in cfgs if c is not None}


def scale_cloud_density(cloud: GaussianCloud, factor: float) -> GaussianCloud:
    out = cloud.copy()
    out.density_raw = softplus_inv(softplus(cloud.density_raw) * factor)
    return out
