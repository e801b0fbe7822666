"""``gatflfm`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .classical import rl_deconvolve
from .config import ConfigError, OpticsSection, RunConfig, load_config
from .core import (FORMAT_VERSION, FormatError, SensorImage, load_image, load_psf,
                   load_volume, save_image, save_psf, save_volume)
from .gaussians import GC_VERSION, save_cloud
from .metrics import MetricsReport, frc, frc_qe, line_profile, mip, psnr, save_mip_png
from .optics import forward_project, set_fft_workers, synthesize_psf
from .optimizer import TrainingError
from .phantoms import add_noise
from .pipeline import PRESETS, bead_fwhm, gat_from_config, make_phantom, reconstruct_wiener
from .repro import RUNNERS, run_scenario

logger = logging.getLogger("gatflfm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST_VERSION = 1


class InputError(Exception):
    """Bad or inconsistent inputs detected by a command (maps to exit code 2)."""


# --- run bookkeeping -----------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Tracks files read and written by one command and emits ``manifest.json``."""

    def __init__(self, command: str, cfg: RunConfig, outdir: str, threads: int, args: dict):
        self.command, self.cfg, self.outdir = command, cfg, outdir
        self.threads, self.args = threads, args
        self.inputs: dict[str, str] = {}
        os.makedirs(outdir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.outdir, name)

    def read(self, path) -> str:
        if path is None or not os.path.exists(path):
            raise InputError(f"input not found: {path}")
        self.inputs[os.path.basename(path)] = sha256(path)
        header = os.fspath(path) + ".json"
        if os.path.exists(header):
            self.inputs[os.path.basename(header)] = sha256(header)
        return path

    def outputs(self) -> dict:
        out = {}
        for root, _, files in os.walk(self.outdir):
            for name in files:
                full = os.path.join(root, name)
                rel = os.path.relpath(full, self.outdir).replace(os.sep, "/")
                if rel != "manifest.json":
                    out[rel] = sha256(full)
        return dict(sorted(out.items()))

    def write_manifest(self) -> dict:
        config = self.cfg.to_dict()
        # keep the manifest location independent: only base names of paths
        config["paths"] = {k: (os.path.basename(v) if isinstance(v, str) else v)
                           for k, v in config["paths"].items() if k != "output_dir"}
        manifest = {
            "tool": "gatflfm", "version": __version__, "command": self.command,
            "arguments": self.args, "seed": self.cfg.seed, "threads": self.threads,
            "format_versions": {"raw": FORMAT_VERSION, "cloud": GC_VERSION,
                                "manifest": MANIFEST_VERSION},
            "config": config, "inputs": dict(sorted(self.inputs.items())),
            "outputs": self.outputs(),
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return manifest


def set_threads(n: int) -> int:
    # the voxelizer kernels are serial; FFT workers are the only thread pool
    n = max(1, int(n))
    set_fft_workers(n)
    return n


# --- shared loaders ------------------------------------------------------------------

def obtain_psf(run: Run, cfg: RunConfig):
    if cfg.paths.psf:
        psf, _ = load_psf(run.read(cfg.paths.psf))
        return psf
    if cfg.optics is None:
        raise ConfigError("no PSF: set paths.psf or add an [optics] section")
    return synthesize_psf(cfg.optics.build(), cfg.sensor.dims, cfg.grid_spec())


def check_psf_grid(psf, cfg: RunConfig) -> None:
    if psf.nz != cfg.grid.dims[2]:
        raise InputError(f"PSF has {psf.nz} depth planes but the grid has nz={cfg.grid.dims[2]}")


# --- commands ---------------------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig, run: Run) -> None:
    if args.kind is not None:
        cfg = replace(cfg, phantom=replace(cfg.phantom, kind=args.kind))
    kind = cfg.phantom.kind
    run.cfg = cfg
    try:
        vol, info = make_phantom(cfg)
    except ValueError as exc:
        raise ConfigError(f"phantom.{kind}: {exc}") from exc
    save_volume(vol, run.path("phantom.vol"))
    echo = {"kind": kind, "grid": cfg.to_dict()["grid"],
            "spec": cfg.to_dict()["phantom"][kind], **info}
    with open(run.path("phantom.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)


def cmd_psf(args, cfg: RunConfig, run: Run) -> None:
    optics = cfg.optics or OpticsSection()
    psf = synthesize_psf(optics.build(), cfg.sensor.dims, cfg.grid_spec())
    save_psf(psf, run.path("psf.psf"))


def cmd_project(args, cfg: RunConfig, run: Run) -> None:
    if not cfg.paths.volume:
        raise ConfigError("project needs paths.volume")
    vol = load_volume(run.read(cfg.paths.volume))
    psf = obtain_psf(run, cfg)
    if psf.nz != vol.dims[2]:
        raise InputError(f"PSF has {psf.nz} depth planes but the volume has nz={vol.dims[2]}")
    img = forward_project(vol, psf)
    img = SensorImage(img.values, vol.pitch[0], img.meta)
    if cfg.noise.enabled:
        img = add_noise(img, cfg.noise.photon_scale, cfg.noise.gaussian_sigma, cfg.noise.seed)
        img = img.with_values(np.maximum(img.values, 0))
    save_image(img, run.path("image.img"))


def cmd_recon(args, cfg: RunConfig, run: Run) -> None:
    if not cfg.paths.image:
        raise ConfigError("recon needs paths.image")
    img = load_image(run.read(cfg.paths.image))
    psf = obtain_psf(run, cfg)
    check_psf_grid(psf, cfg)
    if tuple(img.dims) != tuple(psf.dims):
        raise InputError(f"image dims {img.dims} differ from PSF dims {psf.dims}")
    grid = cfg.grid_spec()
    method = args.method
    if method == "wiener":
        vol = reconstruct_wiener(img, psf, grid, cfg.wiener)
    elif method == "rl":
        vol, history = rl_deconvolve(img, psf, cfg.rl, grid)
        with open(run.path("rl_likelihood.csv"), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "log_likelihood"])
            out.writerows((k + 1, repr(float(v))) for k, v in enumerate(history))
    else:
        ckpt = None
        if cfg.train.checkpoint_every:
            ckpt = run.path("checkpoints")
            os.makedirs(ckpt, exist_ok=True)
        result = gat_from_config(img, psf, cfg, log_path=run.path("gat.log.jsonl"),
                                 checkpoint_dir=ckpt)
        save_cloud(result.cloud, run.path("gat.gc"))
        vol = result.volume
    save_volume(vol, run.path(f"recon_{method}.vol"))
    if cfg.metrics.mip:
        for axis in ("z", "x"):
            save_mip_png(mip(vol, axis), run.path(f"recon_{method}_mip_{axis}.png"))


def cmd_metrics(args, cfg: RunConfig, run: Run) -> None:
    if not cfg.paths.recon:
        raise ConfigError("metrics needs paths.recon")
    recon = load_volume(run.read(cfg.paths.recon))
    gt = load_volume(run.read(cfg.paths.ground_truth)) if cfg.paths.ground_truth else None
    if gt is not None and tuple(gt.dims) != tuple(recon.dims):
        raise InputError(f"reconstruction dims {recon.dims} differ from ground truth dims {gt.dims}")
    m = cfg.metrics
    report = MetricsReport()
    if gt is not None:
        report.psnr_overall = psnr(recon, gt)
        report.identical = not np.isfinite(report.psnr_overall)
        if m.per_layer:
            report.psnr_per_layer = [float(v) for v in psnr(recon, gt, per_layer=True)]
            with open(run.path("psnr_per_layer.csv"), "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(["z_index", "z_um", "psnr_db"])
                for k, v in enumerate(report.psnr_per_layer):
                    z = recon.grid.index_to_physical([0, 0, k])[2]
                    out.writerow([k, repr(float(z)), "inf" if not np.isfinite(v) else repr(v)])
    if m.frc:
        if gt is not None:
            k = recon.dims[2] // 2
            report.frc_curve = [float(v) for v in frc(recon.values[k], gt.values[k])]
        try:
            report.frc_qe = frc_qe(recon)
        except ValueError as exc:
            logger.warning("frc_qe skipped: %s", exc)
    for i, prof in enumerate(m.profiles):
        try:
            p0, p1, n = prof["p0"], prof["p1"], int(prof.get("n", 100))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"metrics.profiles[{i}] needs p0, p1 and n") from exc
        try:
            samples = {"recon": line_profile(recon, p0, p1, n)}
            if gt is not None:
                samples["ground_truth"] = line_profile(gt, p0, p1, n)
        except ValueError as exc:
            raise InputError(f"metrics.profiles[{i}]: {exc}") from exc
        report.profiles[f"profile_{i}"] = {k: v.tolist() for k, v in samples.items()}
        with open(run.path(f"profile_{i}.csv"), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", *samples])
            t = np.linspace(0, 1, n)
            for j in range(n):
                out.writerow([repr(float(t[j])), *(repr(float(s[j])) for s in samples.values())])
    if m.fwhm:
        if not m.bead_centers:
            raise ConfigError("metrics.fwhm needs metrics.bead_centers")
        for c in m.bead_centers:
            try:
                lat, ax = bead_fwhm(recon, c)
            except ValueError as exc:
                logger.warning("FWHM at %s failed: %s", c, exc)
                lat, ax = float("nan"), float("nan")
            report.fwhm.append({"center_um": list(c), "lateral_um": lat, "axial_um": ax})
    if m.mip:
        for axis in ("z", "x"):
            save_mip_png(mip(recon, axis), run.path(f"recon_mip_{axis}.png"))
    report.write(run.path("metrics.json"))


def cmd_repro(args, cfg: RunConfig, run: Run) -> None:
    summary = run_scenario(args.scenario, cfg, run.outdir)
    print(json.dumps(summary, indent=2, sort_keys=True))


COMMANDS = {"phantom": cmd_phantom, "psf": cmd_psf, "project": cmd_project, "recon": cmd_recon,
            "metrics": cmd_metrics, "repro": cmd_repro}


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML run configuration")
    common.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.iterations=200 (repeatable)")
    common.add_argument("-o", "--out", help="output directory (default: paths.output_dir)")
    common.add_argument("--threads", type=int, default=None,
                        help="FFT worker threads (default: $GATFLFM_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gatflfm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("phantom", parents=[common], help="write a ground-truth volume")
    p.add_argument("--kind", choices=("beads", "lines", "extended"),
                   help="phantom type (default: phantom.kind from the config)")
    sub.add_parser("psf", parents=[common], help="synthesize a PSF stack")
    sub.add_parser("project", parents=[common], help="forward-project a volume to a sensor image")
    p = sub.add_parser("recon", parents=[common], help="reconstruct a volume from a sensor image")
    p.add_argument("method", choices=("wiener", "rl", "gat"))
    sub.add_parser("metrics", parents=[common], help="score a reconstruction")
    p = sub.add_parser("repro", parents=[common], help="run a built-in simulation scenario")
    p.add_argument("--scenario", required=True, choices=tuple(RUNNERS))
    return parser


def resolve_config(args) -> RunConfig:
    base = PRESETS[args.scenario] if args.command == "repro" else None
    return load_config(args.config, args.set, base=base)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads_env = os.environ.get("GATFLFM_THREADS")
    try:
        threads = args.threads if args.threads is not None else int(threads_env or 1)
        if threads < 1:
            raise ValueError
    except ValueError:
        print("error: thread count must be a positive integer", file=sys.stderr)
        return EXIT_CONFIG
    threads = set_threads(threads)
    try:
        cfg = resolve_config(args)
        outdir = args.out or cfg.paths.output_dir
        echo = {k: v for k, v in vars(args).items()
                if k in ("method", "kind", "scenario", "set") and v is not None}
        run = Run(args.command, cfg, outdir, threads, echo)
        if args.config:
            run.read(args.config)
        COMMANDS[args.command](args, cfg, run)
        run.write_manifest()
    except (ConfigError, InputError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError, ArithmeticError, RuntimeError, OSError,
            ValueError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
