#!/usr/bin/env python3
"""PSNR of Richardson-Lucy against iteration count on a preset scene.

    python scripts/rl_iterations.py --preset extended --iterations 3000 --csv rl.csv

Prints the best iteration and the PSNR at a few checkpoints. This is how the
extended scenario's RL budget was chosen.
"""
import argparse
import csv
from dataclasses import replace

from gatflfm.pipeline import make_measurement, make_phantom, make_psf, preset, reconstruct_rl


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="extended")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--csv", default=None, help="write the full curve here")
    args = ap.parse_args(argv)

    cfg = preset(args.preset)
    cfg = replace(cfg, rl=replace(cfg.rl, iterations=args.iterations))
    gt, _ = make_phantom(cfg)
    psf = make_psf(cfg)
    img = make_measurement(gt, psf, cfg)
    run = reconstruct_rl(img, psf, cfg.grid_spec(), cfg.rl, ground_truth=gt)
    curve = run.psnr_curve
    for k in (10, 20, 50, 100, 200, 500, 1000, 2000, 5000):
        if k <= len(curve):
            print(f"iteration {k:>5}: {curve[k - 1]:.2f} dB")
    print(f"best: iteration {run.best_iteration}, {max(curve):.2f} dB")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "psnr_db"])
            out.writerows((k + 1, v) for k, v in enumerate(curve))


if __name__ == "__main__":
    main()
