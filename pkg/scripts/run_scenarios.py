#!/usr/bin/env python3
"""Run the built-in scenarios one after another and print their headline numbers.

    python scripts/run_scenarios.py --out runs            # all four
    python scripts/run_scenarios.py --out runs beads lines
    python scripts/run_scenarios.py --out runs --set train.iterations=2000 beads

Each scenario lands in ``<out>/<name>`` with the same files ``gatflfm repro``
writes. Existing summaries are reused unless ``--force`` is given.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from gatflfm.cli import main as cli_main
from gatflfm.repro import SCENARIOS


def headline(summary: dict) -> list[str]:
    kind = summary["scenario"]
    if kind == "beads":
        return [f"  {m:<13} lateral {r['mean_lateral_um']:.3f} um  axial {r['mean_axial_um']:.3f} um"
                for m, r in summary["fwhm"].items()]
    if kind == "lines":
        return [f"  {m:<13} finest resolved {v} um" for m, v in summary["finest_resolved_um"].items()]
    lines = [f"  {m:<13} PSNR {r['psnr_db']:.2f} dB  frc_qe {r['frc_qe']:.4f}"
             + (f"  p5 erank {r['erank_p5']:.3f}  kernels {r['kernels']}" if "erank_p5" in r else "")
             for m, r in summary["scores"].items()]
    if "rl_best_iteration" in summary:
        lines.append(f"  RL best iteration {summary['rl_best_iteration']}")
    return lines


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenarios", nargs="*", metavar="SCENARIO", help=f"any of {', '.join(SCENARIOS)}")
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)
    unknown = sorted(set(args.scenarios) - set(SCENARIOS))
    if unknown:
        ap.error(f"unknown scenario(s): {', '.join(unknown)}")

    for name in args.scenarios or SCENARIOS:
        outdir = args.out / name
        summary_path = outdir / "summary.json"
        if args.force or not summary_path.exists():
            t0 = time.perf_counter()
            argv = ["repro", "--scenario", name, "-o", str(outdir)]
            for ov in args.overrides:
                argv += ["-s", ov]
            if cli_main(argv) != 0:
                print(f"{name}: failed", file=sys.stderr)
                return 1
            print(f"{name}: {time.perf_counter() - t0:.0f} s", file=sys.stderr)
        print(f"[{name}]")
        print("\n".join(headline(json.loads(summary_path.read_text()))))
    return 0


if __name__ == "__main__":
    sys.exit(main())
