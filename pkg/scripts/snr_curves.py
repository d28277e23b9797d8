"""SNR of normal samples against distribution scale, for every catalog format.

Writes one CSV (format, log2_sigma, sigma, snr, snr_db) and prints each
format's plateau: the sigma range within 3 dB of its best SNR.

    python3 scripts/snr_curves.py --out results/snr.csv
"""

from __future__ import annotations

import argparse
import csv
import math
from pathlib import Path

import numpy as np

from unitscale import floatsim as fs


def plateau(points, db: float = 3.0):
    best = max(p.snr for p in points)
    inside = [p.sigma for p in points if fs.to_db(best / p.snr) <= db]
    return min(inside), max(inside), best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lo", type=float, default=-40.0, help="log2 of the smallest sigma")
    ap.add_argument("--hi", type=float, default=40.0, help="log2 of the largest sigma")
    ap.add_argument("--points", type=int, default=161)
    ap.add_argument("--samples", type=int, default=10**5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/snr_curves.csv")
    args = ap.parse_args(argv)

    grid = fs.log2_grid(args.lo, args.hi, args.points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format", "log2_sigma", "sigma", "snr", "snr_db"])
        for fmt in fs.format_catalog():
            pts = fs.snr_curve(fmt, grid, args.samples, args.seed)
            for p in pts:
                db = fs.to_db(p.snr) if math.isfinite(p.snr) and p.snr > 0 else float("nan")
                w.writerow([fmt.name, f"{np.log2(p.sigma):.3f}", repr(p.sigma), repr(p.snr), f"{db:.3f}"])
            lo, hi, best = plateau(pts)
            print(f"{fmt.name:12s} plateau 2^{np.log2(lo):6.1f} .. 2^{np.log2(hi):6.1f}  peak {fs.to_db(best):6.1f} dB")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
