"""FP16 parity on the synthetic task: unit-scaled vs 0.02-init baseline, with and without loss scaling.

Runs the five parity configurations and writes their loss curves plus a
summary table. Each run takes under a minute on one CPU core.

    python3 scripts/fp16_parity.py --out results/parity
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from unitscale import train as T


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/parity")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for name, cfg in T.parity_configs(args.steps, args.seed).items():
        t0 = time.perf_counter()
        _, res = T.run(cfg)
        (out / f"{name}_losses.csv").write_text(res.losses_csv())
        rows[name] = {
            "final_loss": res.final_loss(),
            "skipped": res.skipped,
            "gradw_zero_fraction_step0": res.zero_fraction("gradw:", step=0),
            "seconds": round(time.perf_counter() - t0, 1),
        }
        print(f"{name:18s} " + "  ".join(f"{k} {v:.4g}" for k, v in rows[name].items()))

    ref = {"unit_fp16": "unit_fp32", "base_fp16": "base_fp32", "base_fp16_ls2048": "base_fp32"}
    for run, base in ref.items():
        rows[run]["vs_fp32"] = rows[run]["final_loss"] / rows[base]["final_loss"] - 1
        print(f"{run:18s} vs {base}: {100 * rows[run]['vs_fp32']:+.1f}%")
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
