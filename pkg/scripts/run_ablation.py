#!/usr/bin/env python3
"""Three-way condition ablation on top of a finished desk run.

    python3 scripts/run_desk_experiment.py --out runs/desk
    python3 scripts/run_ablation.py --out runs/desk

Trains and samples SatelliteOnly, EstimateOnly and Both denoisers on the same
data and seeds, then prints OUT/ablation/table.md.
"""

import argparse
import sys
from pathlib import Path

from diffsr import config
from diffsr.experiment import run_ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, default=Path("configs/desk.toml"))
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args(argv)
    cpu = run_ablation(config.load(args.config), args.out)
    print((args.out / "ablation" / "table.md").read_text())
    print(f"CPU time {cpu / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
