#!/usr/bin/env python3
"""Desk-scale end-to-end run: data, stage 1, stage 2 (Both mode), sampling.

    python3 scripts/run_desk_experiment.py --config configs/desk.toml --out runs/desk

Prints the stage-1 / stage-2 checks and writes them to OUT/assessment.json.
With --assess-only an existing run directory is re-scored without training.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from diffsr import config
from diffsr.experiment import assess_desk, desk_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, default=Path("configs/desk.toml"))
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--assess-only", action="store_true")
    args = ap.parse_args(argv)

    cfg = config.load(args.config)
    cpu = None if args.assess_only else desk_run(cfg, args.out)
    result = assess_desk(cfg, args.out)
    result.cpu_seconds = cpu
    print(result.summary())
    print(f"seeds passing (ratio <= 1.5 and closer exceedance): {result.seeds_passing()} of {len(result.seeds)}")
    payload = dataclasses.asdict(result)
    payload["seeds"] = [{**dataclasses.asdict(s), "ratio": s.ratio, "closer_exceedance": s.closer_exceedance}
                        for s in result.seeds]
    (args.out / "assessment.json").write_text(json.dumps(payload, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
