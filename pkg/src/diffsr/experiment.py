"""Desk-scale experiment driver and the checks run against its artifacts.

``desk_run`` executes gen-data, train tm, train diff (Both) and sample inside
one run directory; ``assess_desk`` re-reads only the files written there, so a
finished run can be assessed again without retraining.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cli
from . import pipeline as P
from .config import RunConfig
from .diffusion import ConditionMode
from .patching import patch_offsets
from .synthdata import load_radar, load_scenes


@dataclass
class SeedCheck:
    seed: int
    median_rmse_sample: float
    median_rmse_estimate: float
    exceed_sample: float
    exceed_estimate: float
    exceed_truth: float
    n_patches: int

    @property
    def ratio(self) -> float:
        return self.median_rmse_sample / self.median_rmse_estimate

    @property
    def closer_exceedance(self) -> bool:
        return abs(self.exceed_sample - self.exceed_truth) < abs(self.exceed_estimate - self.exceed_truth)

    def passes(self, max_ratio: float = 1.5) -> bool:
        return self.ratio <= max_ratio and self.closer_exceedance


@dataclass
class DeskAssessment:
    tm_rmse: float
    const_rmse: float
    loss_leading: float
    loss_trailing: float
    seeds: list = field(default_factory=list)
    cpu_seconds: float | None = None

    @property
    def tm_beats_constant(self) -> bool:
        return self.tm_rmse < self.const_rmse

    @property
    def loss_decreased(self) -> bool:
        return self.loss_trailing < self.loss_leading

    def seeds_passing(self, max_ratio: float = 1.5) -> int:
        return sum(s.passes(max_ratio) for s in self.seeds)

    def summary(self) -> str:
        lines = [
            f"stage-1 validation RMSE {self.tm_rmse:.3f} dBZ vs constant-mean {self.const_rmse:.3f} dBZ",
            f"stage-2 loss leading-500 {self.loss_leading:.5f}, trailing-500 {self.loss_trailing:.5f}",
        ]
        for s in self.seeds:
            lines.append(
                f"seed {s.seed}: median RMSE sample {s.median_rmse_sample:.3f} / estimate "
                f"{s.median_rmse_estimate:.3f} = {s.ratio:.3f} over {s.n_patches} patches; "
                f">40 dBZ frequency sample {s.exceed_sample:.4f}, estimate {s.exceed_estimate:.4f}, "
                f"truth {s.exceed_truth:.4f}"
            )
        if self.cpu_seconds is not None:
            lines.append(f"CPU time {self.cpu_seconds / 60:.1f} min")
        return "\n".join(lines)


def desk_run(cfg: RunConfig, out) -> float:
    """Run the Both-mode pipeline into ``out``; returns CPU seconds used."""
    run = cli.Run(cfg, out)
    t0 = time.process_time()
    with cli.run_lock(run.out):
        cli.cmd_gen_data(run)
        cli.cmd_train_tm(run)
        cli.cmd_train_diff(run, ConditionMode.BOTH)
        cli.cmd_sample(run, ConditionMode.BOTH)
    return time.process_time() - t0


def _patch_rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def assess_desk(cfg: RunConfig, out, mode=ConditionMode.BOTH, window: int = 500) -> DeskAssessment:
    run = cli.Run(cfg, out)
    scenes = load_scenes(run.manifest)
    train, val = P.split(scenes, cfg)
    const = float(np.mean([s.radar.values[s.radar.mask].astype(np.float64).mean() for s in train]))
    truth = {s.timestamp: s.radar for s in val}

    losses = cli.read_loss_csv(run.diff_dir(mode) / "loss.csv")
    thr = cfg.eval.exceedance_dbz
    size, stride = cfg.patch.size, cfg.sample.stride
    seeds, tm_rmse, const_rmse = [], None, None
    for k, seed in enumerate(cfg.sample_seeds):
        seed_dir = run.samples_dir(mode) / f"seed{k}"
        preds = load_radar(seed_dir / "manifest.json")
        ests = load_radar(seed_dir / "estimate" / "manifest.json")
        rs, re, fs, fe, ft = [], [], [], [], []
        sq_est, sq_const, n_px = 0.0, 0.0, 0
        for sid, t in truth.items():
            tv = t.values.astype(np.float64)
            pv = preds[sid].values.astype(np.float64)
            ev = ests[sid].values.astype(np.float64)
            sq_est += float(np.sum((ev - tv)[t.mask] ** 2))
            sq_const += float(np.sum((const - tv)[t.mask] ** 2))
            n_px += int(t.mask.sum())
            for r, c in patch_offsets(*tv.shape, size, stride):
                sl = (slice(r, r + size), slice(c, c + size))
                rs.append(_patch_rmse(pv[sl], tv[sl]))
                re.append(_patch_rmse(ev[sl], tv[sl]))
                fs.append(np.mean(pv[sl] > thr))
                fe.append(np.mean(ev[sl] > thr))
                ft.append(np.mean(tv[sl] > thr))
        if tm_rmse is None:
            tm_rmse, const_rmse = np.sqrt(sq_est / n_px), np.sqrt(sq_const / n_px)
        seeds.append(SeedCheck(seed, float(np.median(rs)), float(np.median(re)), float(np.mean(fs)),
                               float(np.mean(fe)), float(np.mean(ft)), len(rs)))
    return DeskAssessment(float(tm_rmse), float(const_rmse), float(np.mean(losses[:window])),
                          float(np.mean(losses[-window:])), seeds)


def run_ablation(cfg: RunConfig, out) -> float:
    """``ablate`` inside an existing desk run; returns CPU seconds used."""
    run = cli.Run(cfg, out)
    t0 = time.process_time()
    with cli.run_lock(run.out):
        cli.cmd_ablate(run)
    return time.process_time() - t0


def artifact_digests(out) -> dict:
    """SHA-256 of every RGF and loss CSV under ``out``, keyed by relative path."""
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.suffix == ".rgf" or p.name == "loss.csv")
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}
