"""Command-line entry point.

Every command works inside one run directory (``--out``) and writes its
resolved configuration next to its outputs::

    OUT/data/                     scenes (RGF) + manifest.json
    OUT/patches/                  filtered training patches
    OUT/tm/                       stage-1 bundle, loss.csv, timing.csv, loss.png
    OUT/diff-<mode>/              stage-2 bundle, loss.csv, timing.csv, denoiser.json
    OUT/samples-<mode>/seed<k>/   sampled scenes (RGF + PNG) and stage-1 estimates
    OUT/ablation/                 three-mode comparison table
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import pipeline as P
from .diffusion import ConditionMode, load_denoiser, train_diffusion
from .errors import DiffSRError, RunLockedError
from .field import Units, read_field, write_field
from .metrics import (EvalConfig, categorical_columns, categorical_row, evaluate, metric_columns,
                      report_row, write_rows)
from .patching import filter_patches, patchify
from .render import plot_loss, plot_scores, render_png
from .substrate import load_bundle, save_bundle
from .synthdata import (ManifestError, gen_dataset, load_radar, load_scenes, read_manifest,
                        write_prediction_manifest)
from .transform import load_transform, train_tm

THREADS_ENV = "DIFFSR_THREADS"
BUNDLE = "bundle.dsrb"
RESOLVED = "config.resolved.toml"


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunLockedError(f"run directory {out} is locked by another process ({lock})") from exc
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_loss_logs(stage_dir: Path, losses, wall_ms, title):
    with open(stage_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])
    with open(stage_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_ms"])
        for i, ms in enumerate(wall_ms, 1):
            w.writerow([i, f"{ms:.3f}"])
    if losses:
        plot_loss(losses, stage_dir / "loss.png", title)


def read_loss_csv(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


class Run:
    """Resolved config plus the standard paths of one run directory."""

    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)

    @property
    def manifest(self) -> Path:
        return self.out / "data" / "manifest.json"

    @property
    def tm_bundle(self) -> Path:
        return self.out / "tm" / BUNDLE

    def diff_dir(self, mode) -> Path:
        return self.out / f"diff-{ConditionMode(mode).value}"

    def samples_dir(self, mode) -> Path:
        return self.out / f"samples-{ConditionMode(mode).value}"

    def write_resolved(self, stage_dir: Path):
        stage_dir.mkdir(parents=True, exist_ok=True)
        self.cfg.write(stage_dir / RESOLVED)

    def load_data(self, manifest=None):
        scenes = load_scenes(manifest or self.manifest)
        train, val = P.split(scenes, self.cfg)
        norm = P.fit_norm(train, self.cfg)
        return scenes, train, val, norm


# --- commands ---------------------------------------------------------------

def cmd_gen_data(run: Run) -> Path:
    cfg = run.cfg
    out = run.out / "data"
    gen_dataset(cfg.data.n_scenes, cfg.data.rows, cfg.data.cols, cfg.data_seed, P.storm_params(cfg), out_dir=out)
    run.write_resolved(out)
    return out / "manifest.json"


def cmd_patchify(run: Run, manifest=None) -> Path:
    cfg = run.cfg
    out = run.out / "patches"
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in load_scenes(manifest or run.manifest):
        for p in filter_patches(patchify(scene, cfg.patch.size, cfg.patch.stride), P.filter_policy(cfg)):
            sat = []
            for k, f in enumerate(p.satellite):
                fn = f"{p.patch_id}_sat{k}.rgf"
                write_field(f, out / fn)
                sat.append(fn)
            write_field(p.radar, out / f"{p.patch_id}_radar.rgf")
            entries.append({"id": p.patch_id, "scene": p.scene_id, "row0": p.row0, "col0": p.col0,
                            "radar": f"{p.patch_id}_radar.rgf", "satellite": sat})
    (out / "manifest.json").write_text(json.dumps({"scenes": entries}, indent=1, sort_keys=True) + "\n")
    run.write_resolved(out)
    return out / "manifest.json"


def cmd_train_tm(run: Run, manifest=None) -> Path:
    cfg = run.cfg
    _, train, _, norm = run.load_data(manifest)
    arrays = P.scenes_to_arrays(train, norm)
    result = train_tm(arrays.satellite, arrays.radar, arrays.mask, P.transform_config(cfg), cfg.transform.steps,
                      cfg.tm_seed, cfg.transform.batch_size, norm)
    out = run.out / "tm"
    run.write_resolved(out)
    save_bundle(result.bundle, out / BUNDLE)
    _write_loss_logs(out, result.losses, result.wall_ms, "stage 1 weighted loss")
    return out / BUNDLE


def _estimates(run: Run, scenes, arrays, norm, required: bool, tm_bundle=None):
    path = Path(tm_bundle) if tm_bundle else run.tm_bundle
    if not path.exists():
        if required:
            raise DiffSRError(f"stage-1 bundle not found at {path}; run 'train tm' first")
        return None, None
    bundle = load_bundle(path)
    return P.tm_estimates(load_transform(bundle), arrays.satellite, norm), bundle.bundle_id


def cmd_train_diff(run: Run, mode=None, manifest=None, tm_bundle=None, out_dir=None) -> Path:
    cfg = run.cfg
    mode = ConditionMode(mode or cfg.denoiser.mode)
    out = Path(out_dir) if out_dir else run.diff_dir(mode)
    if mode.needs_estimate:
        path = Path(tm_bundle) if tm_bundle else run.tm_bundle
        if not path.exists():
            raise DiffSRError(f"mode {mode.value!r} needs a trained stage-1 bundle, none at {path}")
    _, train, _, norm = run.load_data(manifest)
    arrays = P.scenes_to_arrays(train, norm)
    est, tm_id = _estimates(run, train, arrays, norm, mode.needs_estimate, tm_bundle)
    data, _ = P.patch_set(train, arrays, est if mode.needs_estimate else None, cfg.patch.size, cfg.patch.stride,
                          P.filter_policy(cfg))
    if len(data) == 0:
        raise DiffSRError("no training patches survive the filter policy")
    dcfg = P.denoiser_config(cfg, mode)
    result = train_diffusion(data, mode, dcfg, P.schedule(cfg), cfg.denoiser.steps, cfg.diffusion_seed,
                             cfg.denoiser.batch_size, cfg.denoiser.lr, tm_id if mode.needs_estimate else None,
                             norm=norm, ema=cfg.denoiser.ema)
    run.write_resolved(out)
    save_bundle(result.bundle, out / BUNDLE)
    (out / "denoiser.json").write_text(json.dumps(
        {**dcfg.to_dict(), "n_patches": len(data), "tm_bundle": tm_id if mode.needs_estimate else None},
        indent=1, sort_keys=True) + "\n")
    _write_loss_logs(out, result.losses, result.wall_ms, f"stage 2 ({mode.value}) noise MSE")
    return out / BUNDLE


def _select_scenes(run: Run, scenes, val, ids):
    if ids:
        by_id = {s.timestamp: s for s in scenes}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DiffSRError(f"unknown scene id(s): {', '.join(missing)}")
        return [by_id[i] for i in ids]
    return val if run.cfg.sample.scenes == "validation" and val else scenes


def cmd_sample(run: Run, mode=None, scene_ids=None, manifest=None, diff_bundle=None, out_dir=None,
               seeds=None) -> list[Path]:
    """Writes one sub-directory per sampling seed; returns their manifests."""
    cfg = run.cfg
    mode = ConditionMode(mode or cfg.denoiser.mode)
    diff_path = Path(diff_bundle) if diff_bundle else run.diff_dir(mode) / BUNDLE
    if not diff_path.exists():
        raise DiffSRError(f"stage-2 bundle not found at {diff_path}; run 'train diff --mode {mode.value}' first")
    scenes, _, val, norm = run.load_data(manifest)
    chosen = _select_scenes(run, scenes, val, scene_ids)
    arrays = P.scenes_to_arrays(chosen, norm)
    est, _ = _estimates(run, chosen, arrays, norm, mode.needs_estimate)
    if est is None:
        est = np.zeros_like(arrays.radar)
    denoiser = load_denoiser(load_bundle(diff_path))
    s = P.sampling_schedule(cfg)
    out_root = Path(out_dir) if out_dir else run.samples_dir(mode)
    run.write_resolved(out_root)
    manifests = []
    seeds = cfg.sample_seeds if seeds is None else seeds
    for k, seed in enumerate(seeds):
        out = out_root / f"seed{k}"
        preds, ests = {}, {}
        for i, scene in enumerate(chosen):
            res = P.sample_scene(scene, arrays, i, est[i], denoiser, mode, s, seed, cfg.patch.size,
                                 cfg.sample.stride, norm)
            preds[scene.timestamp] = res.sample_dbz
            ests[scene.timestamp] = res.estimate_dbz
        path = write_prediction_manifest(preds, out, "pred")
        for sid, f in preds.items():
            render_png(f, out / f"{sid}_pred.png")
        if mode.needs_estimate or run.tm_bundle.exists():
            write_prediction_manifest(ests, out / "estimate", "est")
            for sid, f in ests.items():
                render_png(f, out / "estimate" / f"{sid}_est.png")
        manifests.append(path)
    return manifests


def evaluate_manifests(pred_manifest, truth_manifest, ecfg: EvalConfig, model_id: str):
    preds = load_radar(pred_manifest)
    truth = load_radar(truth_manifest)
    missing = [sid for sid in preds if sid not in truth]
    if missing:
        raise ManifestError(f"scene id(s) missing from truth manifest: {', '.join(missing)}")
    rows, cat_rows = [], []
    for sid, pred in preds.items():
        rep = evaluate(pred, truth[sid], ecfg)
        rows.append({"scene_id": sid, "model_id": model_id, **report_row(rep, ecfg)})
        cat_rows.append({"scene_id": sid, "model_id": model_id, **categorical_row(rep, ecfg)})
    cols = metric_columns(ecfg)
    mean = {"scene_id": "MEAN", "model_id": model_id}
    mean.update({c: float(np.mean([r[c] for r in rows])) for c in cols})
    return rows + [mean], cat_rows


def cmd_evaluate(run: Run, pred_manifest, truth_manifest=None, model_id=None, out_dir=None) -> Path:
    ecfg = P.eval_config(run.cfg)
    truth_manifest = truth_manifest or run.manifest
    model_id = model_id or Path(pred_manifest).parent.name
    rows, cat_rows = evaluate_manifests(pred_manifest, truth_manifest, ecfg, model_id)
    out = Path(out_dir) if out_dir else run.out
    run.write_resolved(out)
    write_rows(out / "metrics.csv", ["scene_id", "model_id"], metric_columns(ecfg), rows)
    write_rows(out / "metrics_categorical.csv", ["scene_id", "model_id"], categorical_columns(ecfg), cat_rows)
    return out / "metrics.csv"


ABLATION_ROWS = (
    ("Diff-baseline1", ConditionMode.SATELLITE),
    ("Diff-baseline2", ConditionMode.ESTIMATE),
    ("DiffSR", ConditionMode.BOTH),
)
TABLE_COLUMNS = ["model", "satellite", "radar_estimate", "ssim", "rmse", "csi_35_pool8", "csi_50_pool8"]


def cmd_ablate(run: Run, manifest=None) -> Path:
    cfg = run.cfg
    if not (Path(manifest) if manifest else run.manifest).exists():
        raise DiffSRError("ablation needs a dataset; run 'gen-data' first")
    if not run.tm_bundle.exists():
        raise DiffSRError(f"ablation needs a stage-1 bundle at {run.tm_bundle}; run 'train tm' first")
    out = run.out / "ablation"
    run.write_resolved(out)
    ecfg = P.eval_config(cfg)
    truth = manifest or run.manifest
    table, bars = [], {}
    for name, mode in ABLATION_ROWS:
        ddir = out / f"diff-{mode.value}"
        cmd_train_diff(run, mode, manifest, out_dir=ddir)
        [pred] = cmd_sample(run, mode, manifest=manifest, diff_bundle=ddir / BUNDLE,
                            out_dir=out / f"samples-{mode.value}", seeds=cfg.sample_seeds[:1])
        rows, cat_rows = evaluate_manifests(pred, truth, ecfg, name)
        write_rows(out / f"metrics-{mode.value}.csv", ["scene_id", "model_id"], metric_columns(ecfg), rows)
        write_rows(out / f"metrics-{mode.value}_categorical.csv", ["scene_id", "model_id"],
                   categorical_columns(ecfg), cat_rows)
        mean = rows[-1]
        table.append({
            "model": name,
            "satellite": int(mode is not ConditionMode.ESTIMATE),
            "radar_estimate": int(mode.needs_estimate),
            "ssim": mean["ssim"],
            "rmse": mean["rmse"],
            "csi_35_pool8": mean["csi_35_pool8"],
            "csi_50_pool8": mean["csi_50_pool8"],
        })
        bars[name] = {c.replace("csi_", "CSI-").replace("_pool", " P"): mean[c]
                      for c in metric_columns(ecfg) if c.startswith("csi_")}
    write_rows(out / "table.csv", ["model", "satellite", "radar_estimate"], TABLE_COLUMNS[3:], table)
    lines = ["| model | satellite | radar est. | SSIM | RMSE | CSI-35 POOL8 | CSI-50 POOL8 |",
             "|---|---|---|---|---|---|---|"]
    for r in table:
        lines.append(f"| {r['model']} | {'x' if r['satellite'] else ''} | {'x' if r['radar_estimate'] else ''} | "
                     f"{r['ssim']:.3f} | {r['rmse']:.2f} | {r['csi_35_pool8']:.3f} | {r['csi_50_pool8']:.3f} |")
    (out / "table.md").write_text("\n".join(lines) + "\n")
    plot_scores(bars, out / "csi.png", "CSI by threshold and pool")
    return out / "table.csv"


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--manifest", type=Path, help="scene manifest (default OUT/data/manifest.json)")

    parser = argparse.ArgumentParser(prog="diffsr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene dataset")
    sub.add_parser("patchify", parents=[common], help="extract and filter training patches")
    tr = sub.add_parser("train", parents=[common], help="train a stage")
    tr.add_argument("stage", choices=["tm", "diff"])
    tr.add_argument("--mode", choices=[m.value for m in ConditionMode])
    tr.add_argument("--tm-bundle", type=Path)
    sm = sub.add_parser("sample", parents=[common], help="sample radar fields for scenes")
    sm.add_argument("--mode", choices=[m.value for m in ConditionMode])
    sm.add_argument("--scenes", help="comma-separated scene ids (default per config)")
    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against truth")
    ev.add_argument("--pred", type=Path, required=True, help="prediction manifest")
    ev.add_argument("--truth", type=Path, help="truth manifest (default OUT/data/manifest.json)")
    ev.add_argument("--model-id")
    sub.add_parser("ablate", parents=[common], help="compare the three condition modes")
    return parser


def _resolve_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.denoiser.mode = args.mode
    config_mod.validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg = _resolve_config(args)
        run = Run(cfg, args.out)
        with run_lock(run.out):
            if args.command == "gen-data":
                result = cmd_gen_data(run)
            elif args.command == "patchify":
                result = cmd_patchify(run, args.manifest)
            elif args.command == "train" and args.stage == "tm":
                result = cmd_train_tm(run, args.manifest)
            elif args.command == "train":
                result = cmd_train_diff(run, args.mode, args.manifest, args.tm_bundle)
            elif args.command == "sample":
                ids = [s for s in args.scenes.split(",") if s] if args.scenes else None
                result = cmd_sample(run, args.mode, ids, args.manifest)
            elif args.command == "evaluate":
                result = cmd_evaluate(run, args.pred, args.truth, args.model_id)
                print("LPIPS: n/a (needs a pretrained perceptual network)")
            else:
                result = cmd_ablate(run, args.manifest)
    except (DiffSRError, OSError, ValueError) as exc:
        print(f"diffsr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for r in result if isinstance(result, list) else [result]:
        print(r)
    return 0


if __name__ == "__main__":
    sys.exit(main())
