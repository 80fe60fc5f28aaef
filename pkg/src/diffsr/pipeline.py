"""End-to-end glue: arrays from scenes, stage-1 estimates, patch sets,
per-scene sampling and evaluation. Shared by the CLI and the experiment
scripts."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .diffusion import (ConditionMode, DenoiserConfig, PatchData, assemble_condition, build_schedule,
                        sample)
from .field import Field, NormSpec, Scene, Units
from .metrics import EvalConfig
from .patching import FilterPolicy, Patch, depatchify, exceedance_count, patch_offsets
from .synthdata import StormParams
from .transform import TransformConfig, TransformModule, tm_forward


def storm_params(cfg: RunConfig) -> StormParams:
    return StormParams(**cfg.storm.__dict__)


def transform_config(cfg: RunConfig) -> TransformConfig:
    t = cfg.transform
    return TransformConfig(embed_patch=t.embed_patch, embed_dim=t.embed_dim, depth=t.depth, heads=t.heads,
                           mlp_ratio=t.mlp_ratio, w0=t.w0, w1=t.w1, lr=t.lr, img_size=cfg.data.rows)


def denoiser_config(cfg: RunConfig, mode=None) -> DenoiserConfig:
    d = cfg.denoiser
    return DenoiserConfig(base_channels=d.base_channels, depth=d.depth, time_dim=d.time_dim,
                          mode=ConditionMode(mode or d.mode).value, attention=d.attention,
                          prediction=d.prediction)


def schedule(cfg: RunConfig):
    return build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)


def sampling_schedule(cfg: RunConfig):
    s = schedule(cfg)
    return s.respace(cfg.schedule.sample_steps) if cfg.schedule.sample_steps else s


def eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(thresholds=tuple(e.thresholds), pools=tuple(e.pools), data_range=e.data_range,
                      window=e.window)


def filter_policy(cfg: RunConfig) -> FilterPolicy:
    return FilterPolicy(cfg.patch.gamma, cfg.patch.value_threshold)


def split(scenes: list[Scene], cfg: RunConfig):
    """The last ``val_scenes`` scenes are held out."""
    n_val = cfg.data.val_scenes
    return (scenes[: len(scenes) - n_val], scenes[len(scenes) - n_val :]) if n_val else (scenes, [])


def fit_norm(train: list[Scene], cfg: RunConfig) -> NormSpec:
    return NormSpec.from_scenes(train, **cfg.norm.__dict__)


@dataclass
class SceneArrays:
    satellite: np.ndarray  # (N, 4, H, W) model space
    radar: np.ndarray  # (N, 1, H, W) model space
    mask: np.ndarray  # (N, 1, H, W)


def scenes_to_arrays(scenes: list[Scene], norm: NormSpec) -> SceneArrays:
    sat = np.stack([norm.sat_to_model(s.satellite_stack().astype(np.float64)) for s in scenes])
    radar = np.stack([norm.refl_to_model(s.radar.values.astype(np.float64))[None] for s in scenes])
    mask = np.stack([s.radar.mask[None] for s in scenes])
    sat = np.where(mask, sat, 0.0)
    radar = np.where(mask, radar, norm.model_lo)
    return SceneArrays(sat.astype(np.float32), radar.astype(np.float32), mask)


@torch.no_grad()
def tm_estimates(model: TransformModule, satellite: np.ndarray, norm: NormSpec, batch: int = 16) -> np.ndarray:
    """Image-level stage-1 estimates in model space, (N, 1, H, W)."""
    out = []
    for i in range(0, len(satellite), batch):
        x = torch.from_numpy(np.ascontiguousarray(satellite[i : i + batch]))
        out.append(tm_forward(x, model, norm).numpy())
    return np.concatenate(out)


@dataclass
class PatchIndex:
    scene: int
    row0: int
    col0: int


def patch_set(scenes: list[Scene], arrays: SceneArrays, estimates: np.ndarray | None, size: int, stride: int,
              policy: FilterPolicy | None) -> tuple[PatchData, list[PatchIndex]]:
    """Crop co-located patches from scene arrays; ``policy`` filters on dBZ radar."""
    sats, ests, radars, masks, index = [], [], [], [], []
    for i, s in enumerate(scenes):
        for r, c in patch_offsets(*s.shape, size, stride):
            if policy is not None:
                crop = s.radar.crop(r, c, size)
                if exceedance_count(crop, policy.value_threshold) < policy.gamma:
                    continue
            sl = (slice(None), slice(r, r + size), slice(c, c + size))
            sats.append(arrays.satellite[i][sl])
            radars.append(arrays.radar[i][sl])
            masks.append(arrays.mask[i][sl])
            if estimates is not None:
                ests.append(estimates[i][sl])
            index.append(PatchIndex(i, r, c))
    data = PatchData(
        satellite=np.stack(sats) if sats else np.zeros((0, 4, size, size), np.float32),
        radar=np.stack(radars) if radars else np.zeros((0, 1, size, size), np.float32),
        estimate=(np.stack(ests) if ests else None) if estimates is not None else None,
        mask=np.stack(masks) if masks else None,
    )
    return data, index


def scene_seed(seed: int, scene_id: str) -> int:
    return seed * 2**32 + zlib.crc32(scene_id.encode())


def sample_patches(model, mode, satellite: np.ndarray, estimate: np.ndarray | None, s, seed: int,
                   norm: NormSpec) -> np.ndarray:
    mode = ConditionMode(mode)
    sat = torch.from_numpy(np.ascontiguousarray(satellite, dtype=np.float32))
    est = None if estimate is None else torch.from_numpy(np.ascontiguousarray(estimate, dtype=np.float32))
    cond = assemble_condition(mode, sat if mode is not ConditionMode.ESTIMATE else None,
                              est if mode.needs_estimate else None)
    return sample(cond, model, s, seed, norm.model_lo, norm.model_hi).numpy()


@dataclass
class SceneSample:
    scene_id: str
    sample_dbz: Field
    estimate_dbz: Field
    patches: list  # [(row0, col0, sample model-space (h, w), estimate model-space (h, w))]


def sample_scene(scene: Scene, arrays: SceneArrays, index: int, estimate: np.ndarray, denoiser, mode, s,
                 seed: int, size: int, stride: int, norm: NormSpec) -> SceneSample:
    """Patchify, sample every patch in one batch, reassemble, denormalize."""
    offsets = patch_offsets(*scene.shape, size, stride)
    sat = np.stack([arrays.satellite[index][:, r : r + size, c : c + size] for r, c in offsets])
    est = np.stack([estimate[:, r : r + size, c : c + size] for r, c in offsets])
    out = sample_patches(denoiser, mode, sat, est, s, scene_seed(seed, scene.timestamp), norm)
    pieces = [
        Patch(scene.timestamp, r, c, size, (), Field(norm.model_to_refl(out[k, 0].astype(np.float64)), Units.DBZ,
                                                    scene.radar.mask[r : r + size, c : c + size]))
        for k, (r, c) in enumerate(offsets)
    ]
    rows, cols = scene.shape
    sample_dbz = depatchify(pieces, rows, cols, Units.DBZ)
    est_dbz = Field(norm.model_to_refl(estimate[0].astype(np.float64)), Units.DBZ, scene.radar.mask)
    per_patch = [(r, c, out[k, 0], est[k, 0]) for k, (r, c) in enumerate(offsets)]
    return SceneSample(scene.timestamp, sample_dbz, est_dbz, per_patch)
