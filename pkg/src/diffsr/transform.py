"""Stage 1: ViT regression from satellite channels to a coarse radar estimate."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DivergenceError, NonFiniteError, ShapeError
from .field import NormSpec
from .substrate import Adam, ModelBundle, SelfAttention, philox, seeded


@dataclass
class TransformConfig:
    embed_patch: int = 16
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    w0: float = 5.0
    w1: float = 4.0
    lr: float = 1e-4
    in_channels: int = 4
    img_size: int = 64  # reference grid for the learned positional embedding

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.img_size % self.embed_patch:
            raise ValueError("embed_patch must divide img_size")
        if self.w1 < 0:
            raise ValueError("w1 must be >= 0")


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformModule(nn.Module):
    """Patch embedding, learned positional grid, transformer blocks, pixel head."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.embed_patch, cfg.embed_dim
        grid = cfg.img_size // p
        self.embed = nn.Conv2d(cfg.in_channels, d, kernel_size=p, stride=p)
        self.pos = nn.Parameter(torch.randn(1, d, grid, grid) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, p * p)

    def positional(self, gh, gw):
        if self.pos.shape[-2:] == (gh, gw):
            return self.pos
        return F.interpolate(self.pos, size=(gh, gw), mode="bilinear", align_corners=False)

    def raw(self, x):
        """Unclamped output; the training loss sees this."""
        b, _, h, w = x.shape
        p = self.cfg.embed_patch
        if h % p or w % p:
            raise ShapeError(f"input {h}x{w} not divisible by token patch {p}")
        gh, gw = h // p, w // p
        tok = self.embed(x) + self.positional(gh, gw)
        tok = tok.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tok = blk(tok)
        pix = self.head(self.norm(tok))  # (B, gh*gw, p*p)
        pix = pix.reshape(b, gh, gw, p, p).permute(0, 1, 3, 2, 4)
        return pix.reshape(b, 1, h, w)

    def forward(self, x, lo=-1.0, hi=1.0):
        return self.raw(x).clamp(lo, hi)


def tm_forward(satellite: torch.Tensor, model: TransformModule, norm: NormSpec = NormSpec()) -> torch.Tensor:
    if satellite.ndim != 4 or satellite.shape[1] != model.cfg.in_channels:
        raise ShapeError(f"expected (B, {model.cfg.in_channels}, H, W), got {tuple(satellite.shape)}")
    out = model(satellite, norm.model_lo, norm.model_hi)
    if not torch.all(torch.isfinite(out)):
        raise NonFiniteError("transform module produced non-finite output")
    return out


def weighted_loss(pred, target, w0: float, w1: float, mask=None):
    """Mean of ``exp(w0 * t**w1) * (pred - t)**2`` over valid pixels.

    ``target`` is expected in [0, 1] weight space.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask is None:
        mask = torch.ones_like(target, dtype=torch.bool)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("weighted_loss: no valid pixels")
    weight = torch.exp(w0 * target.clamp(min=0) ** w1)
    if not torch.all(torch.isfinite(weight[mask])):
        raise NonFiniteError("weighted_loss: non-finite pixel weight")
    return (weight * (pred - target) ** 2)[mask].sum() / m


def to_weight_space(v, norm: NormSpec):
    return (v - norm.model_lo) / (norm.model_hi - norm.model_lo)


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: list  # float per step
    wall_ms: list

    def loss_rows(self):
        return [(i + 1, loss) for i, loss in enumerate(self.losses)]


def build_transform(cfg: TransformConfig, seed: int) -> TransformModule:
    with seeded(seed):
        return TransformModule(cfg)


def train_tm(sat: np.ndarray, radar: np.ndarray, mask: np.ndarray | None, cfg: TransformConfig,
             steps: int, seed: int, batch_size: int = 8, norm: NormSpec = NormSpec()) -> TrainResult:
    """Fit the transform module on model-space arrays.

    ``sat`` is (N, 4, H, W), ``radar`` (N, 1, H, W), both already normalized.
    Minibatch indices are drawn from a Philox stream seeded with ``seed``.
    """
    if len(sat) == 0:
        raise ValueError("train_tm: empty dataset")
    torch.use_deterministic_algorithms(True)
    model = build_transform(cfg, seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = philox(seed)
    x_all = torch.from_numpy(np.ascontiguousarray(sat, dtype=np.float32))
    y_all = to_weight_space(torch.from_numpy(np.ascontiguousarray(radar, dtype=np.float32)), norm)
    m_all = None if mask is None else torch.from_numpy(np.ascontiguousarray(mask, dtype=bool))
    losses, wall = [], []
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        idx = torch.from_numpy(rng.integers(0, len(sat), size=batch_size))
        pred = to_weight_space(model.raw(x_all[idx]), norm)
        loss = weighted_loss(pred, y_all[idx], cfg.w0, cfg.w1, None if m_all is None else m_all[idx])
        if not torch.isfinite(loss):
            raise DivergenceError(f"transform training diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        wall.append((time.perf_counter() - t0) * 1e3)
    meta = {"step": steps, "seed": seed, "batch_size": batch_size}
    bundle = ModelBundle.from_module("transform", asdict(cfg), model, norm, meta)
    return TrainResult(bundle, losses, wall)


def load_transform(bundle: ModelBundle) -> TransformModule:
    if bundle.kind != "transform":
        raise ValueError(f"expected a transform bundle, got {bundle.kind!r}")
    model = TransformModule(TransformConfig(**bundle.config))
    bundle.load_into(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
