"""Stage 2: conditional DDPM with an epsilon-predicting encoder-decoder."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConditionError, DivergenceError, NonFiniteError, ShapeError
from .substrate import Adam, ModelBundle, SelfAttention, UpsampleConv, philox, seeded, time_embed_torch


# --- schedule ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are 0-indexed: ``beta[t - 1]`` is the variance of step ``t``.

    ``timesteps[t - 1]`` is the index the denoiser sees for step ``t``; it
    differs from ``t`` only for a respaced sampling schedule.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta, timesteps=None, check: bool = True) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if check:
            if not np.all((beta > 0) & (beta < 1)):
                raise ValueError("every beta must lie in (0, 1)")
            if len(alpha_bar) > 1 and not np.all(np.diff(alpha_bar) < 0):
                raise ValueError("alpha_bar must be strictly decreasing")
        ts = np.arange(1, len(beta) + 1) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
        return cls(beta, alpha, alpha_bar, np.sqrt(beta), ts)

    def respace(self, n: int) -> "NoiseSchedule":
        """Plain subsequence stepping over ``n`` evenly spaced original steps."""
        if not 1 <= n <= self.T:
            raise ValueError(f"cannot respace {self.T} steps to {n}")
        ts = np.unique(np.round(np.linspace(1, self.T, n)).astype(np.int64))
        ab = self.alpha_bar[ts - 1]
        prev = np.concatenate([[1.0], ab[:-1]])
        return NoiseSchedule.from_betas(1.0 - ab / prev, timesteps=self.timesteps[ts - 1])

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, T))


def _per_sample(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule entries for scalar or per-sample ``t`` and broadcast."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        v = torch.as_tensor(values[t.numpy() - 1], dtype=like.dtype)
        return v.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(values[int(t) - 1], dtype=like.dtype)


def _check_t(s: NoiseSchedule, t):
    ts = t.reshape(-1).tolist() if isinstance(t, torch.Tensor) else [int(t)]
    for v in ts:
        s._check_t(v)


def forward_sample(y0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form corruption ``sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps``."""
    if eps.shape != y0.shape:
        raise ShapeError("eps must match y0 in shape")
    _check_t(s, t)
    ab = _per_sample(s.alpha_bar, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1 - ab) * eps


def reverse_step(y_t: torch.Tensor, t: int, eps_pred: torch.Tensor, z: torch.Tensor | None,
                 s: NoiseSchedule) -> torch.Tensor:
    """One ancestral step; the noise term is dropped at ``t == 1``."""
    s._check_t(t)
    a, ab, sig = s.alpha[t - 1], s.alpha_bar[t - 1], s.sigma[t - 1]
    coef = (1 - a) / math.sqrt(1 - ab) if a < 1 else 0.0
    mean = (y_t - coef * eps_pred) / math.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + sig * z


# --- conditioning -----------------------------------------------------------

class ConditionMode(str, enum.Enum):
    SATELLITE = "satellite"  # Diff-baseline1
    ESTIMATE = "estimate"  # Diff-baseline2
    BOTH = "both"

    @property
    def channels(self) -> int:
        return {"satellite": 4, "estimate": 1, "both": 5}[self.value]

    @property
    def needs_estimate(self) -> bool:
        return self is not ConditionMode.SATELLITE


def assemble_condition(mode, satellite=None, estimate=None) -> torch.Tensor:
    """Concatenate channels in the fixed order C07, C09, C13, GLM, estimate."""
    mode = ConditionMode(mode)
    parts = []
    if mode is not ConditionMode.ESTIMATE:
        if satellite is None:
            raise ConditionError(f"mode {mode.value!r} requires the satellite stack")
        parts.append(satellite)
    if mode.needs_estimate:
        if estimate is None:
            raise ConditionError(f"mode {mode.value!r} requires the stage-1 estimate")
        parts.append(estimate)
    if len(parts) == 2 and parts[0].shape[-2:] != parts[1].shape[-2:]:
        raise ShapeError("satellite and estimate patches differ in shape")
    return torch.cat(parts, dim=1)


# --- denoiser ---------------------------------------------------------------

@dataclass
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 3
    time_dim: int = 128
    mode: str = "both"
    attention: bool = True
    prediction: str = "eps"  # what the UNet emits: "eps" directly, or "v" mapped to eps

    def __post_init__(self):
        self.mode = ConditionMode(self.mode).value
        if self.prediction not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def condition_channels(self) -> int:
        return ConditionMode(self.mode).channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["condition_channels"] = self.condition_channels
        return d


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    def __init__(self, ch, heads=4):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = SelfAttention(ch, heads if ch % heads == 0 else 1)

    def forward(self, x):
        b, c, h, w = x.shape
        tok = self.norm(x).flatten(2).transpose(1, 2)
        return x + self.attn(tok).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """UNet over concat(y_t, condition); the condition is also re-injected,
    average-pooled, at every encoder resolution.

    The return value is always an eps prediction. With ``prediction="v"`` the
    UNet output is read as ``v = sqrt(ab_t) eps - sqrt(1 - ab_t) y0`` and
    converted with the exact identity ``eps = sqrt(1 - ab_t) y_t + sqrt(ab_t) v``,
    which needs the training schedule's ``alpha_bar``.
    """

    def __init__(self, cfg: DenoiserConfig, alpha_bar=None):
        super().__init__()
        self.cfg = cfg
        if cfg.prediction == "v":
            if alpha_bar is None:
                raise ValueError("v prediction needs the training schedule's alpha_bar")
            self.register_buffer("alpha_bar", torch.as_tensor(np.asarray(alpha_bar, dtype=np.float64)),
                                 persistent=False)
        cc, tdim = cfg.condition_channels, cfg.time_dim
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.stem = nn.Conv2d(1 + cc, chans[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = chans[0]
        for i, ch in enumerate(chans):
            self.enc.append(ResBlock(cin + cc, ch, tdim))
            if i < cfg.depth - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            cin = ch
        self.mid = ResBlock(chans[-1], chans[-1], tdim)
        self.mid_attn = AttnBlock(chans[-1]) if cfg.attention else nn.Identity()
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.dec.append(ResBlock(cin + chans[i], chans[i], tdim))
            cin = chans[i]
            if i > 0:
                self.up.append(UpsampleConv(chans[i], chans[i - 1]))
                cin = chans[i - 1]
        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out = nn.Conv2d(chans[0], 1, 3, padding=1)

    def forward(self, y_t, condition, t):
        cfg = self.cfg
        if y_t.shape[1] != 1 or condition.shape[1] != cfg.condition_channels:
            raise ShapeError(
                f"expected y_t with 1 channel and condition with {cfg.condition_channels}, "
                f"got {y_t.shape[1]} and {condition.shape[1]}"
            )
        if y_t.shape[-2:] != condition.shape[-2:]:
            raise ShapeError("y_t and condition differ spatially")
        h, w = y_t.shape[-2:]
        if h % 2 ** (cfg.depth - 1) or w % 2 ** (cfg.depth - 1):
            raise ShapeError(f"{h}x{w} not divisible by {2 ** (cfg.depth - 1)}")
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([t])
        t = t.reshape(-1).expand(y_t.shape[0]) if t.numel() == 1 else t
        temb = self.time_mlp(time_embed_torch(t, cfg.time_dim).to(y_t.dtype))

        x = self.stem(torch.cat([y_t, condition], dim=1))
        cond = condition
        skips = []
        for i, block in enumerate(self.enc):
            x = block(torch.cat([x, cond], dim=1), temb)
            skips.append(x)
            if i < len(self.down):
                x = self.down[i](x)
                cond = F.avg_pool2d(cond, 2)
        x = self.mid_attn(self.mid(x, temb))
        for j, block in enumerate(self.dec):
            x = block(torch.cat([x, skips.pop()], dim=1), temb)
            if j < len(self.up):
                x = self.up[j](x)
        out = self.out(F.silu(self.out_norm(x)))
        if cfg.prediction == "eps":
            return out
        if int(t.max()) > len(self.alpha_bar) or int(t.min()) < 1:
            raise ValueError(f"timestep outside [1, {len(self.alpha_bar)}]")
        ab = self.alpha_bar[t.long() - 1].to(y_t.dtype).reshape(-1, 1, 1, 1)
        return torch.sqrt(1 - ab) * y_t + torch.sqrt(ab) * out


def denoiser_forward(y_t, condition, t, model: Denoiser):
    return model(y_t, condition, t)


def build_denoiser(cfg: DenoiserConfig, seed: int, s: NoiseSchedule | None = None) -> Denoiser:
    with seeded(seed):
        return Denoiser(cfg, None if s is None else s.alpha_bar)


def load_denoiser(bundle: ModelBundle) -> Denoiser:
    if bundle.kind != "denoiser":
        raise ValueError(f"expected a denoiser bundle, got {bundle.kind!r}")
    cfg = {k: v for k, v in bundle.config.items() if k != "condition_channels"}
    cfg = DenoiserConfig(**cfg)
    model = Denoiser(cfg, bundle.meta.get("alpha_bar"))
    bundle.load_into(model)
    model.eval()
    return model


# --- training and sampling --------------------------------------------------

def diffusion_loss_step(y0, condition, t, eps, model, s: NoiseSchedule, mask=None):
    """MSE between the injected noise and the model's prediction of it."""
    y_t = forward_sample(y0, t, eps, s)
    t_arr = t.numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    pred = model(y_t, condition, torch.as_tensor(s.timesteps[t_arr.reshape(-1) - 1]))
    if mask is None:
        loss = ((pred - eps) ** 2).mean()
    else:
        loss = ((pred - eps) ** 2)[mask].mean()
    if not torch.isfinite(loss):
        raise NonFiniteError("diffusion loss is not finite")
    return loss


@torch.no_grad()
def sample(condition: torch.Tensor, model, s: NoiseSchedule, seed: int, lo=-1.0, hi=1.0) -> torch.Tensor:
    """Ancestral sampling from pure noise; returns (B, 1, H, W) clamped to [lo, hi].

    All randomness (the initial noise and each step's z) comes from a Philox
    stream seeded with ``seed``, drawn in a fixed order.
    """
    cc = getattr(getattr(model, "cfg", None), "condition_channels", condition.shape[1])
    if condition.shape[1] != cc:
        raise ShapeError(f"model expects {cc} condition channels, got {condition.shape[1]}")
    rng = philox(seed)
    shape = (condition.shape[0], 1, *condition.shape[-2:])
    y = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))
    b = condition.shape[0]
    for t in range(s.T, 0, -1):
        eps_pred = model(y, condition, torch.full((b,), int(s.timesteps[t - 1])))
        z = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32)) if t > 1 else None
        y = reverse_step(y, t, eps_pred, z, s)
        if not torch.all(torch.isfinite(y)):
            raise NonFiniteError(f"sampling produced non-finite values at t={t}", step=t)
    return y.clamp(lo, hi)


@dataclass
class PatchData:
    """Model-space training patches: satellite (N,4,h,w), estimate (N,1,h,w) or None, radar (N,1,h,w)."""

    satellite: np.ndarray
    radar: np.ndarray
    estimate: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __len__(self):
        return len(self.radar)


@dataclass
class DiffusionTrainResult:
    bundle: ModelBundle
    losses: list
    wall_ms: list


def train_diffusion(data: PatchData, mode, cfg: DenoiserConfig, s: NoiseSchedule, steps: int, seed: int,
                    batch_size: int = 8, lr: float = 1e-4, tm_bundle_id: str | None = None,
                    norm=None, ema: float = 0.0) -> DiffusionTrainResult:
    """Fit the denoiser. Stage-1 estimates must be precomputed with the frozen
    transform bundle (``data.estimate``) whenever the mode uses them.

    With ``ema > 0`` the bundle holds an exponential moving average of the
    weights (decay ``ema``) instead of the last iterate.
    """
    if not 0.0 <= ema < 1.0:
        raise ValueError(f"ema decay must lie in [0, 1), got {ema}")
    mode = ConditionMode(mode)
    if ConditionMode(cfg.mode) is not mode:
        raise ConditionError(f"denoiser config is for mode {cfg.mode!r}, training requested {mode.value!r}")
    if mode.needs_estimate and data.estimate is None:
        raise ConditionError(f"mode {mode.value!r} requires a frozen transform bundle for the estimate")
    if len(data) == 0:
        raise ValueError("train_diffusion: empty dataset")
    torch.use_deterministic_algorithms(True)
    model = build_denoiser(cfg, seed, s)
    opt = Adam(model.parameters(), lr=lr)
    shadow = [p.detach().clone() for p in model.parameters()] if ema else None
    rng = philox(seed)
    sat = torch.from_numpy(np.ascontiguousarray(data.satellite, dtype=np.float32))
    est = None if data.estimate is None else torch.from_numpy(np.ascontiguousarray(data.estimate, dtype=np.float32))
    y0_all = torch.from_numpy(np.ascontiguousarray(data.radar, dtype=np.float32))
    mask = None if data.mask is None else torch.from_numpy(np.ascontiguousarray(data.mask, dtype=bool))
    losses, wall = [], []
    shape = (batch_size, *y0_all.shape[1:])
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(data), size=batch_size)
        t = torch.from_numpy(rng.integers(1, s.T + 1, size=batch_size))
        eps = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))
        idx_t = torch.from_numpy(idx)
        cond = assemble_condition(mode, sat[idx_t], None if est is None else est[idx_t])
        try:
            loss = diffusion_loss_step(y0_all[idx_t], cond, t, eps, model, s,
                                       None if mask is None else mask[idx_t])
        except NonFiniteError as exc:
            raise DivergenceError(f"diffusion training diverged at step {step}", step=step) from exc
        opt.zero_grad()
        loss.backward()
        opt.step()
        if shadow is not None:
            with torch.no_grad():
                for avg, p in zip(shadow, model.parameters()):
                    avg.lerp_(p, 1.0 - ema)
        losses.append(loss.item())
        wall.append((time.perf_counter() - t0) * 1e3)
    if shadow is not None:
        with torch.no_grad():
            for avg, p in zip(shadow, model.parameters()):
                p.copy_(avg)
    meta = {"step": steps, "seed": seed, "batch_size": batch_size, "lr": lr, "ema": ema, "T": s.T,
            "beta_min": float(s.beta[0]), "beta_max": float(s.beta[-1]), "tm_bundle": tm_bundle_id}
    if cfg.prediction == "v":
        meta["alpha_bar"] = s.alpha_bar.tolist()
    kwargs = {} if norm is None else {"norm": norm}
    bundle = ModelBundle.from_module("denoiser", cfg.to_dict(), model, meta=meta, **kwargs)
    return DiffusionTrainResult(bundle, losses, wall)
