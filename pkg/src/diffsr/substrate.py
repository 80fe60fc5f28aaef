"""Neural-network plumbing shared by both stages.

torch provides the layers and reverse-mode gradients. This module adds the
pieces the pipeline pins down itself: the sinusoidal time embedding, a
functional Adam update, a finite-difference gradient checker, and the
ModelBundle on-disk format.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import FormatError, NonFiniteError, ShapeError
from .field import NormSpec

BUNDLE_VERSION = 1


# --- time embedding ---------------------------------------------------------

def time_embed(t: int, dim: int, T: int | None = None) -> np.ndarray:
    """Interleaved ``(sin, cos)`` pairs at frequencies ``10000^(-2k/dim)``."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    if t < 0 or (T is not None and t > T):
        raise ValueError(f"timestep {t} outside [0, {T}]")
    k = np.arange(dim // 2, dtype=np.float64)
    angle = t / 10000.0 ** (2 * k / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def time_embed_torch(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Batched ``time_embed``; ``t`` has shape (B,). Returns (B, dim)."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freq = 10000.0 ** (-2 * k / dim)
    angle = t.to(torch.float64)[:, None] * freq[None, :]
    out = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).reshape(len(t), dim)
    return out.to(torch.get_default_dtype())


# --- layers -----------------------------------------------------------------

class SelfAttention(nn.Module):
    """Multi-head self-attention over a token sequence (B, N, D)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class UpsampleConv(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, weights) -> "AdamState":
        return cls(0, [w * 0 for w in weights], [w * 0 for w in weights])


def adam_step(weights, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Works on numpy arrays or torch tensors.

    Returns ``(new_weights, new_state)``; inputs are not modified.
    """
    weights, grads = list(weights), list(grads)
    if len(weights) != len(grads):
        raise ShapeError(f"{len(weights)} weight arrays but {len(grads)} gradients")
    if not state.m:
        state = AdamState.zeros_like(weights)
    for w, g, m in zip(weights, grads, state.m):
        if tuple(w.shape) != tuple(g.shape) or tuple(w.shape) != tuple(m.shape):
            raise ShapeError(f"shape mismatch: weight {tuple(w.shape)}, grad {tuple(g.shape)}")
    step = state.step + 1
    c1 = 1 - beta1**step
    c2 = 1 - beta2**step
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        new_w.append(w - lr * (m / c1) / ((v / c2) ** 0.5 + eps))
        new_m.append(m)
        new_v.append(v)
    return new_w, AdamState(step, new_m, new_v)


class Adam:
    """Drives ``adam_step`` over a module's parameters in place."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.detach() for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        new_w, self.state = adam_step(
            [p.detach() for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, w in zip(self.params, new_w):
            p.copy_(w)


# --- gradient check ---------------------------------------------------------

def _fd_loss(fn, x, proj):
    out = fn(x)
    if not torch.all(torch.isfinite(out)):
        raise NonFiniteError("non-finite output during finite differencing")
    return float((out * proj).sum())


def grad_check(module, input, tolerance=None, *, h=1e-3, n_samples=48, seed=0, include_params=True):
    """Max relative error between reverse-mode and central-difference gradients.

    The scalar objective is ``sum(module(input) * R)`` for a fixed random
    projection ``R``. Analytic gradients come from the module at its own
    dtype; the finite differences always run on a float64 copy and use
    Richardson extrapolation of central differences at ``h`` and ``h/2``
    (error O(h^4)), which keeps ``h`` large enough to avoid cancellation. Coordinates
    of the input (and of every parameter tensor, when ``include_params``) are
    sampled. Errors are relative to ``max(|analytic|, |numeric|, 1e-3 * g_max)``
    with ``g_max`` the largest sampled gradient over all checked tensors, so
    near-zero coordinates (e.g. a bias cancelled by a following norm) do not
    dominate.
    """
    rng = np.random.default_rng(seed)
    is_module = isinstance(module, nn.Module)
    x = input.detach().clone().requires_grad_(True)
    if is_module:
        module.zero_grad(set_to_none=True)
    out = module(x)
    if not torch.all(torch.isfinite(out)):
        raise NonFiniteError("non-finite forward output in grad_check")
    # drawn from numpy so R never coincides with a torch-seeded input
    proj = torch.from_numpy(rng.standard_normal(tuple(out.shape)))
    (out * proj.to(out.dtype)).sum().backward()

    ref = copy.deepcopy(module).double() if is_module else module
    x64 = input.detach().to(torch.float64).clone()
    targets = [("input", x64, x.grad)]
    if is_module and include_params:
        ref_params = dict(ref.named_parameters())
        for name, p in module.named_parameters():
            targets.append((name, ref_params[name].data, p.grad if p.grad is not None else torch.zeros_like(p)))

    pairs = []
    with torch.no_grad():
        for _, tensor, analytic in targets:
            flat = tensor.view(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(n, n_samples), replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                diffs = []
                for step in (h, h / 2):
                    flat[i] = orig + step
                    lp = _fd_loss(ref, x64, proj)
                    flat[i] = orig - step
                    lm = _fd_loss(ref, x64, proj)
                    diffs.append((lp - lm) / (2 * step))
                flat[i] = orig
                num[j] = (4 * diffs[1] - diffs[0]) / 3
            ana = analytic.detach().to(torch.float64).reshape(-1)[torch.as_tensor(idx)].numpy()
            if not np.all(np.isfinite(ana)):
                raise NonFiniteError("non-finite analytic gradient in grad_check")
            pairs.append((ana, num))
    ana, num = np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs])
    floor = 1e-3 * max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    worst = float(np.max(np.abs(ana - num) / denom))
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} >= {tolerance:.1e}")
    return worst


# --- determinism helpers ----------------------------------------------------

@contextlib.contextmanager
def seeded(seed: int):
    """Scope torch's global RNG to ``seed`` (used for parameter init)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def philox(seed: int) -> np.random.Generator:
    """The pipeline's PRNG: numpy's Philox 4x64 counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))


# --- ModelBundle ------------------------------------------------------------

@dataclass
class ModelBundle:
    kind: str
    config: dict
    params: list  # [(name, shape)], in module order
    weights: np.ndarray  # flat float32
    norm: NormSpec = field(default_factory=NormSpec)
    meta: dict = field(default_factory=dict)
    version: int = BUNDLE_VERSION

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32).ravel()
        expected = sum(int(np.prod(s)) for _, s in self.params)
        if expected != self.weights.size:
            raise ShapeError(f"bundle declares {expected} weights but carries {self.weights.size}")

    @classmethod
    def from_module(cls, kind, config, module: nn.Module, norm=None, meta=None) -> "ModelBundle":
        named = list(module.named_parameters())
        weights = np.concatenate([p.detach().to(torch.float32).reshape(-1).numpy() for _, p in named])
        return cls(kind, dict(config), [(n, list(p.shape)) for n, p in named], weights,
                   norm or NormSpec(), dict(meta or {}))

    def load_into(self, module: nn.Module) -> nn.Module:
        named = list(module.named_parameters())
        if [(n, list(p.shape)) for n, p in named] != [(n, list(s)) for n, s in self.params]:
            raise ShapeError("module architecture does not match bundle parameter layout")
        offset = 0
        with torch.no_grad():
            for _, p in named:
                k = p.numel()
                p.copy_(torch.from_numpy(self.weights[offset : offset + k].copy()).reshape(p.shape))
                offset += k
        return module

    @property
    def bundle_id(self) -> str:
        h = hashlib.sha256(self.weights.tobytes())
        h.update(json.dumps(self.config, sort_keys=True).encode())
        return f"{self.kind}-{h.hexdigest()[:12]}"


def save_bundle(bundle: ModelBundle, path) -> None:
    header = {
        "version": bundle.version,
        "kind": bundle.kind,
        "config": bundle.config,
        "params": [[n, list(s)] for n, s in bundle.params],
        "n_weights": int(bundle.weights.size),
        "norm": bundle.norm.to_dict(),
        "meta": bundle.meta,
        "dtype": "f32",
        "endianness": "LE",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(bundle.weights.astype("<f4").tobytes())


def load_bundle(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing bundle header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        n = int(header["n_weights"])
        if header["dtype"] != "f32" or header["endianness"] != "LE" or "version" not in header:
            raise FormatError(f"{path}: unsupported bundle encoding")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed bundle header ({exc})") from exc
    body = raw[nl + 1 :]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: weight payload is {len(body)} bytes, expected {4 * n}")
    return ModelBundle(
        kind=header["kind"],
        config=header["config"],
        params=[(name, list(shape)) for name, shape in header["params"]],
        weights=np.frombuffer(body, dtype="<f4").copy(),
        norm=NormSpec.from_dict(header["norm"]),
        meta=header["meta"],
        version=header["version"],
    )
