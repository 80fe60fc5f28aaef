"""Categorical (POD/FAR/CSI with neighbourhood pooling), RMSE and SSIM scores.

POOLn is computed by thresholding both fields first and then max-pooling the
binary grids with an ``n x n`` kernel and stride ``n``; ragged edges are
dropped. A pooled cell counts as evaluated if any pixel in it is valid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .field import Field

THRESHOLDS = (15.0, 35.0, 50.0)
POOLS = (1, 4, 8)


def _arrays(f):
    if isinstance(f, Field):
        return f.values.astype(np.float64), f.mask
    a = np.asarray(f, dtype=np.float64)
    return a, np.ones(a.shape, dtype=bool)


def _pool_any(grid: np.ndarray, pool: int) -> np.ndarray:
    rows, cols = grid.shape
    if pool < 1 or pool > min(rows, cols):
        raise ShapeError(f"pool {pool} invalid for a {rows}x{cols} field")
    r, c = rows // pool, cols // pool
    return grid[: r * pool, : c * pool].reshape(r, pool, c, pool).any(axis=(1, 3))


def pooled_binarize(f, threshold: float, pool: int) -> np.ndarray:
    values, mask = _arrays(f)
    return _pool_any((values > threshold) & mask, pool)


@dataclass(frozen=True)
class Contingency:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other):
        return Contingency(self.hits + other.hits, self.misses + other.misses,
                           self.false_alarms + other.false_alarms,
                           self.correct_negatives + other.correct_negatives)


def contingency(pred, truth, threshold: float, pool: int = 1) -> Contingency:
    pv, pm = _arrays(pred)
    tv, tm = _arrays(truth)
    if pv.shape != tv.shape:
        raise ShapeError(f"pred {pv.shape} vs truth {tv.shape}")
    if not np.array_equal(pm, tm):
        raise ShapeError("pred and truth masks differ")
    p = _pool_any((pv > threshold) & pm, pool)
    t = _pool_any((tv > threshold) & tm, pool)
    valid = _pool_any(tm, pool)
    return Contingency(
        hits=int(np.count_nonzero(p & t & valid)),
        misses=int(np.count_nonzero(~p & t & valid)),
        false_alarms=int(np.count_nonzero(p & ~t & valid)),
        correct_negatives=int(np.count_nonzero(~p & ~t & valid)),
    )


@dataclass(frozen=True)
class Scores:
    pod: float
    far: float
    csi: float
    degenerate: frozenset = frozenset()  # names of scores that were 0/0

    def __iter__(self):
        return iter((self.pod, self.far, self.csi))


def scores(c: Contingency) -> Scores:
    """POD, FAR, CSI. A 0/0 score is reported as 0 and named in ``degenerate``."""
    h, m, f = c.hits, c.misses, c.false_alarms
    flags = set()

    def ratio(num, den, name):
        if den == 0:
            flags.add(name)
            return 0.0
        return num / den

    pod = ratio(h, h + m, "pod")
    far = ratio(f, h + f, "far")
    csi = ratio(h, h + m + f, "csi")
    return Scores(pod, far, csi, frozenset(flags))


def rmse(pred, truth) -> float:
    pv, pm = _arrays(pred)
    tv, tm = _arrays(truth)
    if pv.shape != tv.shape or not np.array_equal(pm, tm):
        raise ShapeError("rmse needs equal shapes and masks")
    if not tm.any():
        raise ValueError("rmse: no valid pixels")
    d = pv[tm] - tv[tm]
    return float(np.sqrt(np.mean(d * d)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(pred, truth, window: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid (unpadded) region, Gaussian window with sigma 1.5.

    Only windows whose centre pixel is valid contribute; invalid pixels are
    zero-filled before filtering.
    """
    pv, pm = _arrays(pred)
    tv, tm = _arrays(truth)
    if pv.shape != tv.shape:
        raise ShapeError(f"pred {pv.shape} vs truth {tv.shape}")
    if window < 1 or window % 2 == 0 or window > min(pv.shape):
        raise ValueError(f"window must be odd and <= {min(pv.shape)}, got {window}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    valid = pm & tm
    x = np.where(valid, pv, 0.0)
    y = np.where(valid, tv, 0.0)
    g = gaussian_window(window)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    half = window // 2
    centre = valid[half : valid.shape[0] - half, half : valid.shape[1] - half]
    if not centre.any():
        raise ValueError("ssim: no valid window centres")
    return float(np.clip(smap[centre].mean(), -1.0, 1.0))


# --- report -----------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = THRESHOLDS
    pools: tuple = POOLS
    data_range: float = 60.0
    window: int = 11


@dataclass
class MetricReport:
    rmse: float
    ssim: float
    pod: dict = field(default_factory=dict)  # (threshold, pool) -> score
    far: dict = field(default_factory=dict)
    csi: dict = field(default_factory=dict)
    degenerate: dict = field(default_factory=dict)  # (threshold, pool) -> frozenset of score names


def evaluate(pred, truth, config: EvalConfig = EvalConfig()) -> MetricReport:
    rep = MetricReport(rmse=rmse(pred, truth),
                       ssim=ssim(pred, truth, window=config.window, data_range=config.data_range))
    for thr in config.thresholds:
        for pool in config.pools:
            sc = scores(contingency(pred, truth, thr, pool))
            key = (thr, pool)
            rep.pod[key], rep.far[key], rep.csi[key] = sc.pod, sc.far, sc.csi
            rep.degenerate[key] = sc.degenerate
    return rep


def _cell(thr, pool) -> str:
    return f"{thr:g}_pool{pool}"


def metric_columns(config: EvalConfig = EvalConfig()) -> list[str]:
    """The 11 headline columns: RMSE, SSIM and CSI for every (threshold, pool)."""
    return ["rmse", "ssim"] + [f"csi_{_cell(t, p)}" for t in config.thresholds for p in config.pools]


def categorical_columns(config: EvalConfig = EvalConfig()) -> list[str]:
    cols = []
    for score in ("pod", "far", "csi"):
        cols += [f"{score}_{_cell(t, p)}" for t in config.thresholds for p in config.pools]
    return cols + [f"degenerate_{_cell(t, p)}" for t in config.thresholds for p in config.pools]


def report_row(rep: MetricReport, config: EvalConfig = EvalConfig()) -> dict:
    row = {"rmse": rep.rmse, "ssim": rep.ssim}
    for t in config.thresholds:
        for p in config.pools:
            row[f"csi_{_cell(t, p)}"] = rep.csi[(t, p)]
    return row


def categorical_row(rep: MetricReport, config: EvalConfig = EvalConfig()) -> dict:
    row = {}
    for name in ("pod", "far", "csi"):
        table = getattr(rep, name)
        for t in config.thresholds:
            for p in config.pools:
                row[f"{name}_{_cell(t, p)}"] = table[(t, p)]
    for t in config.thresholds:
        for p in config.pools:
            row[f"degenerate_{_cell(t, p)}"] = "|".join(sorted(rep.degenerate[(t, p)]))
    return row


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows(path, id_columns: list[str], columns: list[str], rows: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(id_columns + columns)
        for row in rows:
            w.writerow([row[c] for c in id_columns] + [_fmt(row[c]) for c in columns])


def read_rows(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
