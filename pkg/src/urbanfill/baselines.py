"""Classical imputers: per-hour global mean, nearest neighbour and thin-plate RBF."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formats
from .data import GridSeries
from .errors import ImputerError, ParameterError, ShapeError

# holes are processed in chunks so the distance matrix stays small
_CHUNK = 2048


@dataclass
class MeanTable:
    means: np.ndarray   # (24, H, W)
    counts: np.ndarray  # (24,) frames seen per hour of day

    def save(self, path) -> None:
        formats.write_ugb(path, self.means.astype(np.float32))

    @classmethod
    def load(cls, path) -> "MeanTable":
        means = formats.read_ugb(path)
        if means.shape[0] != 24:
            raise ParameterError(f"mean table must have 24 frames, got {means.shape[0]}")
        return cls(means, np.ones(24, dtype=np.int64))


def fit_global_mean(train: GridSeries) -> MeanTable:
    if train.bin_hours != 1:
        raise ParameterError("global mean needs hourly frames")
    if len(train) < 24:
        raise ParameterError(f"training series must cover a full day, got {len(train)} frames")
    hours = train.hours_of_day()
    H, W = train.frames.shape[1:]
    sums = np.zeros((24, H, W), dtype=np.float64)
    counts = np.zeros(24, dtype=np.int64)
    for h in range(24):
        sel = train.frames[hours == h]
        counts[h] = sel.shape[0]
        if counts[h]:
            sums[h] = sel.sum(axis=0, dtype=np.float64)
    means = np.zeros_like(sums)
    seen = counts > 0
    means[seen] = sums[seen] / counts[seen, None, None]
    return MeanTable(means, counts)


def predict_global_mean(table: MeanTable, image: np.ndarray, mask: np.ndarray, hour_of_day) -> np.ndarray:
    """Fill holes of one frame (or a block, given one hour per frame) from the table."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    hours = np.atleast_1d(np.asarray(hour_of_day))
    if np.any((hours < 0) | (hours > 23)):
        raise ParameterError(f"hour_of_day must be in 0..23, got {hour_of_day}")
    if image.ndim == 2:
        fill = table.means[int(hours[0])]
    else:
        if hours.shape[0] != image.shape[0]:
            raise ShapeError("need one hour of day per frame")
        fill = table.means[hours]
    return np.where(mask.astype(bool), image, fill.astype(np.float32))


def _nearest_fill(coords_hole: np.ndarray, coords_valid: np.ndarray, values: np.ndarray) -> np.ndarray:
    # valid coords are in raster order, so argmin's first-hit rule breaks ties
    # by smallest (t, row, col)
    out = np.empty(coords_hole.shape[0], dtype=values.dtype)
    step = max(1, (1 << 22) // max(coords_valid.shape[0], 1))
    for s in range(0, coords_hole.shape[0], step):
        ch = coords_hole[s:s + step]
        d2 = np.zeros((ch.shape[0], coords_valid.shape[0]), dtype=np.int64)
        for k in range(ch.shape[1]):
            diff = ch[:, k, None] - coords_valid[None, :, k]
            d2 += diff * diff
        out[s:s + step] = values[np.argmin(d2, axis=1)]
    return out


def nn_impute(block, mask, dims: int) -> np.ndarray:
    """Nearest valid voxel (Euclidean in index space) for every hole."""
    data = np.asarray(getattr(block, "data", block), dtype=np.float32)
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if data.shape != m.shape or data.ndim != 3:
        raise ShapeError(f"block {data.shape} and mask {m.shape} must match and be 3-D")
    out = data.copy()
    if dims == 2:
        for t in range(data.shape[0]):
            if (~m[t]).any():
                if not m[t].any():
                    raise ImputerError(f"frame {t} has no valid pixel")
                vh, vv = np.argwhere(~m[t]), np.argwhere(m[t])
                out[t][~m[t]] = _nearest_fill(vh, vv, data[t][m[t]])
    elif dims == 3:
        if (~m).any():
            if not m.any():
                raise ImputerError("block has no valid voxel")
            out[~m] = _nearest_fill(np.argwhere(~m), np.argwhere(m), data[m])
    else:
        raise ParameterError(f"dims must be 2 or 3, got {dims}")
    return out


# -- radial basis functions ------------------------------------------------

@dataclass(frozen=True)
class RbfConfig:
    sample_count: int = 500
    seed: int = 0
    regularization: float = 1e-8


def _tps(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = r * r * np.log(r)
    return np.where(r > 0, v, 0.0)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


class ThinPlateSpline:
    """Thin-plate spline r^2 log r with a linear polynomial tail."""

    def __init__(self, points: np.ndarray, values: np.ndarray, regularization: float = 1e-8):
        pts = np.asarray(points, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        n, d = pts.shape
        if n < d + 2:
            raise ImputerError(f"need at least {d + 2} sample points, got {n}")
        P = np.hstack([np.ones((n, 1)), pts])
        A = np.zeros((n + d + 1, n + d + 1))
        A[:n, :n] = _tps(_pairwise(pts, pts)) + regularization * np.eye(n)
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.concatenate([vals, np.zeros(d + 1)])
        try:
            coef = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise ImputerError(f"singular RBF system: {exc}") from exc
        if not np.all(np.isfinite(coef)):
            raise ImputerError("RBF solve produced non-finite coefficients")
        self.points = pts
        self.weights = coef[:n]
        self.poly = coef[n:]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], _CHUNK):
            xs = x[s:s + _CHUNK]
            out[s:s + _CHUNK] = _tps(_pairwise(xs, self.points)) @ self.weights \
                + self.poly[0] + xs @ self.poly[1:]
        return out


def _rbf_fill(data: np.ndarray, valid: np.ndarray, cfg: RbfConfig, rng: np.random.Generator) -> np.ndarray:
    vcoords = np.argwhere(valid)
    hcoords = np.argwhere(~valid)
    if vcoords.shape[0] > cfg.sample_count:
        pick = np.sort(rng.choice(vcoords.shape[0], size=cfg.sample_count, replace=False))
        vcoords = vcoords[pick]
    spline = ThinPlateSpline(vcoords, data[tuple(vcoords.T)], cfg.regularization)
    return spline(hcoords)


def rbf_impute(block, mask, dims: int, cfg: RbfConfig = RbfConfig()) -> np.ndarray:
    """Interpolate holes from a seeded sample of valid voxels."""
    data = np.asarray(getattr(block, "data", block), dtype=np.float32)
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if data.shape != m.shape or data.ndim != 3:
        raise ShapeError(f"block {data.shape} and mask {m.shape} must match and be 3-D")
    rng = np.random.default_rng(cfg.seed)
    out = data.copy()
    if dims == 2:
        for t in range(data.shape[0]):
            if (~m[t]).any():
                out[t][~m[t]] = _rbf_fill(data[t].astype(np.float64), m[t], cfg, rng)
    elif dims == 3:
        if (~m).any():
            out[~m] = _rbf_fill(data.astype(np.float64), m, cfg, rng)
    else:
        raise ParameterError(f"dims must be 2 or 3, got {dims}")
    return out
