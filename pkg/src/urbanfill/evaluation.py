"""Hole metrics, SSIM/PSNR, aggregated error maps and scenario replays."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import baselines, formats
from .data import GridSeries
from .errors import ParameterError, ShapeError, UndefinedMetricError
from .nn import composite, unet_forward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# imputer(block (T,H,W), mask (T,H,W), hours (T,)) -> imputed block
Imputer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _arr(x, dtype=np.float64) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=dtype)


def _hole_residuals(pred, gt, mask) -> np.ndarray:
    p, g = _arr(pred), _arr(gt)
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if not (p.shape == g.shape == m.shape):
        raise ShapeError(f"shape mismatch: {p.shape}, {g.shape}, {m.shape}")
    if m.all():
        raise UndefinedMetricError("no hole voxels to score")
    return (p - g)[~m]


def l1_hole(pred, gt, mask) -> float:
    """Mean |pred - gt| per hole voxel."""
    return float(np.mean(np.abs(_hole_residuals(pred, gt, mask))))


def l2_hole(pred, gt, mask) -> float:
    """Mean squared residual per hole voxel."""
    d = _hole_residuals(pred, gt, mask)
    return float(np.mean(d * d))


def _ssim_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # only window positions that fit entirely inside the frame
    r = k.size // 2
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(pred_frame, gt_frame, data_range: float) -> float:
    if not data_range > 0:
        raise ParameterError(f"data_range must be > 0, got {data_range}")
    a, b = _arr(pred_frame), _arr(gt_frame)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D frames, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = _ssim_window()
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_block(pred, gt, data_range: float) -> float:
    """Per-frame SSIM averaged over the temporal axis."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape or p.ndim != 3:
        raise ShapeError(f"ssim_block needs equal (T, H, W) blocks, got {p.shape} and {g.shape}")
    return float(np.mean([ssim(p[t], g[t], data_range) for t in range(p.shape[0])]))


def psnr(pred, gt, peak: float) -> float:
    """10 log10(peak^2 / MSE) over all voxels; +inf when the inputs agree."""
    if not peak > 0:
        raise ParameterError(f"peak must be > 0, got {peak}")
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# -- block reports ---------------------------------------------------------

@dataclass
class MetricRow:
    block_index: int
    l1_hole: float
    l2_hole: float
    ssim: float
    psnr: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {}
        return {k: float(np.mean([getattr(r, k) for r in self.rows]))
                for k in ("l1_hole", "l2_hole", "ssim", "psnr")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block_index", "l1_hole", "l2_hole", "ssim", "psnr"])
            for r in self.rows:
                w.writerow([r.block_index, _fmt(r.l1_hole), _fmt(r.l2_hole), _fmt(r.ssim), _fmt(r.psnr)])


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def evaluate_blocks(preds: Sequence, gts: Sequence, masks: Sequence,
                    data_range: float | None = None) -> MetricReport:
    """Score aligned (T, H, W) blocks.

    The SSIM range and PSNR peak default to the ground-truth maximum.
    """
    if not (len(preds) == len(gts) == len(masks)):
        raise ShapeError("preds, gts and masks must have the same length")
    if data_range is None:
        data_range = max(float(_arr(g).max()) for g in gts) if gts else 0.0
    if not data_range > 0:
        raise ParameterError("data range is zero; pass an explicit peak")
    report = MetricReport()
    for i, (p, g, m) in enumerate(zip(preds, gts, masks)):
        report.rows.append(MetricRow(i, l1_hole(p, g, m), l2_hole(p, g, m),
                                     ssim_block(p, g, data_range), psnr(p, g, data_range)))
    return report


# -- error maps ------------------------------------------------------------

@dataclass
class ErrorMap:
    values: np.ndarray  # (H, W) signed mean of pred - gt over holed frames
    counts: np.ndarray  # (H, W) number of holed frames per cell

    def save(self, ugb_path, ppm_path=None) -> None:
        formats.write_ugb(ugb_path, self.values[None].astype(np.float32))
        if ppm_path is not None:
            formats.write_ppm(ppm_path, formats.signed_colormap(self.values))


def _frames(seq) -> np.ndarray:
    parts = []
    for x in seq:
        a = np.asarray(getattr(x, "data", x))
        parts.append(a[None] if a.ndim == 2 else a)
    if not parts:
        raise ShapeError("no frames given")
    return np.concatenate(parts, axis=0)


def spatial_error_map(preds: Sequence, gts: Sequence, masks: Sequence) -> ErrorMap:
    """Per cell, mean of (pred - gt) over the frames where that cell is a hole."""
    p = _frames(preds).astype(np.float64)
    g = _frames(gts).astype(np.float64)
    m = _frames(masks).astype(bool)
    if not (p.shape == g.shape == m.shape):
        raise ShapeError(f"shape mismatch: {p.shape}, {g.shape}, {m.shape}")
    hole = ~m
    counts = hole.sum(axis=0)
    sums = np.where(hole, p - g, 0.0).sum(axis=0)
    values = np.zeros_like(sums)
    seen = counts > 0
    values[seen] = sums[seen] / counts[seen]
    return ErrorMap(values, counts.astype(np.int64))


# -- scenarios -------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    mask_path: str
    start: int  # first frame, inclusive
    end: int    # last frame, exclusive

    @classmethod
    def from_pairs(cls, pairs) -> "ScenarioSpec":
        d = dict(pairs)
        try:
            return cls(d.get("name", "scenario"), d["mask"], int(d["start"]), int(d["end"]))
        except KeyError as exc:
            raise ParameterError(f"scenario spec lacks {exc}") from exc
        except ValueError as exc:
            raise ParameterError(f"bad scenario spec: {exc}") from exc


@dataclass
class ScenarioResult:
    name: str
    frame_index: np.ndarray
    gt_mean: np.ndarray
    pred_mean: np.ndarray
    avg_abs_error: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["hour", "gt_mean", "pred_mean"])
            for k, a, b in zip(self.frame_index, self.gt_mean, self.pred_mean):
                w.writerow([int(k), _fmt(float(a)), _fmt(float(b))])


def scenario_run(imputer: Imputer, series: GridSeries, scenario: ScenarioSpec, T: int,
                 mask: np.ndarray | None = None) -> ScenarioResult:
    """Replay a static mask over a period in T-frame blocks.

    A trailing partial block is dropped. ``mask`` overrides the file named in
    the scenario and must be a single (H, W) frame.
    """
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0 <= scenario.start < scenario.end <= len(series)):
        raise ParameterError(f"period [{scenario.start}, {scenario.end}) outside series of {len(series)} frames")
    n_blocks = (scenario.end - scenario.start) // T
    if n_blocks == 0:
        raise ParameterError(f"period of {scenario.end - scenario.start} frames is shorter than T={T}")
    if mask is None:
        frame_mask = formats.read_ugb(scenario.mask_path)[0]
    else:
        frame_mask = np.asarray(mask)
    if frame_mask.shape != series.frames.shape[1:]:
        raise ShapeError(f"mask {frame_mask.shape} does not match grid {series.frames.shape[1:]}")
    hole = ~frame_mask.astype(bool)
    if not hole.any():
        raise UndefinedMetricError("scenario mask has no hole cells")
    block_mask = np.repeat(frame_mask.astype(np.uint8)[None], T, axis=0)
    hours = series.hours_of_day()
    idx, gt_means, pred_means, abs_sum = [], [], [], 0.0
    for b in range(n_blocks):
        s = scenario.start + b * T
        gt = series.frames[s:s + T]
        out = np.asarray(imputer(gt, block_mask, hours[s:s + T]), dtype=np.float64)
        g = gt.astype(np.float64)
        for t in range(T):
            idx.append(s + t)
            gt_means.append(g[t][hole].mean())
            pred_means.append(out[t][hole].mean())
            abs_sum += np.abs(out[t][hole] - g[t][hole]).sum()
    n = n_blocks * T * int(hole.sum())
    return ScenarioResult(scenario.name, np.array(idx), np.array(gt_means), np.array(pred_means), abs_sum / n)


# -- imputer adapters ------------------------------------------------------

def model_imputer(model) -> Imputer:
    def run(block, mask, hours):
        return composite(block, mask, unet_forward(model, block, mask))
    return run


def mean_imputer(table: baselines.MeanTable) -> Imputer:
    def run(block, mask, hours):
        return baselines.predict_global_mean(table, block, mask, hours)
    return run


def nn_imputer(dims: int) -> Imputer:
    def run(block, mask, hours):
        return baselines.nn_impute(block, mask, dims)
    return run


def rbf_imputer(dims: int, cfg: baselines.RbfConfig = baselines.RbfConfig()) -> Imputer:
    def run(block, mask, hours):
        return baselines.rbf_impute(block, mask, dims, cfg)
    return run


def oracle_imputer() -> Imputer:
    def run(block, mask, hours):
        return np.array(block, dtype=np.float32)
    return run
