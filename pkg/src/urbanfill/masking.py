"""Hole-mask generators: random walks, density-biased walks and static scenario masks.

Masks are uint8 arrays with 1 = valid and 0 = hole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import formats
from .errors import FormatError, ParameterError, ShapeError

# 4-connected unit moves: up, down, left, right
_MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskGenConfig:
    walk_steps: int = 300
    brush_radius: int = 1
    blur_sigma: float = 2.0
    threshold_percentile: float = 90.0
    per_frame_independent: bool = True

    def __post_init__(self):
        if self.walk_steps < 0:
            raise ParameterError("walk_steps must be >= 0")
        if self.brush_radius < 0:
            raise ParameterError("brush_radius must be >= 0")
        if self.blur_sigma <= 0:
            raise ParameterError("blur_sigma must be > 0")
        if not 0 < self.threshold_percentile < 100:
            raise ParameterError("threshold_percentile must lie in (0, 100)")

    @classmethod
    def from_pairs(cls, pairs) -> "MaskGenConfig":
        d = dict(pairs)
        flag = str(d.get("per_frame_independent", "true")).lower()
        if flag not in ("true", "false", "1", "0", "yes", "no"):
            raise ParameterError(f"bad per_frame_independent value {flag!r}")
        try:
            return cls(int(d.get("walk_steps", 300)), int(d.get("brush_radius", 1)),
                       float(d.get("blur_sigma", 2.0)), float(d.get("threshold_percentile", 90.0)),
                       flag in ("true", "1", "yes"))
        except ValueError as exc:
            raise ParameterError(f"bad mask config: {exc}") from exc


class MaskBlock:
    """Immutable binary T x H x W mask."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise ShapeError(f"MaskBlock must be 3-D, got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise FormatError("mask values must be 0 or 1")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def n_hole(self) -> int:
        return int(self._data.size - self._data.sum(dtype=np.int64))

    @property
    def n_valid(self) -> int:
        return int(self._data.sum(dtype=np.int64))

    def __repr__(self):
        return f"MaskBlock(shape={self.shape}, holes={self.n_hole})"


# -- blur and thresholding -------------------------------------------------

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalised Gaussian, half-width ceil(3 sigma), reflected borders."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(np.asarray(frame, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def threshold_regions(blurred: np.ndarray, percentile: float) -> list[np.ndarray]:
    """8-connected components of cells >= the given percentile.

    Components are flat cell indices in raster order, listed by first cell.
    An all-zero frame yields ``[]`` (caller falls back to random seeding).
    """
    blurred = np.asarray(blurred, dtype=np.float64)
    if blurred.size == 0:
        raise ParameterError("empty frame")
    if not np.any(blurred):
        return []
    tau = np.percentile(blurred, percentile, method="linear")
    labels, n = ndimage.label(blurred >= tau, structure=_EIGHT)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n)]


# -- random walks ----------------------------------------------------------

def random_walk_mask(shape: tuple[int, int], start: tuple[int, int], cfg: MaskGenConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Boolean (H, W) hole set painted by a clamped 4-connected walk."""
    H, W = shape
    r, c = start
    if not (0 <= r < H and 0 <= c < W):
        raise ParameterError(f"start {start} outside grid {shape}")
    moves = _MOVES[rng.integers(0, 4, size=cfg.walk_steps)]
    visited = np.zeros((H, W), dtype=bool)
    visited[r, c] = True
    for dr, dc in moves.tolist():
        r = min(max(r + dr, 0), H - 1)
        c = min(max(c + dc, 0), W - 1)
        visited[r, c] = True
    if cfg.brush_radius == 0:
        return visited
    size = 2 * cfg.brush_radius + 1
    return ndimage.maximum_filter(visited, size=size, mode="constant", cval=False)


def _uniform_start(H: int, W: int, rng: np.random.Generator) -> tuple[int, int]:
    return divmod(int(rng.integers(0, H * W)), W)


def _frame_from_holes(holes: np.ndarray) -> np.ndarray:
    return (~holes).astype(np.uint8)


def random_mask_block(block_shape: tuple[int, int, int], cfg: MaskGenConfig,
                      rng: np.random.Generator) -> MaskBlock:
    T, H, W = block_shape
    if cfg.per_frame_independent:
        frames = [_frame_from_holes(random_walk_mask((H, W), _uniform_start(H, W, rng), cfg, rng))
                  for _ in range(T)]
    else:
        frame = _frame_from_holes(random_walk_mask((H, W), _uniform_start(H, W, rng), cfg, rng))
        frames = [frame] * T
    return MaskBlock(np.stack(frames))


def biased_start(frame: np.ndarray, cfg: MaskGenConfig, rng: np.random.Generator) -> tuple[int, int]:
    """Start cell drawn inside a dense component chosen proportionally to its size."""
    H, W = frame.shape
    comps = threshold_regions(gaussian_blur(frame, cfg.blur_sigma), cfg.threshold_percentile)
    if not comps:
        return _uniform_start(H, W, rng)
    if len(comps) == 1:
        comp = comps[0]
    else:
        sizes = np.array([len(c) for c in comps], dtype=np.float64)
        comp = comps[int(rng.choice(len(comps), p=sizes / sizes.sum()))]
    cell = int(comp[int(rng.integers(0, len(comp)))])
    return divmod(cell, W)


def biased_mask_block(block, cfg: MaskGenConfig, rng: np.random.Generator) -> MaskBlock:
    """Per frame: blur, threshold, seed in a dense component, then walk.

    With ``per_frame_independent`` off, one mask seeded from the block's
    temporal sum is replicated over all frames.
    """
    data = np.asarray(getattr(block, "data", block), dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"expected (T, H, W) block, got {data.shape}")
    T, H, W = data.shape
    if cfg.per_frame_independent:
        frames = [_frame_from_holes(random_walk_mask((H, W), biased_start(f, cfg, rng), cfg, rng))
                  for f in data]
    else:
        frame = _frame_from_holes(random_walk_mask((H, W), biased_start(data.sum(axis=0), cfg, rng), cfg, rng))
        frames = [frame] * T
    return MaskBlock(np.stack(frames))


def make_mask(mode: str, block, cfg: MaskGenConfig, rng: np.random.Generator) -> MaskBlock:
    if mode == "random":
        shape = np.shape(getattr(block, "data", block))
        return random_mask_block(shape, cfg, rng)
    if mode == "biased":
        return biased_mask_block(block, cfg, rng)
    raise ParameterError(f"unknown mask mode {mode!r}")


# -- scenario masks --------------------------------------------------------

class ScenarioMask(NamedTuple):
    mask: MaskBlock
    hole_ratio: float  # masked-to-unmasked area


def hole_ratio(frame: np.ndarray) -> float:
    holes = int(frame.size - np.count_nonzero(frame))
    valid = frame.size - holes
    return holes / valid if valid else math.inf


def load_scenario_mask(path, T: int = 1) -> ScenarioMask:
    """Read a (1, H, W) uint8 mask file and replicate it over ``T`` frames."""
    arr = formats.read_ugb(path)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: scenario masks must be stored as u8")
    if arr.shape[0] != 1:
        raise FormatError(f"{path}: scenario mask must have a single frame, got {arr.shape[0]}")
    if not np.all(arr <= 1):
        raise FormatError(f"{path}: mask values must be 0 or 1")
    if T < 1:
        raise ParameterError("T must be >= 1")
    return ScenarioMask(MaskBlock(np.repeat(arr, T, axis=0)), hole_ratio(arr[0]))


def scenario_analogs(grid: int = 64) -> dict[str, np.ndarray]:
    """Five static (H, W) masks laid over the default synthetic city.

    Two cover dense areas (a thin strip through the core, a block on the
    secondary centre); the others sit on a lightly used patch, a small
    remote hub and empty outskirts.
    """
    if grid < 16:
        raise ParameterError(f"grid must be >= 16, got {grid}")
    s = grid / 64.0
    boxes = {
        "core_avenue": (10, 36, 25, 27),
        "centre_block": (28, 33, 32, 37),
        "inner_patch": (34, 40, 18, 26),
        "remote_hub": (42, 47, 44, 49),
        "outskirts": (52, 60, 4, 14),
    }
    out = {}
    for name, (r0, r1, c0, c1) in boxes.items():
        m = np.ones((grid, grid), dtype=np.uint8)
        m[int(r0 * s):max(int(r1 * s), int(r0 * s) + 1), int(c0 * s):max(int(c1 * s), int(c0 * s) + 1)] = 0
        out[name] = m
    return out
