"""Event ingestion, hourly rasterisation, block chunking and synthetic cities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

from . import formats
from .errors import FormatError, IngestError, ParameterError, ShapeError


@dataclass(frozen=True)
class RegionSpec:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    grid_w: int = 64
    grid_h: int = 64
    bin_hours: float = 1

    def __post_init__(self):
        if not self.lon_min < self.lon_max:
            raise ParameterError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if not self.lat_min < self.lat_max:
            raise ParameterError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ParameterError("grid dimensions must be >= 1")
        if self.bin_hours <= 0:
            raise ParameterError("bin_hours must be positive")

    @classmethod
    def from_pairs(cls, pairs) -> "RegionSpec":
        d = dict(pairs)
        try:
            return cls(float(d["lon_min"]), float(d["lon_max"]), float(d["lat_min"]), float(d["lat_max"]),
                       int(d.get("grid_w", 64)), int(d.get("grid_h", 64)), float(d.get("bin_hours", 1)))
        except KeyError as exc:
            raise ParameterError(f"region config missing {exc}") from exc
        except ValueError as exc:
            raise ParameterError(f"bad region config: {exc}") from exc


@dataclass(frozen=True)
class EventRecord:
    timestamp: datetime
    lon: float
    lat: float


@dataclass
class GridSeries:
    """Consecutive frames; frame k covers [start + k*bin_hours, start + (k+1)*bin_hours)."""

    frames: np.ndarray  # (N, H, W) float32
    start_time: datetime
    bin_hours: float = 1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ShapeError(f"series frames must be (N, H, W), got {self.frames.shape}")
        if np.any(self.frames < 0) or not np.all(np.isfinite(self.frames)):
            raise ParameterError("series values must be finite and nonnegative")

    def __len__(self):
        return self.frames.shape[0]

    def frame_time(self, k: int) -> datetime:
        return self.start_time + timedelta(hours=k * self.bin_hours)

    def hours_of_day(self) -> np.ndarray:
        """Calendar hour of each frame start."""
        return np.array([self.frame_time(k).hour for k in range(len(self))], dtype=np.int64)

    def slice(self, start: int, stop: int) -> "GridSeries":
        return GridSeries(self.frames[start:stop], self.frame_time(start), self.bin_hours)


class GridBlock:
    """Immutable T x H x W float32 block."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ShapeError(f"GridBlock must be (T>=1, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("GridBlock values must be finite")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    def __repr__(self):
        return f"GridBlock(shape={self.shape})"

    def __eq__(self, other):
        return isinstance(other, GridBlock) and np.array_equal(self._data, other._data)


# -- ingestion -------------------------------------------------------------

class ParsedEvents(NamedTuple):
    records: list[EventRecord]
    skipped: int


def parse_events(stream: TextIO) -> ParsedEvents:
    """Read ``timestamp,lon,lat`` CSV rows; malformed rows are skipped and counted."""
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("empty event file: missing header") from None
    except csv.Error as exc:
        raise IngestError(f"unparseable event file: {exc}") from exc
    if [h.strip().lower() for h in header] != ["timestamp", "lon", "lat"]:
        raise IngestError(f"expected header 'timestamp,lon,lat', got {','.join(header)!r}")
    records = []
    skipped = 0
    try:
        for row in reader:
            if not row:
                continue
            try:
                ts, lon, lat = row
                rec = EventRecord(datetime.fromisoformat(ts.strip()), float(lon), float(lat))
            except ValueError:
                skipped += 1
                continue
            if rec.timestamp.tzinfo is not None or not (math.isfinite(rec.lon) and math.isfinite(rec.lat)):
                skipped += 1
                continue
            records.append(rec)
    except csv.Error as exc:
        raise IngestError(f"unparseable event file: {exc}") from exc
    return ParsedEvents(records, skipped)


class RasterResult(NamedTuple):
    series: GridSeries
    dropped: int


def rasterize(events: Iterable[EventRecord], region: RegionSpec, start_time: datetime,
              n_frames: int) -> RasterResult:
    """Count events per (frame, row, col); row 0 is the northern edge.

    Events outside the region or the time window are dropped and counted.
    """
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    H, W = region.grid_h, region.grid_w
    dlon = (region.lon_max - region.lon_min) / W
    dlat = (region.lat_max - region.lat_min) / H
    counts = np.zeros((n_frames, H, W), dtype=np.float64)
    dropped = 0
    bin_seconds = region.bin_hours * 3600.0
    for ev in events:
        k = math.floor((ev.timestamp - start_time).total_seconds() / bin_seconds)
        if not (region.lon_min <= ev.lon < region.lon_max) or not (region.lat_min < ev.lat <= region.lat_max):
            dropped += 1
            continue
        col = min(int(math.floor((ev.lon - region.lon_min) / dlon)), W - 1)
        row = min(int(math.floor((region.lat_max - ev.lat) / dlat)), H - 1)
        if not 0 <= k < n_frames:
            dropped += 1
            continue
        counts[k, row, col] += 1
    return RasterResult(GridSeries(counts.astype(np.float32), start_time, region.bin_hours), dropped)


def chunk_series(series: GridSeries | np.ndarray, T: int) -> list[GridBlock]:
    """Non-overlapping T-frame windows; a trailing partial window is dropped."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    frames = series.frames if isinstance(series, GridSeries) else np.asarray(series)
    n = frames.shape[0] // T
    return [GridBlock(frames[i * T:(i + 1) * T]) for i in range(n)]


# -- synthetic cities ------------------------------------------------------

@dataclass(frozen=True)
class Hotspot:
    row: float
    col: float
    radius: float
    peak_rate: float


@dataclass(frozen=True)
class Anomaly:
    day: int
    cells: tuple[tuple[int, int], ...]
    multiplier: float


@dataclass(frozen=True)
class SyntheticCitySpec:
    hotspots: tuple[Hotspot, ...]
    diurnal_amplitude: float = 0.5
    noise_seed: int = 0
    anomaly_days: tuple[Anomaly, ...] = ()
    grid_h: int = 64
    grid_w: int = 64

    def __post_init__(self):
        for h in self.hotspots:
            if h.peak_rate < 0:
                raise ParameterError(f"peak_rate must be >= 0: {h}")
            if not (0 <= h.row < self.grid_h and 0 <= h.col < self.grid_w):
                raise ParameterError(f"hotspot centre outside grid: {h}")
            if h.radius <= 0:
                raise ParameterError(f"hotspot radius must be positive: {h}")
        for a in self.anomaly_days:
            if a.multiplier < 0:
                raise ParameterError(f"rate_multiplier must be >= 0: {a}")
        if not 0 <= self.diurnal_amplitude <= 1:
            raise ParameterError("diurnal_amplitude must lie in [0, 1] to keep rates nonnegative")

    def base_rate(self) -> np.ndarray:
        """Sum of Gaussian hotspot intensities, (H, W)."""
        rows = np.arange(self.grid_h, dtype=np.float64)[:, None]
        cols = np.arange(self.grid_w, dtype=np.float64)[None, :]
        rate = np.zeros((self.grid_h, self.grid_w))
        for h in self.hotspots:
            d2 = (rows - h.row) ** 2 + (cols - h.col) ** 2
            rate += h.peak_rate * np.exp(-d2 / (2.0 * h.radius ** 2))
        return rate

    def intensity(self, day: int, hour: int) -> np.ndarray:
        lam = self.base_rate() * (1.0 + self.diurnal_amplitude * math.sin(2.0 * math.pi * hour / 24.0))
        for a in self.anomaly_days:
            if a.day == day:
                for r, c in a.cells:
                    lam[r, c] *= a.multiplier
        return lam

    def with_seed(self, seed: int) -> "SyntheticCitySpec":
        return SyntheticCitySpec(self.hotspots, self.diurnal_amplitude, seed, self.anomaly_days,
                                 self.grid_h, self.grid_w)


def generate_synthetic(spec: SyntheticCitySpec, n_days: int,
                       start_time: datetime = datetime(2016, 1, 1)) -> GridSeries:
    """Poisson counts from the closed-form hourly intensity; pure in (spec, n_days)."""
    if n_days < 1:
        raise ParameterError(f"n_days must be >= 1, got {n_days}")
    rng = np.random.default_rng(spec.noise_seed)
    base = spec.base_rate()
    frames = np.empty((24 * n_days, spec.grid_h, spec.grid_w), dtype=np.float32)
    by_day: dict[int, list[Anomaly]] = {}
    for a in spec.anomaly_days:
        by_day.setdefault(a.day, []).append(a)
    for d in range(n_days):
        factor = np.ones_like(base)
        for a in by_day.get(d, ()):
            for r, c in a.cells:
                factor[r, c] *= a.multiplier
        for h in range(24):
            lam = base * (1.0 + spec.diurnal_amplitude * math.sin(2.0 * math.pi * h / 24.0)) * factor
            frames[d * 24 + h] = rng.poisson(lam)
    return GridSeries(frames, start_time, 1)


def rect_cells(r0: int, r1: int, c0: int, c1: int) -> tuple[tuple[int, int], ...]:
    """Cells of the half-open rectangle [r0, r1) x [c0, c1)."""
    return tuple((r, c) for r in range(r0, r1) for c in range(c0, c1))


def default_city(grid: int = 64, seed: int = 0, anomalies: Sequence[Anomaly] = ()) -> SyntheticCitySpec:
    """A skewed city: one dense core, a secondary centre, two small remote hubs."""
    s = grid / 64.0
    hotspots = (
        Hotspot(22 * s, 26 * s, 5.0 * s, 12.0),
        Hotspot(30 * s, 34 * s, 3.0 * s, 8.0),
        Hotspot(44 * s, 46 * s, 2.5 * s, 6.0),
        Hotspot(12 * s, 52 * s, 2.0 * s, 4.0),
    )
    return SyntheticCitySpec(hotspots, 0.6, seed, tuple(anomalies), grid, grid)


# -- spec files ------------------------------------------------------------

def city_spec_from_pairs(pairs) -> SyntheticCitySpec:
    """Parse a key=value synthetic city description.

    Repeated keys: ``hotspot=row,col,radius,peak`` and
    ``anomaly=day,multiplier,r0:r1,c0:c1`` (half-open cell rectangle).
    """
    hotspots, anomalies = [], []
    opts = {}
    try:
        for key, value in pairs:
            if key == "hotspot":
                r, c, rad, peak = (float(v) for v in value.split(","))
                hotspots.append(Hotspot(r, c, rad, peak))
            elif key == "anomaly":
                day, mult, rr, cc = value.split(",")
                r0, r1 = (int(v) for v in rr.split(":"))
                c0, c1 = (int(v) for v in cc.split(":"))
                anomalies.append(Anomaly(int(day), rect_cells(r0, r1, c0, c1), float(mult)))
            else:
                opts[key] = value
        grid_h = int(opts.get("grid_h", opts.get("grid", 64)))
        grid_w = int(opts.get("grid_w", opts.get("grid", 64)))
        if not hotspots:
            base = default_city(grid_h)
            hotspots = list(base.hotspots)
        return SyntheticCitySpec(tuple(hotspots), float(opts.get("diurnal_amplitude", 0.6)),
                                 int(opts.get("noise_seed", 0)), tuple(anomalies), grid_h, grid_w)
    except ValueError as exc:
        raise ParameterError(f"bad synthetic city spec: {exc}") from exc


# -- grid files ------------------------------------------------------------

def _as_array(obj) -> np.ndarray:
    if isinstance(obj, GridSeries):
        return obj.frames
    return np.asarray(getattr(obj, "data", obj))


def write_grid(path, obj) -> None:
    """Write a block, mask, series or raw 3-D array as UGB (series also get a .meta sidecar)."""
    formats.write_ugb(path, _as_array(obj))
    if isinstance(obj, GridSeries):
        formats.write_kv(formats.sidecar_path(path),
                         [("start_time", obj.start_time.isoformat()), ("bin_hours", obj.bin_hours)])


def read_grid(path) -> np.ndarray:
    return formats.read_ugb(path)


def read_series(path, default_start: datetime = datetime(2016, 1, 1)) -> GridSeries:
    """Read a UGB series; timing comes from the sidecar when present."""
    frames = formats.read_ugb(path)
    if frames.dtype != np.float32:
        raise FormatError(f"{path}: series must be float32")
    meta = formats.sidecar_path(path)
    start, bin_hours = default_start, 1.0
    if Path(meta).exists():
        d = dict(formats.read_kv(meta))
        try:
            start = datetime.fromisoformat(d.get("start_time", default_start.isoformat()))
            bin_hours = float(d.get("bin_hours", 1))
        except ValueError as exc:
            raise FormatError(f"bad series metadata in {meta}: {exc}") from exc
    return GridSeries(frames, start, bin_hours)
