"""Seeded train/validate/test runs on a synthetic city, shared by the acceptance tests.

Results are cached as JSON keyed on the run settings and a digest of the
package sources, so re-running the suite after an unrelated edit to the tests
does not retrain.  Set URBANFILL_RECOMPUTE=1 to ignore the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

import urbanfill
from urbanfill import baselines, data, masking, train
from urbanfill.nn import composite

CACHE_DIR = Path(__file__).with_name("_study_cache")

TRAIN_DAYS = 16
VAL_DAY = 16
TEST_DAY = 17
N_DAYS = 18
CITY_SEED = 2024
# a parade-like surge over part of the core on the held-out day
ANOMALY = data.Anomaly(TEST_DAY, data.rect_cells(16, 28, 18, 30), 3.0)
TEST_MASK_DRAWS = 4
TEST_MASK_SEED = 9001
VAL_MASK_SEED = 7001


@dataclass(frozen=True)
class RunSpec:
    T: int
    mask_mode: str
    seed: int
    iters: int = 2000
    batch_size: int = 16
    lr0: float = 0.01
    lam: float = 12.0
    width: str = "1/8"
    validate_every: int = 500


def city_series() -> data.GridSeries:
    spec = data.default_city(64, seed=CITY_SEED, anomalies=[ANOMALY])
    return data.generate_synthetic(spec, N_DAYS)


def _day(series: data.GridSeries, day: int) -> np.ndarray:
    return series.frames[day * 24:(day + 1) * 24]


def test_masks(series: data.GridSeries) -> list[np.ndarray]:
    """Frozen per-frame (24, H, W) masks over the test day, random and biased draws alternating."""
    day = _day(series, TEST_DAY)
    cfg = masking.MaskGenConfig()
    out = []
    for k in range(TEST_MASK_DRAWS):
        mode = "random" if k % 2 == 0 else "biased"
        out.append(masking.make_mask(mode, day, cfg, np.random.default_rng([TEST_MASK_SEED, k])).data)
    return out


def val_suite(series: data.GridSeries, T: int):
    blocks = data.chunk_series(_day(series, VAL_DAY), T)
    return blocks, train.build_mask_suite(blocks, VAL_MASK_SEED)


def _pooled_l1(preds, gts, masks) -> float:
    err, n = 0.0, 0
    for p, g, m in zip(preds, gts, masks):
        hole = m == 0
        err += float(np.abs(p[hole].astype(np.float64) - g[hole]).sum())
        n += int(hole.sum())
    return err / n


def mean_baseline_score(series: data.GridSeries) -> float:
    table = baselines.fit_global_mean(series.slice(0, TRAIN_DAYS * 24))
    day = _day(series, TEST_DAY)
    hours = np.arange(24)
    preds, gts, ms = [], [], []
    for m in test_masks(series):
        preds.append(baselines.predict_global_mean(table, day, m, hours))
        gts.append(day)
        ms.append(m)
    return _pooled_l1(preds, gts, ms)


def model_test_score(model, series: data.GridSeries, T: int) -> float:
    day = _day(series, TEST_DAY)
    preds, gts, ms = [], [], []
    for m in test_masks(series):
        blocks = [day[s:s + T] for s in range(0, 24, T)]
        mblocks = [m[s:s + T] for s in range(0, 24, T)]
        raw = train.predict_blocks(model, blocks, mblocks)
        for b, mb, r in zip(blocks, mblocks, raw):
            preds.append(composite(b, mb, r))
            gts.append(b)
            ms.append(mb)
    return _pooled_l1(preds, gts, ms)


def source_digest() -> str:
    h = hashlib.sha256()
    root = Path(urbanfill.__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(Path(__file__).read_bytes())
    return h.hexdigest()[:16]


def run(spec: RunSpec) -> dict:
    key = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode()).hexdigest()[:12]
    path = CACHE_DIR / f"{spec.T}_{spec.mask_mode}_{spec.seed}_{key}.json"
    digest = source_digest()
    if path.exists() and not os.environ.get("URBANFILL_RECOMPUTE"):
        cached = json.loads(path.read_text())
        if cached.get("source_digest") == digest:
            cached["cached"] = True
            return cached
    series = city_series()
    blocks = data.chunk_series(series.slice(0, TRAIN_DAYS * 24), spec.T)
    vblocks, suite = val_suite(series, spec.T)
    cfg = train.TrainConfig(T=spec.T, mask_mode=spec.mask_mode, lam=spec.lam, batch_size=spec.batch_size,
                            lr0=spec.lr0, max_iters=spec.iters, validate_every=spec.validate_every,
                            seed=spec.seed, width_scale=Fraction(spec.width))
    t0 = time.perf_counter()
    model, log = train.train(blocks, cfg, vblocks, suite)
    result = {
        "spec": asdict(spec),
        "source_digest": digest,
        "train_seconds": time.perf_counter() - t0,
        "final_loss": log.steps[-1][2],
        "validation": [list(v) for v in log.validations],
        "final_validation": log.final_validation(),
        "test_l1_hole": model_test_score(model, series, spec.T),
        "mean_l1_hole": mean_baseline_score(series),
    }
    CACHE_DIR.mkdir(exist_ok=True)
    path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    result["cached"] = False
    return result


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=3)
    ap.add_argument("--mode", default="biased")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iters", type=int, default=2000)
    a = ap.parse_args()
    for s in a.seeds:
        r = run(RunSpec(a.T, a.mode, s, iters=a.iters))
        print(json.dumps({k: r[k] for k in ("spec", "test_l1_hole", "mean_l1_hole", "final_validation",
                                             "train_seconds", "cached")}), flush=True)
