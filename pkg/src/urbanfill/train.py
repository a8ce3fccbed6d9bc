"""Self-supervised training: fresh masks per sample, Adam with step decay, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import masking
from .errors import NumericError, ParameterError, ShapeError
from .nn import (
    UNetConfig,
    UNetModel,
    build_unet,
    composite,
    forward,
    load_model,
    loss,
    save_model,
)
from .tensor import Tape, Tensor, adam_step

log = logging.getLogger(__name__)

DECAY_RATE = 0.9
DECAY_EVERY = 500
EVAL_BATCH = 16

# stream ids mixed into every seed so the consumers never overlap
_STREAM_SHUFFLE = 0
_STREAM_MASK = 1
_STREAM_VAL_RANDOM = 2
_STREAM_VAL_BIASED = 3


@dataclass(frozen=True)
class TrainConfig:
    T: int
    mask_mode: str = "biased"
    lam: float = 12.0
    batch_size: int = 16
    lr0: float = 0.01
    decay_rate: float = DECAY_RATE
    decay_every: int = DECAY_EVERY
    max_iters: int = 2000
    validate_every: int = 500
    seed: int = 0
    width_scale: Fraction = Fraction(1, 8)
    mask_cfg: masking.MaskGenConfig = field(default_factory=masking.MaskGenConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ParameterError("lr0 must be > 0")
        if self.mask_mode not in ("random", "biased"):
            raise ParameterError(f"mask_mode must be random or biased, got {self.mask_mode!r}")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.max_iters < 0 or self.validate_every < 1 or self.decay_every < 1:
            raise ParameterError("max_iters >= 0, validate_every >= 1 and decay_every >= 1 required")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ParameterError(f"iteration must be >= 0, got {iteration}")
    return cfg.lr0 * cfg.decay_rate ** (iteration // cfg.decay_every)


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    validations: list[tuple[int, str, float]] = field(default_factory=list)

    def add_step(self, it: int, lr: float, total: float, hole: float, valid: float) -> None:
        if self.steps and it <= self.steps[-1][0]:
            raise ParameterError(f"iteration {it} does not follow {self.steps[-1][0]}")
        self.steps.append((it, lr, total, hole, valid))

    def validation_curve(self, scenario: str) -> tuple[np.ndarray, np.ndarray]:
        rows = [(i, v) for i, s, v in self.validations if s == scenario]
        return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])

    def final_validation(self) -> dict[str, float]:
        if not self.validations:
            return {}
        last = self.validations[-1][0]
        return {s: v for i, s, v in self.validations if i == last}

    def write(self, steps_path, val_path=None) -> None:
        with open(steps_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "l_total", "l_hole", "l_valid"])
            for it, lr, a, b, c in self.steps:
                w.writerow([it, repr(lr), repr(a), repr(b), repr(c)])
        if val_path is not None:
            with open(val_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", "scenario", "val_l1_hole"])
                for it, name, v in self.validations:
                    w.writerow([it, name, repr(v)])

    @classmethod
    def read(cls, steps_path, val_path=None) -> "TrainLog":
        out = cls()
        with open(steps_path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.add_step(int(row["iter"]), float(row["lr"]), float(row["l_total"]),
                             float(row["l_hole"]), float(row["l_valid"]))
        if val_path is not None and Path(val_path).exists():
            with open(val_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    out.validations.append((int(row["iter"]), row["scenario"], float(row["val_l1_hole"])))
        return out


def validation_path(steps_path) -> Path:
    p = Path(steps_path)
    return p.with_name(p.stem + ".val" + p.suffix)


# -- sampling --------------------------------------------------------------

def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _STREAM_SHUFFLE, epoch]).permutation(n)


def batch_indices(seed: int, iteration: int, batch_size: int, n: int) -> list[int]:
    """Dataset indices for one iteration, read off a stream of seeded epoch shuffles."""
    out = []
    pos = iteration * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        order = _epoch_order(seed, epoch, n)
        take = min(batch_size - len(out), n - offset)
        out.extend(int(i) for i in order[offset:offset + take])
        pos += take
    return out


def iteration_masks(blocks: Sequence[np.ndarray], cfg: TrainConfig, iteration: int) -> list[masking.MaskBlock]:
    """One fresh mask per sample, reproducible from (seed, iteration, sample index)."""
    return [masking.make_mask(cfg.mask_mode, b, cfg.mask_cfg,
                              np.random.default_rng([cfg.seed, _STREAM_MASK, iteration, j]))
            for j, b in enumerate(blocks)]


def build_mask_suite(val_blocks: Sequence, seed: int,
                     cfg: masking.MaskGenConfig = masking.MaskGenConfig(),
                     extra: Mapping[str, Sequence] | None = None) -> dict[str, list[masking.MaskBlock]]:
    """Frozen validation masks: one random and one biased draw per block."""
    suite = {
        "random": [masking.make_mask("random", b, cfg, np.random.default_rng([seed, _STREAM_VAL_RANDOM, k]))
                   for k, b in enumerate(val_blocks)],
        "biased": [masking.make_mask("biased", b, cfg, np.random.default_rng([seed, _STREAM_VAL_BIASED, k]))
                   for k, b in enumerate(val_blocks)],
    }
    for name, ms in (extra or {}).items():
        suite[name] = list(ms)
    return suite


# -- prediction and validation ---------------------------------------------

def _stack(items) -> np.ndarray:
    return np.stack([np.asarray(getattr(x, "data", x), dtype=np.float32) for x in items])


def predict_blocks(model: UNetModel, blocks: Sequence, masks: Sequence, batch: int = EVAL_BATCH) -> list[np.ndarray]:
    """Raw eval-mode predictions, batched."""
    out = []
    for s in range(0, len(blocks), batch):
        x = _stack(blocks[s:s + batch])
        m = _stack(masks[s:s + batch])
        pred, _ = forward(model, Tensor(x[:, None]), m[:, None], training=False)
        out.extend(pred.data[:, 0])
    return out


def validate(model: UNetModel, val_blocks: Sequence, mask_suite: Mapping[str, Sequence]) -> dict[str, float]:
    """Pooled per-hole-voxel l1 of the composite, one score per scenario."""
    scores = {}
    for name, masks in mask_suite.items():
        if len(masks) != len(val_blocks):
            raise ShapeError(f"scenario {name!r} has {len(masks)} masks for {len(val_blocks)} blocks")
        preds = predict_blocks(model, val_blocks, masks)
        err, n = 0.0, 0
        for b, m, p in zip(val_blocks, masks, preds):
            gt = np.asarray(getattr(b, "data", b), dtype=np.float32)
            mk = np.asarray(getattr(m, "data", m))
            hole = mk == 0
            out = composite(gt, mk, p)
            err += float(np.abs(out[hole].astype(np.float64) - gt[hole]).sum())
            n += int(hole.sum())
        scores[name] = err / n if n else math.nan
    return scores


# -- training loop ---------------------------------------------------------

def _check_dataset(dataset: Sequence, T: int) -> tuple[int, int, int]:
    if not dataset:
        raise ParameterError("dataset is empty")
    shapes = {tuple(np.shape(getattr(b, "data", b))) for b in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"blocks differ in shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 3 or shape[0] != T:
        raise ShapeError(f"blocks have shape {shape}, expected T={T}")
    return shape


def train_step(model: UNetModel, x: np.ndarray, m: np.ndarray, lam: float, lr: float):
    """One Adam update on a (B, T, H, W) batch; returns (total, hole, valid) as floats."""
    params = model.store.tensors()
    with Tape() as tape:
        pred, _ = forward(model, Tensor(x[:, None]), m[:, None], training=True)
        l_total, l_hole, l_valid = loss(pred, x[:, None], m[:, None], lam)
    vals = (float(l_total.data), float(l_hole.data), float(l_valid.data))
    if not all(math.isfinite(v) for v in vals):
        return vals
    grads = tape.gradients(l_total, params)
    adam_step(model.store, {n: g for n, g in zip(model.store.params, grads)}, lr)
    return vals


def _save(model: UNetModel, path, it: int, cfg: TrainConfig) -> None:
    save_model(model, path, {"train.iter": [it], "train.seed": [cfg.seed]})


def train(dataset: Sequence, cfg: TrainConfig, val_blocks: Sequence = (),
          mask_suite: Mapping[str, Sequence] | None = None, ckpt_path=None,
          resume: bool = False, log_: TrainLog | None = None) -> tuple[UNetModel, TrainLog]:
    """Run ``cfg.max_iters`` iterations (counting those already in a resumed checkpoint).

    Validation and checkpointing happen every ``validate_every`` iterations and
    at the end. A non-finite loss writes ``<ckpt>.nan`` and raises.
    """
    _check_dataset(dataset, cfg.T)
    blocks = [np.asarray(getattr(b, "data", b), dtype=np.float32) for b in dataset]
    if mask_suite is None:
        mask_suite = build_mask_suite(val_blocks, cfg.seed, cfg.mask_cfg) if val_blocks else {}
    trace = log_ if log_ is not None else TrainLog()
    start = 0
    if resume:
        if ckpt_path is None or not Path(ckpt_path).exists():
            raise ParameterError("resume needs an existing checkpoint")
        model, extra = load_model(ckpt_path)
        if model.config.temporal_dim != cfg.T:
            raise ShapeError(f"checkpoint has T={model.config.temporal_dim}, config asks for {cfg.T}")
        start = int(extra["train.iter"][0])
        # drop anything a crashed run logged past its last checkpoint
        trace.steps = [r for r in trace.steps if r[0] < start]
        trace.validations = [r for r in trace.validations if r[0] <= start]
    else:
        model = build_unet(UNetConfig(cfg.T, cfg.width_scale), seed=cfg.seed)
    for it in range(start, cfg.max_iters):
        idx = batch_indices(cfg.seed, it, cfg.batch_size, len(blocks))
        batch = [blocks[i] for i in idx]
        masks = iteration_masks(batch, cfg, it)
        x = np.stack(batch)
        m = np.stack([mk.data for mk in masks]).astype(np.float32)
        lr = lr_at(it, cfg)
        vals = train_step(model, x, m, cfg.lam, lr)
        if not all(math.isfinite(v) for v in vals):
            if ckpt_path is not None:
                _save(model, str(ckpt_path) + ".nan", it, cfg)
            raise NumericError(f"non-finite loss {vals} at iteration {it}")
        trace.add_step(it, lr, *vals)
        done = it + 1
        if done % cfg.validate_every == 0 or done == cfg.max_iters:
            for name, v in validate(model, val_blocks, mask_suite).items():
                trace.validations.append((done, name, v))
            if ckpt_path is not None:
                _save(model, ckpt_path, done, cfg)
            log.info("iter %d lr %.5g loss %.4f hole %.4f valid %.4f", done, lr, *vals)
    return model, trace
