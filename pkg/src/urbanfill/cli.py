"""Command-line front end: every pipeline stage as a file-in/file-out subcommand.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, data, evaluation, formats, gradchecks, masking, plotting, train
from .errors import NumericError, ParameterError, ShapeError, UrbanFillError
from .nn import composite, load_model, unet_forward

log = logging.getLogger("urbanfill")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    subcommand: str
    flags: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    results: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = formats.file_digest(path)

    def write(self, path) -> None:
        body = {
            "subcommand": self.subcommand,
            "flags": self.flags,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.results,
            "wall_time_s": round(self.wall_time_s, 3),
        }
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def manifest_path(primary_output) -> Path:
    return Path(str(primary_output) + ".manifest.json")


# -- helpers ---------------------------------------------------------------

def _fraction(text: str) -> Fraction:
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}") from exc
    if f <= 0:
        raise argparse.ArgumentTypeError("width scale must be > 0")
    return f


def _timestamp(text: str) -> datetime:
    try:
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad timestamp {text!r}") from exc


def _series_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.glob("*.ugb"))
        if not files:
            raise ParameterError(f"{path}: no .ugb files")
        return files
    return [path]


def _png_path(path) -> Path:
    p = Path(path)
    return p.with_suffix(".png") if p.suffix else Path(str(p) + ".png")


# -- subcommands -----------------------------------------------------------

def cmd_synth(args, man: RunManifest):
    if args.spec:
        man.add_input(args.spec)
        spec = data.city_spec_from_pairs(formats.read_kv(args.spec)).with_seed(args.seed)
    else:
        spec = data.default_city(grid=args.grid, seed=args.seed)
    series = data.generate_synthetic(spec, args.days, args.start)
    data.write_grid(args.output, series)
    if args.png:
        plotting.heatmap_png(_png_path(args.output), series.frames.mean(axis=0), "mean count")
        return [args.output, formats.sidecar_path(args.output), _png_path(args.output)]
    return [args.output, formats.sidecar_path(args.output)]


def cmd_rasterize(args, man: RunManifest):
    man.add_input(args.events)
    man.add_input(args.region)
    region = data.RegionSpec.from_pairs(formats.read_kv(args.region))
    with open(args.events, newline="") as fh:
        parsed = data.parse_events(fh)
    res = data.rasterize(parsed.records, region, args.start, args.frames)
    data.write_grid(args.output, res.series)
    man.results.update(skipped=parsed.skipped, dropped=res.dropped)
    return [args.output, formats.sidecar_path(args.output)]


def cmd_chunk(args, man: RunManifest):
    man.add_input(args.input)
    blocks = data.chunk_series(formats.read_ugb(args.input).astype(np.float32), args.t)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, b in enumerate(blocks):
        p = out / f"block_{i:05d}.ugb"
        formats.write_ugb(p, b.data)
        paths.append(p)
    man.results["blocks"] = len(blocks)
    return paths


def cmd_mask(args, man: RunManifest):
    man.add_input(args.input)
    block = formats.read_ugb(args.input)
    if args.mode == "scenario":
        if not args.scenario_mask:
            raise UsageError("mask --mode scenario needs --scenario-mask")
        man.add_input(args.scenario_mask)
        sm = masking.load_scenario_mask(args.scenario_mask, block.shape[0])
        if sm.mask.shape != block.shape:
            raise ShapeError(f"scenario mask {sm.mask.shape} does not match block {block.shape}")
        mask = sm.mask
        man.results["hole_ratio"] = sm.hole_ratio
    else:
        cfg = masking.MaskGenConfig()
        if args.config:
            man.add_input(args.config)
            cfg = masking.MaskGenConfig.from_pairs(formats.read_kv(args.config))
        mask = masking.make_mask(args.mode, block, cfg, np.random.default_rng(args.seed))
    formats.write_ugb(args.output, mask.data)
    man.results["holes"] = mask.n_hole
    return [args.output]


def cmd_scenarios(args, man: RunManifest):
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, frame in masking.scenario_analogs(args.grid).items():
        mp, sp = out / f"{name}.ugb", out / f"{name}.txt"
        formats.write_ugb(mp, frame[None])
        formats.write_kv(sp, [("name", name), ("mask", mp.name), ("start", args.start), ("end", args.end)])
        man.results[name] = masking.hole_ratio(frame)
        paths += [mp, sp]
    union = np.min(np.stack(list(masking.scenario_analogs(args.grid).values())), axis=0)
    plotting.heatmap_png(out / "scenarios.png", 1 - union.astype(np.float64), "scenario holes")
    return paths + [out / "scenarios.png"]


def _train_blocks(path: Path, T: int, man: RunManifest) -> list[data.GridBlock]:
    blocks = []
    for f in _series_files(path):
        man.add_input(f)
        blocks.extend(data.chunk_series(formats.read_ugb(f).astype(np.float32), T))
    return blocks


def cmd_train(args, man: RunManifest):
    blocks = _train_blocks(Path(args.data), args.t, man)
    n_val = math.ceil(len(blocks) * args.val_fraction) if args.val_fraction > 0 else 0
    if n_val >= len(blocks):
        raise ParameterError(f"validation split leaves no training blocks ({len(blocks)} blocks)")
    train_set, val_set = blocks[:len(blocks) - n_val], blocks[len(blocks) - n_val:]
    mcfg = masking.MaskGenConfig()
    if args.mask_config:
        man.add_input(args.mask_config)
        mcfg = masking.MaskGenConfig.from_pairs(formats.read_kv(args.mask_config))
    cfg = train.TrainConfig(T=args.t, mask_mode=args.mask_mode, lam=args.lam, batch_size=args.batch_size,
                            lr0=args.lr, max_iters=args.iters, validate_every=args.validate_every,
                            seed=args.seed, width_scale=args.width_scale, mask_cfg=mcfg)
    val_log = train.validation_path(args.log)
    prior = None
    if args.resume:
        man.add_input(args.output)
        prior = train.TrainLog.read(args.log, val_log)
    _, trace = train.train(train_set, cfg, val_set, ckpt_path=args.output, resume=args.resume, log_=prior)
    trace.write(args.log, val_log)
    outs = [args.output, str(args.output) + ".cfg", args.log, val_log]
    if trace.validations:
        curves = {s: trace.validation_curve(s) for s in dict.fromkeys(s for _, s, _ in trace.validations)}
        plotting.convergence_png(_png_path(val_log), curves)
        outs.append(_png_path(val_log))
        man.results["final_validation"] = trace.final_validation()
    man.results["train_blocks"] = len(train_set)
    man.results["val_blocks"] = len(val_set)
    return outs


def _impute_with_model(model, block: np.ndarray, mask: np.ndarray) -> np.ndarray:
    T = model.config.temporal_dim
    if block.shape[0] % T:
        raise ShapeError(f"{block.shape[0]} frames is not a multiple of the model's T={T}")
    out = np.empty(block.shape, dtype=np.float32)
    for s in range(0, block.shape[0], T):
        b, m = block[s:s + T], mask[s:s + T]
        out[s:s + T] = composite(b, m, unet_forward(model, b, m))
    return out


def cmd_impute(args, man: RunManifest):
    for p in (args.ckpt, args.input, args.mask):
        man.add_input(p)
    model, _ = load_model(args.ckpt)
    block = formats.read_ugb(args.input).astype(np.float32)
    mask = formats.read_ugb(args.mask)
    if mask.shape != block.shape:
        raise ShapeError(f"mask {mask.shape} does not match input {block.shape}")
    out = _impute_with_model(model, block, mask)
    formats.write_ugb(args.output, out)
    return [args.output]


def cmd_eval(args, man: RunManifest):
    for p in (args.pred, args.gt, args.mask):
        man.add_input(p)
    pred, gt, mask = formats.read_ugb(args.pred), formats.read_ugb(args.gt), formats.read_ugb(args.mask)
    if not (pred.shape == gt.shape == mask.shape):
        raise ShapeError(f"shape mismatch: {pred.shape}, {gt.shape}, {mask.shape}")
    T = args.t or pred.shape[0]
    if pred.shape[0] % T:
        raise ShapeError(f"{pred.shape[0]} frames is not a multiple of T={T}")
    cut = lambda a: [a[s:s + T] for s in range(0, a.shape[0], T)]
    report = evaluation.evaluate_blocks(cut(pred), cut(gt), cut(mask), args.peak)
    report.write_csv(args.output)
    man.results.update(report.means())
    return [args.output]


def _imputer_for(args, man: RunManifest, series: data.GridSeries):
    if args.ckpt:
        man.add_input(args.ckpt)
        model, _ = load_model(args.ckpt)
        return evaluation.model_imputer(model), model.config.temporal_dim, "model"
    T = args.t or 1
    b = args.baseline
    if b == "mean":
        if not args.train:
            raise UsageError("--baseline mean needs --train")
        man.add_input(args.train)
        table = baselines.fit_global_mean(data.read_series(args.train))
        return evaluation.mean_imputer(table), T, b
    if b in ("nn2", "nn3"):
        return evaluation.nn_imputer(int(b[-1])), T, b
    cfg = baselines.RbfConfig(sample_count=args.rbf_samples, seed=args.seed)
    return evaluation.rbf_imputer(int(b[-1]), cfg), T, b


def cmd_scenario(args, man: RunManifest):
    if bool(args.ckpt) == bool(args.baseline):
        raise UsageError("scenario needs exactly one of --ckpt or --baseline")
    man.add_input(args.series)
    man.add_input(args.scenario)
    series = data.read_series(args.series)
    spec = evaluation.ScenarioSpec.from_pairs(formats.read_kv(args.scenario))
    mask_path = Path(spec.mask_path)
    if not mask_path.is_absolute():
        mask_path = Path(args.scenario).parent / mask_path
    man.add_input(mask_path)
    imputer, T, label = _imputer_for(args, man, series)
    frame_mask = formats.read_ugb(mask_path)[0]
    res = evaluation.scenario_run(imputer, series, spec, T, mask=frame_mask)
    res.write_csv(args.output)
    plotting.scenario_png(_png_path(args.output), res.frame_index, res.gt_mean, {label: res.pred_mean}, spec.name)
    man.results["avg_abs_error"] = res.avg_abs_error
    print(f"{spec.name}\t{label}\tavg_abs_error={res.avg_abs_error:.6g}")
    return [args.output, _png_path(args.output)]


def cmd_errmap(args, man: RunManifest):
    if not (len(args.preds) == len(args.gts) == len(args.masks)):
        raise UsageError("--preds, --gts and --masks need the same number of files")
    for p in args.preds + args.gts + args.masks:
        man.add_input(p)
    load = lambda ps: [formats.read_ugb(p) for p in ps]
    emap = evaluation.spatial_error_map(load(args.preds), load(args.gts), load(args.masks))
    parts = args.output.split(",")
    ugb = parts[0]
    ppm = parts[1] if len(parts) > 1 else str(Path(ugb).with_suffix(".ppm"))
    emap.save(ugb, ppm)
    plotting.error_map_png(_png_path(ugb), emap.values)
    man.results["max_abs"] = float(np.abs(emap.values).max())
    return [ugb, ppm, _png_path(ugb)]


def cmd_gradcheck(args, man: RunManifest):
    reports = gradchecks.run_suite(args.seed)
    failed = []
    for name, rep in reports.items():
        print(f"{name}\t{rep}")
        man.results[name] = rep.max_rel_error
        if not rep.passed:
            failed.append(name)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write("case,passed,max_rel_error,n_checked\n")
            for name, rep in reports.items():
                fh.write(f"{name},{int(rep.passed)},{rep.max_rel_error!r},{rep.n_checked}\n")
    if failed:
        raise NumericError(f"gradient check failed: {', '.join(failed)}")
    return [args.output] if args.output else []


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="urbanfill", description="Partial-convolution imputation of urban activity grids.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic city series")
    s.add_argument("--spec", help="key=value city spec")
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--start", type=_timestamp, default=datetime(2016, 1, 1))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--png", action="store_true", help="also render the mean-count heatmap")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rasterize", help="bin event records into hourly frames")
    s.add_argument("--events", required=True)
    s.add_argument("--region", required=True)
    s.add_argument("--start", type=_timestamp, required=True)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_rasterize, seed=None)

    s = sub.add_parser("chunk", help="split a series into T-frame blocks")
    s.add_argument("--input", required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_chunk, seed=None)

    s = sub.add_parser("mask", help="generate a hole mask for a block")
    s.add_argument("--mode", choices=("random", "biased", "scenario"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--scenario-mask")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("scenarios", help="write the five built-in scenario masks and specs")
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--start", type=int, default=0, help="first frame of the replay period")
    s.add_argument("--end", type=int, required=True, help="end frame (exclusive) of the replay period")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_scenarios, seed=None)

    s = sub.add_parser("train", help="train a partial-convolution U-Net")
    s.add_argument("--data", required=True, help="series file or directory of .ugb series")
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--mask-mode", choices=("random", "biased"), default="biased")
    s.add_argument("--mask-config")
    s.add_argument("--lambda", dest="lam", type=float, default=12.0)
    s.add_argument("--iters", type=int, required=True)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--validate-every", type=int, default=500)
    s.add_argument("--val-fraction", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width-scale", type=_fraction, default=Fraction(1, 8))
    s.add_argument("--resume", action="store_true")
    s.add_argument("-o", "--output", required=True, help="checkpoint path")
    s.add_argument("--log", required=True, help="per-iteration CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("impute", help="fill holes with a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_impute, seed=None)

    s = sub.add_parser("eval", help="score predictions on hole voxels")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--t", type=int, help="frames per scored block (default: whole file)")
    s.add_argument("--peak", type=float, help="SSIM range and PSNR peak (default: max of gt)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_eval, seed=None)

    s = sub.add_parser("scenario", help="replay a static mask over a period")
    s.add_argument("--ckpt")
    s.add_argument("--baseline", choices=("mean", "nn2", "nn3", "rbf2", "rbf3"))
    s.add_argument("--train", help="training series for the mean baseline")
    s.add_argument("--series", required=True)
    s.add_argument("--scenario", required=True, help="key=value file: name, mask, start, end")
    s.add_argument("--t", type=int, help="block length for baselines (default 1)")
    s.add_argument("--rbf-samples", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("errmap", help="aggregate signed hole errors per cell")
    s.add_argument("--preds", nargs="+", required=True)
    s.add_argument("--gts", nargs="+", required=True)
    s.add_argument("--masks", nargs="+", required=True)
    s.add_argument("-o", "--output", required=True, help="map.ugb or map.ugb,map.ppm")
    s.set_defaults(func=cmd_errmap, seed=None)

    s = sub.add_parser("gradcheck", help="finite-difference check of the autodiff kernels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", help="optional CSV report")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _flags(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, (Fraction, datetime, Path)):
            v = str(v)
        out[k] = v
    return out


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command, _flags(args), getattr(args, "seed", None))
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            outputs = args.func(args, man)
    except UsageError as exc:
        print(f"urbanfill {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UrbanFillError as exc:
        print(f"urbanfill {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, EOFError) as exc:
        print(f"urbanfill {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    man.wall_time_s = time.perf_counter() - t0
    outputs = [str(o) for o in outputs]
    man.outputs = {o: formats.file_digest(o) for o in outputs if Path(o).is_file()}
    anchor = getattr(args, "output", None) or f"urbanfill-{args.command}"
    anchor = anchor.split(",")[0]
    man.write(manifest_path(anchor))
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(dispatch(argv))
