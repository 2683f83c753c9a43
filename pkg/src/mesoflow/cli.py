"""Command-line entry point.

Commands: ``synth``, ``train``, ``interpolate``, ``evaluate``, ``sweep``,
``inspect``.  Options resolve as defaults < config-file section < flags,
the resolved configuration is printed before any work starts, and every
command is deterministic under a fixed seed.

Exit codes: 0 success, 2 config/contract error, 3 io/data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import imagery
from .errors import (
    CheckpointError,
    ContractError,
    DivergenceError,
    FormatError,
    MesoflowError,
    ParameterError,
    ValidationError,
)
from .evaluation import (
    LinearPredictor,
    NetworkPredictor,
    compare_models,
    gap_sweep,
    reconstruct_series,
    samples_from_sequences,
    time_sweep,
    write_metrics_csv,
    write_sweep_csv,
)
from .imagery import (
    Frame,
    FrameSequence,
    SyntheticScene,
    generate_synthetic,
    read_frames,
    write_flows,
    write_frames,
)
from .networks import (
    SMALL_PLAN,
    InterpolationModel,
    load_checkpoint,
    model_spec,
    read_manifest,
    save_checkpoint,
)
from .training import LossWeights, TrainConfig, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

DEFAULTS = {
    "synth": {
        "sequences": 1,
        "frames": 15,
        "height": 64,
        "width": 64,
        "band": 13,
        "cadence_s": 60.0,
        "blobs": 25,
        "sigma_min": 3.0,
        "sigma_max": 7.0,
        "motion": "translate,rotate,ramp",
        "max_speed": 0.5,
        "translate": None,
        "rotate": None,
        "vortex": None,
        "ramp": None,
        "prefix": "seq",
    },
    "train": {
        "data": None,
        "variant": "ssm-t",
        "band": None,
        "steps": 200,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "lambda_r": 1.0,
        "lambda_w": 0.65,
        "lambda_s": 0.23,
        "sequence_length": 15,
        "input_gap_steps": 10,
        "intermediate_count": 1,
        "crop_train": None,
        "crop_source": None,
        "val_fraction": 0.2,
        "log_every": 10,
        "plan": "default",
        "resume": None,
    },
    "interpolate": {
        "input": None,
        "checkpoint": None,
        "baseline": None,
        "t": None,
        "factor": None,
    },
    "evaluate": {
        "data": None,
        "checkpoint": [],
        "t": 0.5,
        "gap_steps": 10,
        "series": None,
        "downsample": 10,
        "plots": True,
    },
    "sweep": {
        "data": None,
        "checkpoint": [],
        "axis": "t",
        "gap_steps": 10,
        "gaps_minutes": None,
        "plots": True,
    },
    "inspect": {"paths": []},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesoflow", description=__doc__)
    p.add_argument("--config", type=Path, help="YAML config file with per-command sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--log-level", choices=["debug", "info", "warn"], default="info")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--sequences", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--band", type=int)
    s.add_argument("--cadence-s", type=float, dest="cadence_s")
    s.add_argument("--blobs", type=int)
    s.add_argument("--motion", help="comma list of translate,rotate,vortex,ramp")
    s.add_argument("--max-speed", type=float, dest="max_speed")
    s.add_argument("--translate", help="vx,vy pixels/frame (fixed instead of random)")
    s.add_argument("--rotate", help="cx,cy,omega")
    s.add_argument("--vortex", help="cx,cy,strength,radius")
    s.add_argument("--ramp", help="cx,cy,radius,delta")
    s.add_argument("--prefix")

    t = sub.add_parser("train", help="train an interpolation model")
    t.add_argument("--data", type=Path)
    t.add_argument("--variant", choices=["ssm-g", "ssm-t", "ssm-tms"])
    t.add_argument("--band", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--lambda-r", type=float, dest="lambda_r")
    t.add_argument("--lambda-w", type=float, dest="lambda_w")
    t.add_argument("--lambda-s", type=float, dest="lambda_s")
    t.add_argument("--sequence-length", type=int, dest="sequence_length")
    t.add_argument("--input-gap-steps", type=int, dest="input_gap_steps")
    t.add_argument("--intermediate-count", type=int, dest="intermediate_count")
    t.add_argument("--crop-train", type=int, dest="crop_train")
    t.add_argument("--crop-source", type=int, dest="crop_source")
    t.add_argument("--val-fraction", type=float, dest="val_fraction")
    t.add_argument("--log-every", type=int, dest="log_every")
    t.add_argument("--plan", choices=["default", "small"])
    t.add_argument("--resume", type=Path)

    i = sub.add_parser("interpolate", help="interpolate frames from a pair or sequence")
    i.add_argument("--input", type=Path)
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--baseline", choices=["linear"])
    i.add_argument("--t", type=float, nargs="+")
    i.add_argument("--factor", type=int, help="k-fold temporal upsampling of the sequence")

    e = sub.add_parser("evaluate", help="compare models against ground truth")
    e.add_argument("--data", type=Path)
    e.add_argument("--checkpoint", type=Path, action="append")
    e.add_argument("--t", type=float)
    e.add_argument("--gap-steps", type=int, dest="gap_steps")
    e.add_argument("--series", help="row,col pixel: also reconstruct its 1-step time series")
    e.add_argument("--downsample", type=int, help="downsample factor for --series")
    e.add_argument("--no-plots", action="store_false", dest="plots", default=None)

    w = sub.add_parser("sweep", help="metric sweeps over t or gap")
    w.add_argument("--axis", choices=["t", "gap"])
    w.add_argument("--data", type=Path)
    w.add_argument("--checkpoint", type=Path, action="append")
    w.add_argument("--gap-steps", type=int, dest="gap_steps")
    w.add_argument("--gaps-minutes", dest="gaps_minutes", help="comma list of gaps in minutes")
    w.add_argument("--no-plots", action="store_false", dest="plots", default=None)

    n = sub.add_parser("inspect", help="print file headers and manifests")
    n.add_argument("paths", type=Path, nargs="+")
    return p


def resolve_config(args) -> dict:
    """defaults < config-file section < explicit flags; unknown keys rejected."""
    command = args.command
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file {args.config} does not exist")
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        section = loaded.get(command, {})
        if not isinstance(section, dict):
            raise ContractError(f"config section {command!r} must be a mapping")
        unknown = set(section) - set(cfg)
        if unknown:
            raise ContractError(f"unknown config keys in {command!r}: {sorted(unknown)}")
        cfg.update(section)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and val != []:
            cfg[key] = val
    cfg["seed"] = args.seed
    cfg["out"] = str(args.out)
    return cfg


def _parse_floats(text, n, what):
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != n:
        raise ContractError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return parts


def _build_scene(cfg, index: int) -> SyntheticScene:
    seed = int(cfg["seed"]) * 100003 + index
    h, w, t = int(cfg["height"]), int(cfg["width"]), int(cfg["frames"])
    prims = []
    ramps = []
    if cfg["translate"] or cfg["rotate"] or cfg["vortex"] or cfg["ramp"]:
        if cfg["translate"]:
            vx, vy = _parse_floats(cfg["translate"], 2, "--translate")
            prims.append(imagery.Translation(vx, vy))
        if cfg["rotate"]:
            cx, cy, om = _parse_floats(cfg["rotate"], 3, "--rotate")
            prims.append(imagery.Rotation((cx, cy), om))
        if cfg["vortex"]:
            cx, cy, st, ra = _parse_floats(cfg["vortex"], 4, "--vortex")
            prims.append(imagery.Vortex((cx, cy), st, ra))
        if cfg["ramp"]:
            cx, cy, ra, de = _parse_floats(cfg["ramp"], 4, "--ramp")
            ramps.append(imagery.RampEvent((cx, cy), ra, de))
    else:
        kinds = [k.strip() for k in str(cfg["motion"]).split(",") if k.strip()]
        rng = np.random.default_rng((seed, 0xA5CE))
        speed = float(cfg["max_speed"])
        if "translate" in kinds:
            ang = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0.3 * speed, speed)
            prims.append(imagery.Translation(mag * np.cos(ang), mag * np.sin(ang)))
        if "rotate" in kinds and rng.random() < 0.5:
            prims.append(
                imagery.Rotation(
                    (rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.25 * h, 0.75 * h)),
                    rng.uniform(-0.01, 0.01),
                )
            )
        if "vortex" in kinds and rng.random() < 0.5:
            prims.append(
                imagery.Vortex(
                    (rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.25 * h, 0.75 * h)),
                    rng.uniform(-1.0, 1.0) * speed * min(h, w) / 8,
                    rng.uniform(min(h, w) / 8, min(h, w) / 4),
                )
            )
        if "ramp" in kinds and rng.random() < 0.4:
            ramps.append(
                imagery.RampEvent(
                    (rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h)),
                    rng.uniform(min(h, w) / 10, min(h, w) / 5),
                    rng.uniform(-0.04, 0.04),
                )
            )
    tex = imagery.TextureParams(
        count=int(cfg["blobs"]), sigma_range=(float(cfg["sigma_min"]), float(cfg["sigma_max"]))
    )
    return SyntheticScene(
        seed=seed,
        velocity_params=tuple(prims),
        texture_params=tex,
        ramp_events=tuple(ramps),
        T=t,
        H=h,
        W=w,
        band_id=int(cfg["band"]),
        cadence_s=float(cfg["cadence_s"]),
    )


def cmd_synth(cfg) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(int(cfg["sequences"])):
        scene = _build_scene(cfg, i)
        seq, flows = generate_synthetic(scene)
        path = out / f"{cfg['prefix']}_{i:04d}.geof"
        write_frames(seq, path)
        write_flows(flows, path)
        files.append(str(path))
    manifest = {
        "sequences": len(files),
        "frames": int(cfg["frames"]),
        "size": [int(cfg["height"]), int(cfg["width"])],
        "band": int(cfg["band"]),
        "seed": int(cfg["seed"]),
        "files": files,
    }
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def _load_dataset(data_dir) -> list[FrameSequence]:
    if data_dir is None:
        raise ContractError("--data is required")
    data_dir = Path(data_dir)
    if not data_dir.exists():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    paths = sorted(data_dir.glob("*.geof"))
    if not paths:
        raise ValidationError(f"no .geof files in {data_dir}")
    return [read_frames(p) for p in paths]


def _fit_crops(cfg, seqs):
    h, w = seqs[0].shape
    side = min(h, w)
    crop_train = cfg["crop_train"]
    if crop_train is None:
        crop_train = min(side // 16 * 16, 256)
    crop_source = cfg["crop_source"]
    if crop_source is None:
        crop_source = min(side, crop_train + 8)
    return int(crop_train), int(crop_source)


def cmd_train(cfg) -> int:
    variant = cfg["variant"]
    band = cfg["band"]
    if variant in ("ssm-t", "ssm-tms") and band is None:
        raise ContractError(f"{variant} is band-specific: pass --band")
    seqs = _load_dataset(cfg["data"])
    if variant != "ssm-g":
        seqs = [s for s in seqs if s.band.band_id == int(band)]
        if not seqs:
            raise ValidationError(f"no sequences for band {band}")

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    weights = LossWeights(
        lambda_r=float(cfg["lambda_r"]),
        lambda_w=float(cfg["lambda_w"]),
        lambda_s=float(cfg["lambda_s"]),
    )
    crop_train, crop_source = _fit_crops(cfg, seqs)
    tc = TrainConfig(
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]),
        crop_source=crop_source,
        crop_train=crop_train,
        sequence_length=int(cfg["sequence_length"]),
        input_gap_steps=int(cfg["input_gap_steps"]),
        intermediate_count=int(cfg["intermediate_count"]),
        learning_rate=float(cfg["learning_rate"]),
        val_fraction=float(cfg["val_fraction"]),
        seed=int(cfg["seed"]),
        log_every=int(cfg["log_every"]),
    )

    initial_step = 0
    norm = None
    if cfg["resume"]:
        model, manifest = load_checkpoint(cfg["resume"])
        if manifest["variant"] != variant:
            raise ContractError(
                f"checkpoint variant {manifest['variant']} does not match --variant {variant}"
            )
        initial_step = int(manifest.get("steps", 0))
        norm = model.norm
    else:
        plan = SMALL_PLAN if cfg["plan"] == "small" else {}
        spec = model_spec(variant, band=None if variant == "ssm-g" else int(band), **plan)
        model = InterpolationModel(spec, seed=int(cfg["seed"]))

    ckpt_dir = out / "checkpoint"
    log_path = out / "train_log.ndjson"
    try:
        result = train(model, seqs, tc, weights=weights, norm=norm, initial_step=initial_step)
    except DivergenceError as err:
        log.error("training diverged at step %d", err.step)
        if err.last_good_state is not None:
            model.load_state_dict(err.last_good_state)
            save_checkpoint(
                model, out / "checkpoint-lastgood",
                loss_weights=dataclasses.asdict(weights), steps=err.step, seed=int(cfg["seed"]),
            )
            print(f"last-good checkpoint written to {out / 'checkpoint-lastgood'}")
        return EXIT_DIVERGED

    with log_path.open("w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")
    save_checkpoint(
        model, ckpt_dir, loss_weights=dataclasses.asdict(weights),
        steps=result.steps, seed=int(cfg["seed"]),
    )
    print(json.dumps({"checkpoint": str(ckpt_dir), "log": str(log_path), "steps": result.steps}))
    return EXIT_OK


def _load_predictor(cfg):
    if cfg["baseline"] == "linear":
        return LinearPredictor(), None
    if not cfg["checkpoint"]:
        raise ContractError("pass --checkpoint DIR or --baseline linear")
    model, manifest = load_checkpoint(cfg["checkpoint"])
    return NetworkPredictor(model), manifest


def cmd_interpolate(cfg) -> int:
    if cfg["input"] is None:
        raise ContractError("--input is required")
    seq = read_frames(cfg["input"])
    predictor, manifest = _load_predictor(cfg)
    if manifest is not None:
        scope = manifest["band_scope"]
        if scope != "all" and int(scope) != seq.band.band_id:
            raise ContractError(
                f"checkpoint is for band {scope}, input file is band {seq.band.band_id}"
            )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    band = seq.band
    written = []

    if cfg["t"]:
        i0, i1 = seq.frames[0], seq.frames[-1]
        for t in cfg["t"]:
            pred = predictor.predict(i0.pixels, i1.pixels, float(t))
            ts = i0.timestamp + float(t) * (i1.timestamp - i0.timestamp)
            frame = Frame(pixels=pred, band=band, timestamp=ts)
            path = out / f"interp_t{float(t):.3f}.geof"
            write_frames(FrameSequence(frames=(frame,)), path)
            written.append(str(path))
    elif cfg["factor"]:
        k = int(cfg["factor"])
        if k < 2:
            raise ContractError("--factor must be >= 2")
        if len(seq) < 2:
            raise ContractError("sequence needs at least 2 frames to upsample")
        frames = []
        px = seq.pixel_stack()
        ts = seq.timestamps()
        for i in range(len(seq) - 1):
            frames.append(seq.frames[i])
            for j in range(1, k):
                pred = predictor.predict(px[i], px[i + 1], j / k)
                frames.append(
                    Frame(pixels=pred, band=band, timestamp=ts[i] + (ts[i + 1] - ts[i]) * j / k)
                )
        frames.append(seq.frames[-1])
        path = out / "upsampled.geof"
        write_frames(FrameSequence(frames=tuple(frames)), path)
        written.append(str(path))
    else:
        raise ContractError("pass --t values or --factor k")
    print(json.dumps({"model": predictor.name, "files": written}))
    return EXIT_OK


def _predictors(cfg):
    preds = [LinearPredictor()]
    for path in cfg["checkpoint"] or []:
        model, _ = load_checkpoint(path)
        preds.append(NetworkPredictor(model))
    return preds


def cmd_evaluate(cfg) -> int:
    seqs = _load_dataset(cfg["data"])
    samples = samples_from_sequences(seqs, int(cfg["gap_steps"]))
    if not samples:
        raise ValidationError("dataset yields no evaluation samples")
    predictors = _predictors(cfg)
    records = compare_models(predictors, samples, t=float(cfg["t"]))
    if not records:
        raise ValidationError("no model produced metrics on this dataset")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_metrics_csv(records, out / "results.csv")
    outputs = {"csv": str(csv_path)}
    if cfg["plots"]:
        from .plots import save_comparison_plot

        outputs["plot"] = str(save_comparison_plot(records, out / "comparison.png"))

    if cfg["series"]:
        row, col = _parse_floats(cfg["series"], 2, "--series")
        series = {
            p.name: reconstruct_series(p, seqs[0], int(cfg["downsample"]), (row, col))
            for p in predictors
        }
        series_csv = out / "series.csv"
        with series_csv.open("w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            names = list(series)
            writer.writerow(["timestamp", "observed"] + names)
            first = series[names[0]]
            for k, ts in enumerate(first.timestamps):
                writer.writerow(
                    [ts, first.observed[k]] + [series[n].reconstructed[k] for n in names]
                )
        outputs["series_csv"] = str(series_csv)
        outputs["series_rmse"] = {n: s.rmse for n, s in series.items()}
        if cfg["plots"]:
            from .plots import save_series_plot

            outputs["series_plot"] = str(save_series_plot(series, out / "series.png"))
    print(json.dumps(outputs))
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    seqs = _load_dataset(cfg["data"])
    preds = _predictors(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sweeps = {}
    if cfg["axis"] == "t":
        samples = samples_from_sequences(seqs, int(cfg["gap_steps"]))
        for p in preds:
            sweeps[p.name] = time_sweep(p, samples)
        csv_path = write_sweep_csv(sweeps, out / "sweep_t.csv")
        plot_path = out / "sweep_t.png"
    else:
        gaps = None
        if cfg["gaps_minutes"]:
            gaps = [float(x) for x in str(cfg["gaps_minutes"]).split(",")]
        for p in preds:
            sweeps[p.name] = gap_sweep(p, seqs, gaps_minutes=gaps)
        csv_path = write_sweep_csv(sweeps, out / "sweep_gap.csv")
        plot_path = out / "sweep_gap.png"
    outputs = {"csv": str(csv_path)}
    if cfg["plots"]:
        from .plots import save_sweep_plot

        outputs["plot"] = str(save_sweep_plot(sweeps, plot_path))
    print(json.dumps(outputs))
    return EXIT_OK


def cmd_inspect(cfg) -> int:
    from .imagery import meta_path, read_header

    for path in cfg["paths"]:
        path = Path(path)
        info: dict = {"path": str(path)}
        if path.is_dir():
            info["manifest"] = read_manifest(path)
        else:
            info["header"] = read_header(path)
            mp = meta_path(path)
            if mp.exists():
                info["meta"] = json.loads(mp.read_text())
        print(json.dumps(info, indent=2))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=_LEVELS[args.log_level], format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(json.dumps({"command": args.command, "config": cfg}, default=str))
        np.random.seed(args.seed & 0xFFFFFFFF)
        torch.manual_seed(args.seed)
        return COMMANDS[args.command](cfg)
    except (ContractError, ParameterError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, FormatError, ValidationError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except MesoflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
