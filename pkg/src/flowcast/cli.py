"""Command-line surface: gen-data, train, forecast, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 training aborted on
a non-finite loss, 4 numerical failure during forecasting. Every command
writes a run manifest beside its outputs. FLOWCAST_NUM_THREADS caps the
BLAS/numba worker threads.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import ConditioningProvider
from .config import Config, ConfigError, RunManifest, RunTimer, file_sha256, write_run_manifest
from .dataset import DatasetWriter, open_dataset
from .diagnostics import (
    discontinuity_score,
    energy_components,
    kinetic_energy_series,
    weighted_rmse,
    write_energy_csv,
    write_jumps_csv,
    write_rmse_csv,
    write_spectrum_csv,
    zonal_power_spectrum,
)
from .grid import GridSpec, from_model_space, to_model_space
from .nn.checkpoint import checkpoint_sha256, load_checkpoint
from .nn.model import ModelConfig, NonFiniteError, VelocityModel
from .rollout import RolloutConfig, rollout
from .synthetic import SynthConfig, default_synth_registry, generate_trajectory, inject_assimilation_jumps
from .tracking import CriteriaConfig, read_reference_csv, track, write_track_csv
from .training import TrainConfig, TrainingAborted, train_stage1, train_stage2

log = logging.getLogger("flowcast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAIN_ABORT = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _cap_threads():
    cap = os.environ.get("FLOWCAST_NUM_THREADS")
    if not cap:
        return
    n = int(cap)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass
    try:
        import numba

        numba.set_num_threads(max(1, n))
    except (ImportError, ValueError):
        pass


def _manifest(args, out_dir, elapsed, inputs, outputs):
    write_run_manifest(
        out_dir,
        RunManifest(
            command=" ".join(sys.argv[1:]) or args.command,
            config_hash=file_sha256(args.config) if getattr(args, "config", None) else "",
            seed=getattr(args, "seed", None),
            inputs=inputs,
            outputs=outputs,
            code_version=__version__,
            wall_time_s=elapsed,
        ),
    )


# ---------------------------------------------------------------------------
# gen-data


def _synth_config(cfg: Config, seed: int | None, jump_eps: float | None) -> SynthConfig:
    grid = GridSpec.regular(cfg.int("n_lat", 32), cfg.int("n_lon", 64))
    start = dt.datetime.fromisoformat(cfg.str("start", "2021-01-01T00:00:00"))
    return SynthConfig(
        grid=grid,
        registry=default_synth_registry(),
        hours=cfg.int("hours", 240),
        seed=seed if seed is not None else cfg.int("seed", 0),
        advection_speed=cfg.float("advection_speed", 1.0),
        diffusion=cfg.float("diffusion", 0.004),
        forcing_amplitude=cfg.float("forcing_amplitude", 0.3),
        dt_hours=cfg.float("dt_hours", 1.0),
        jump_eps=jump_eps if jump_eps is not None else cfg.float("jump_eps", 0.0),
        jump_hours=tuple(cfg.ints("jump_hours", (9, 21))),
        start=start,
    )


def cmd_gen_data(args) -> int:
    cfg = Config.load(args.config)
    synth = _synth_config(cfg, args.seed, args.jump_eps)
    out = Path(args.out)
    with RunTimer() as timer:
        if synth.jump_eps > 0:
            clean = generate_trajectory(synth, out / "clean")
            inject_assimilation_jumps(
                clean, out, synth.jump_eps, synth.jump_hours, seed=synth.seed
            )
        else:
            generate_trajectory(synth, out)
    _manifest(args, out, timer.elapsed, {"config": str(args.config)}, {"dataset": str(out)})
    log.info("wrote %s (%d hours)", out, synth.hours)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _model_config(cfg: Config) -> ModelConfig:
    return ModelConfig(
        embed_dim=cfg.int("embed_dim", 64),
        depths=tuple(cfg.ints("depths", (2, 2, 2))),
        pressure_patch=tuple(cfg.ints("pressure_patch", (2, 4, 4))),
        surface_patch=tuple(cfg.ints("surface_patch", (4, 4))),
        window=tuple(cfg.ints("window", (2, 4, 4))),
        time_embed_dim=cfg.int("time_embed_dim", 64),
        lowrank_r=cfg.int("lowrank_r", 8),
        n_heads=cfg.int("n_heads", 4),
        cond_channels=cfg.int("cond_channels", 11),
        mlp_ratio=cfg.float("mlp_ratio", 4.0),
        dtype=cfg.str("dtype", "float32"),
    )


def _train_config(cfg: Config, stage: int, seed: int | None, ar_steps: int | None) -> TrainConfig:
    prefix = f"stage{stage}."

    def key(name, default):
        return cfg.values.get(prefix + name, cfg.values.get(name, default))

    sub = Config({**cfg.values}, cfg.source)
    return TrainConfig(
        stage=stage,
        epochs=int(key("epochs", 1)),
        batch_size=int(key("batch_size", 4)),
        lr=float(key("lr", 3e-4 if stage == 1 else 1e-6)),
        weight_decay=float(key("weight_decay", 0.1)),
        beta1=float(key("beta1", 0.9)),
        beta2=float(key("beta2", 0.95)),
        schedule=str(key("schedule", "cosine" if stage == 1 else "constant")),
        ema_decay=float(key("ema_decay", 0.999)),
        seed=seed if seed is not None else sub.int("seed", 0),
        ar_steps=ar_steps if ar_steps is not None else int(key("ar_steps", 6)),
        max_steps=(lambda v: None if v is None else int(v))(key("max_steps", None)),
        recompute_activations=str(key("recompute_activations", "false")).lower()
        in ("true", "1", "yes"),
    )


def cmd_train(args) -> int:
    if args.stage not in (1, 2):
        raise CliError(f"--stage must be 1 or 2, got {args.stage}")
    if args.stage == 2 and not args.ckpt:
        raise CliError("stage 2 requires --ckpt with the stage-1 checkpoint")
    cfg = Config.load(args.config)
    dataset = open_dataset(args.data)
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg, args.stage, args.seed, args.ar_steps)
    model = VelocityModel(model_cfg, dataset.grid, dataset.registry)
    out = Path(args.out)
    with RunTimer() as timer:
        try:
            if args.stage == 1:
                result = train_stage1(model, dataset, train_cfg, out)
            else:
                result = train_stage2(model, dataset, train_cfg, out, init_checkpoint=args.ckpt)
        except TrainingAborted as exc:
            log.error("training aborted: %s", exc)
            _manifest(args, out, 0.0, {"data": str(args.data)},
                      {"last_good_checkpoint": str(exc.checkpoint_path)})
            return EXIT_TRAIN_ABORT
    _manifest(
        args, out, timer.elapsed,
        {"data": str(args.data), "init_ckpt": str(args.ckpt or "")},
        {"checkpoint": str(result.checkpoint_path)},
    )
    log.info("finished %d steps; final loss %.6g", len(result.losses),
             result.losses[-1] if len(result.losses) else float("nan"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast


def cmd_forecast(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.norm_stats is None:
        raise CliError("checkpoint carries no normalization stats")
    dataset = open_dataset(args.data)
    if dataset.registry != ckpt.registry or dataset.grid != ckpt.grid:
        raise CliError("dataset grid/registry does not match the checkpoint")
    if args.init_time is not None:
        init_time = dt.datetime.fromisoformat(args.init_time)
        if init_time not in dataset.timestamps:
            raise CliError(f"init time {init_time} not present in {args.data}")
    else:
        init_time = dataset.timestamps[0]
    horizon = args.horizon
    try:
        roll_cfg = RolloutConfig(horizon_hours=horizon)
    except ValueError as exc:
        raise CliError(str(exc))

    model = ckpt.build_model()
    params = ckpt.ema if (ckpt.ema and not args.no_ema) else ckpt.params
    registry, grid = dataset.registry, dataset.grid
    statics = dataset.load_statics()
    cond_of = ConditioningProvider(grid, statics)
    init = to_model_space(dataset.load(init_time), registry, ckpt.norm_stats)
    calls = {"n": 0}

    def velocity(x, t, cond):
        calls["n"] += 1
        return model.forward(params, x, t, cond)

    out = Path(args.out)
    with RunTimer() as timer:
        try:
            states = rollout(velocity, init, horizon, cond_of, roll_cfg)
        except NonFiniteError as exc:
            log.error("forecast failed: %s", exc)
            return EXIT_NUMERIC
        writer = DatasetWriter(
            out, grid, registry, statics=statics or None,
            meta={
                "forecast.init_time": init_time.isoformat(),
                "forecast.horizon_hours": str(horizon),
                "forecast.checkpoint_sha256": checkpoint_sha256(args.ckpt),
                "forecast.n_model_evals": str(calls["n"]),
            },
        )
        for s in states:
            writer.add(from_model_space(s, registry, ckpt.norm_stats))
        writer.close()
    _manifest(args, out, timer.elapsed,
              {"ckpt": str(args.ckpt), "data": str(args.data)}, {"forecast": str(out)})
    log.info("wrote %d hourly states (%d model evaluations)", len(states), calls["n"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _eval_rmse(args, out: Path):
    forecast = open_dataset(args.forecast)
    truth = open_dataset(args.truth)
    channels = args.channels.split(",") if args.channels else list(forecast.registry.channel_names)
    init = dt.datetime.fromisoformat(forecast.meta["forecast.init_time"]) \
        if "forecast.init_time" in forecast.meta else forecast.timestamps[0] - dt.timedelta(hours=1)
    rows = []
    for ts in forecast.timestamps:
        if ts not in set(truth.timestamps):
            continue
        f = forecast.load(ts)
        t = truth.load(ts)
        lead = (ts - init).total_seconds() / 3600.0
        for ch in channels:
            rows.append((lead, ch, weighted_rmse(f, t, ch, forecast.grid, forecast.registry)))
    if not rows:
        raise CliError("forecast and truth share no timestamps")
    write_rmse_csv(out / "rmse.csv", rows)


def _eval_spectrum(args, out: Path):
    ds = open_dataset(args.forecast or args.truth)
    channels = args.channels.split(",") if args.channels else list(ds.registry.channel_names)
    leads = [int(h) for h in args.lead_hours.split(",")] if args.lead_hours else None
    init = dt.datetime.fromisoformat(ds.meta["forecast.init_time"]) \
        if "forecast.init_time" in ds.meta else ds.timestamps[0]
    rows = []
    for ts in ds.timestamps:
        lead = (ts - init).total_seconds() / 3600.0
        if leads is not None and int(lead) not in leads:
            continue
        state = ds.load(ts)
        for ch in channels:
            spec = zonal_power_spectrum(
                state.values[ds.registry.channel_index(ch)], ds.grid
            )
            rows.extend(
                (int(m), e, lead / 24.0, ch) for m, e in zip(spec.wavenumbers, spec.energy)
            )
    write_spectrum_csv(out / "spectrum.csv", rows)


def _eval_energy(args, out: Path):
    ds = open_dataset(args.forecast or args.truth)
    try:
        budgets = [energy_components(s, ds.grid, ds.registry) for s in ds.iter_states()]
    except ValueError as exc:
        raise CliError(str(exc))
    write_energy_csv(out / "energy.csv", budgets)


def _eval_jumps(args, out: Path):
    ds = open_dataset(args.forecast or args.truth)
    try:
        timestamps, values = kinetic_energy_series(ds)
        hours = [ts.hour for ts in timestamps]
        result = discontinuity_score(hours, values)
    except ValueError as exc:
        raise CliError(str(exc))
    write_jumps_csv(out / "jumps.csv", timestamps, result)
    return result


def _eval_track(args, out: Path):
    if args.init_lat is None or args.init_lon is None:
        raise CliError("track evaluation needs --init-lat and --init-lon")
    ds = open_dataset(args.forecast)
    states = [ds.load(ts) for ts in ds.timestamps if ts.hour % 6 == 0]
    statics = ds.load_statics()
    try:
        trk = track(
            states, ds.grid, ds.registry, (args.init_lat, args.init_lon),
            CriteriaConfig(), land_mask=statics.get("LAND_MASK"),
        )
    except ValueError as exc:
        raise CliError(str(exc))
    reference = read_reference_csv(args.reference) if args.reference else None
    write_track_csv(out / "track.csv", args.storm_id, trk, reference)


def cmd_evaluate(args) -> int:
    kinds = {
        "rmse": _eval_rmse,
        "spectrum": _eval_spectrum,
        "energy": _eval_energy,
        "jumps": _eval_jumps,
        "track": _eval_track,
    }
    if args.kind not in kinds:
        raise CliError(f"--kind must be one of {sorted(kinds)}")
    if args.kind == "rmse" and (not args.forecast or not args.truth):
        raise CliError("rmse evaluation needs --forecast and --truth")
    if not args.forecast and not args.truth:
        raise CliError("evaluation needs --forecast or --truth")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunTimer() as timer:
        kinds[args.kind](args, out)
    _manifest(args, out, timer.elapsed,
              {"forecast": str(args.forecast or ""), "truth": str(args.truth or "")},
              {"csv_dir": str(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Continuous-time hourly forecasting on gridded fields",
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic hourly dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jump-eps", type=float, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train stage 1 (6-hour pairs) or stage 2 (hourly rollouts)")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None, help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ar-steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("forecast", help="roll a checkpoint forward from an initial state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the initial state")
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, default=120)
    p.add_argument("--init-time", default=None)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("evaluate", help="emit diagnostic CSVs")
    p.add_argument("--kind", required=True)
    p.add_argument("--forecast", default=None)
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", default=None)
    p.add_argument("--lead-hours", default=None)
    p.add_argument("--init-lat", type=float, default=None)
    p.add_argument("--init-lon", type=float, default=None)
    p.add_argument("--reference", default=None)
    p.add_argument("--storm-id", default="storm")
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _cap_threads()
    try:
        return args.fn(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
