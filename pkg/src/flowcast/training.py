"""Two-stage training: velocity regression on 6-hour pairs, then rollout
fine-tuning on hourly sequences through the Euler solver.

Stage 1 regresses the network onto the 6-hour state difference along the
linear data-to-data path, weighted per latitude (cell area), per channel
(pressure-level proxy), and per variable (inverse variance of the 6-hour
temporal difference). Stage 2 unrolls hourly Euler blocks, scores every
lead hour against truth with an additional lead-time weight
``(1 + tau/24)^(-1/2)``, and backpropagates through the whole chain.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditioningProvider
from .dataset import Dataset
from .grid import (
    GridSpec,
    NormStats,
    StateField,
    VariableRegistry,
    compute_norm_stats,
    latitude_weights,
    to_model_space,
    transform_state,
)
from .nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn.model import VelocityModel

log = logging.getLogger(__name__)

SYNOPTIC_HOURS = (0, 6, 12, 18)


def lead_time_weight(tau_hours) -> np.ndarray | float:
    """Lead-time weight (1 + tau/24)^(-1/2); tau in hours."""
    return (1.0 + np.asarray(tau_hours, dtype=np.float64) / 24.0) ** -0.5


def compute_w_var(states_6h: list[StateField], registry: VariableRegistry | None = None) -> np.ndarray:
    """Inverse variance of the 6-hour temporal difference, per channel.

    Computed over all consecutive 6-hour pairs and grid points (population
    variance, normalized space). A channel without temporal variability
    raises, naming the channel.
    """
    by_time = {s.timestamp: s for s in states_6h}
    diffs = []
    for ts, s in by_time.items():
        nxt = by_time.get(ts + dt.timedelta(hours=6))
        if nxt is not None:
            diffs.append(nxt.values.astype(np.float64) - s.values.astype(np.float64))
    if len(diffs) < 2:
        raise ValueError("need at least 2 six-hour pairs to estimate difference variance")
    stack = np.stack(diffs)
    var = stack.var(axis=(0, 2, 3))
    if np.any(var <= 0):
        bad = int(np.nonzero(var <= 0)[0][0])
        name = registry.channel_names[bad] if registry is not None else f"channel {bad}"
        raise ValueError(f"zero 6-hour difference variance in {name}")
    return 1.0 / var


def level_weights(registry: VariableRegistry) -> np.ndarray:
    """Per-channel level weight: pressure channels carry their level divided
    by the mean used level (a density proxy that down-weights high levels),
    surface channels carry 1; the whole vector is normalized to unit mean."""
    w = np.ones(registry.n_channels)
    if registry.levels:
        mean_p = float(np.mean(registry.levels))
        levels = registry.channel_levels()
        mask = ~np.isnan(levels)
        w[mask] = levels[mask] / mean_p
    return w / w.mean()


@dataclass(frozen=True)
class WeightScheme:
    """The loss weights: per-latitude area, per-channel level, per-channel
    inverse difference variance, plus the lead-time weight function."""

    w_lat: np.ndarray
    w_lev: np.ndarray
    w_var: np.ndarray

    def __post_init__(self):
        if not (np.all(self.w_var > 0) and np.all(np.isfinite(self.w_var))):
            raise ValueError("w_var must be finite and positive")

    w_tau = staticmethod(lead_time_weight)

    @classmethod
    def build(cls, grid: GridSpec, registry: VariableRegistry, states_6h: list[StateField]):
        return cls(
            w_lat=latitude_weights(grid),
            w_lev=level_weights(registry),
            w_var=compute_w_var(states_6h, registry),
        )

    @classmethod
    def uniform(cls, n_channels: int, n_lat: int):
        return cls(np.ones(n_lat), np.ones(n_channels), np.ones(n_channels))

    def combined(self) -> np.ndarray:
        """Broadcastable (C, H, 1) product of the spatial/channel weights."""
        return (self.w_lev * self.w_var)[:, None, None] * self.w_lat[None, :, None]


def stage1_loss(v_pred, x_k, x_k6, weights: WeightScheme):
    """Weighted mean-square error of the velocity against the 6-hour
    difference. Returns (loss, grad wrt v_pred)."""
    if v_pred.shape != x_k.shape or x_k.shape != x_k6.shape:
        raise ValueError("velocity and states must share a shape")
    w = weights.combined()
    if w.shape[0] != v_pred.shape[0] or w.shape[1] != v_pred.shape[1]:
        raise ValueError(
            f"weights cover {w.shape[:2]} channels/latitudes, state is {v_pred.shape}"
        )
    resid = v_pred - (x_k6 - x_k)
    loss = float(np.mean(w * resid.astype(np.float64) ** 2))
    grad = (2.0 / v_pred.size) * (w * resid.astype(np.float64))
    return loss, grad.astype(v_pred.dtype)


def stage2_loss(forecasts, truths, weights: WeightScheme, lead_hours=None):
    """Sum over lead hours of the lead-time-weighted spatial MSE.

    Returns (loss, per-forecast gradients). Lead hours default to 1..T.
    """
    if len(forecasts) != len(truths):
        raise ValueError(f"{len(forecasts)} forecasts vs {len(truths)} truths")
    if lead_hours is None:
        lead_hours = list(range(1, len(forecasts) + 1))
    w = weights.combined()
    loss = 0.0
    grads = []
    for fc, tr, tau in zip(forecasts, truths, lead_hours):
        wt = float(lead_time_weight(tau))
        resid = fc - tr
        loss += wt * float(np.mean(w * resid.astype(np.float64) ** 2))
        grads.append((wt * 2.0 / fc.size * (w * resid.astype(np.float64))).astype(fc.dtype))
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer / EMA


@dataclass
class EMAState:
    shadow: dict[str, np.ndarray]
    decay: float

    @classmethod
    def from_params(cls, params, decay=0.999):
        return cls({k: v.copy() for k, v in params.items()}, decay)


def ema_update(ema: EMAState, params: dict[str, np.ndarray]) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    d = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow shape mismatch for {name}")
        s *= d
        s += (1.0 - d) * p
    return ema


class AdamW:
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params, weight_decay=0.1, beta1=0.9, beta2=0.95, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0

    def update(self, params, grads, lr):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p -= (lr * ((m / c1) / denom + self.weight_decay * p)).astype(p.dtype)

    def state(self):
        return {"step": self.step, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.step = int(state["step"])
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 1
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    schedule: str = "cosine"
    ema_decay: float = 0.999
    seed: int = 0
    ar_steps: int = 6
    max_steps: int | None = None
    recompute_activations: bool = False
    cond_time_follows_flow: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage == 2 and self.ar_steps % 6 != 0:
            raise ValueError("stage-2 ar_steps must be a multiple of 6")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: np.ndarray
    aborted: bool = False


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint_path):
        super().__init__(message)
        self.checkpoint_path = Path(checkpoint_path)


def prepare_normalization(dataset: Dataset) -> NormStats:
    """Normalization stats from the 6-hour view of a dataset (TP channels
    transformed first)."""
    ds6 = dataset.subset_hours(SYNOPTIC_HOURS)
    states = [transform_state(s, dataset.registry) for s in ds6.iter_states()]
    return compute_norm_stats(states, dataset.registry)


def _load_normalized(dataset: Dataset, stats: NormStats, timestamps, dtype):
    out = {}
    for ts in timestamps:
        s = to_model_space(dataset.load(ts), dataset.registry, stats)
        out[ts] = np.ascontiguousarray(s.values, dtype=dtype)
    return out


def _grad_norm(grads) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(sq)


class _MetricsLog:
    def __init__(self, path: Path, resume: bool):
        self.path = path
        mode = "a" if (resume and path.exists()) else "w"
        self._fh = open(path, mode, newline="")
        self._writer = csv.writer(self._fh)
        if mode == "w":
            self._writer.writerow(["step", "loss", "lr", "grad_norm"])

    def row(self, step, loss, lr, grad_norm):
        self._writer.writerow([step, repr(float(loss)), repr(float(lr)), repr(float(grad_norm))])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _save(out_dir, name, model, params, ema, opt, rng, stats, meta):
    return save_checkpoint(
        out_dir / name,
        config=model.config,
        grid=model.grid,
        registry=model.registry,
        params=params,
        ema=ema.shadow,
        opt=opt.state(),
        rng_state=rng.bit_generator.state,
        norm_stats=stats,
        meta=meta,
    )


def sample_stage1_pairs(dataset6h: Dataset):
    """Start timestamps of valid 6-hour training pairs (both ends present and
    on the 00/06/12/18 UTC cycle); unmatched timestamps are skipped with a log
    message."""
    have = set(dataset6h.timestamps)
    pairs = []
    for ts in dataset6h.timestamps:
        if ts.hour not in SYNOPTIC_HOURS:
            continue
        nxt = ts + dt.timedelta(hours=6)
        if nxt in have:
            pairs.append(ts)
        else:
            log.info("skipping %s: no state 6 h later", ts)
    return pairs


def train_stage1(
    model: VelocityModel,
    dataset: Dataset,
    config: TrainConfig,
    out_dir,
    stats: NormStats | None = None,
    weights: WeightScheme | None = None,
    resume=None,
) -> TrainResult:
    """Velocity regression on 6-hour pairs with flow time drawn uniformly.

    The intermediate state is the linear interpolant between the pair, the
    regression target its difference. Deterministic given the seed; saves a
    resumable checkpoint per epoch plus ``checkpoint.zip`` at the end.
    """
    if config.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds6 = dataset.subset_hours(SYNOPTIC_HOURS)
    stats = stats or prepare_normalization(dataset)
    if weights is None:
        states6 = [to_model_space(s, dataset.registry, stats) for s in ds6.iter_states()]
        weights = WeightScheme.build(dataset.grid, dataset.registry, states6)
    pairs = sample_stage1_pairs(ds6)
    if not pairs:
        raise ValueError("dataset contains no 6-hour training pairs")
    cache = _load_normalized(dataset, stats, ds6.timestamps, model.config.np_dtype)
    cond_of = ConditioningProvider(dataset.grid, dataset.load_statics())

    def batch_loss_and_grads(rng, params):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        ts_batch = [pairs[i] for i in idx]
        t_batch = rng.uniform(0.0, 1.0, size=config.batch_size)
        total = 0.0
        acc = None
        for ts, t in zip(ts_batch, t_batch):
            x_k = cache[ts]
            x_k6 = cache[ts + dt.timedelta(hours=6)]
            t = float(t)
            x_t = (1.0 - t) * x_k + t * x_k6
            when = ts + dt.timedelta(hours=6.0 * t) if config.cond_time_follows_flow else ts
            cond = cond_of(when)
            v, fwd_cache = model.forward(params, x_t, t, cond, want_cache=True)
            loss, gv = stage1_loss(v, x_k, x_k6, weights)
            grads, _ = model.backward(params, fwd_cache, gv)
            total += loss
            acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
        scale = 1.0 / config.batch_size
        return total * scale, {k: v * scale for k, v in acc.items()}

    return _run_loop(model, config, out_dir, stats, batch_loss_and_grads,
                     steps_per_epoch=max(1, len(pairs) // config.batch_size),
                     init_params=None, resume=resume, stage_meta={"stage": "1"})


def _stage2_windows(timestamps, ar_steps):
    have = set(timestamps)
    starts = []
    for ts in timestamps:
        if all(ts + dt.timedelta(hours=h) in have for h in range(1, ar_steps + 1)):
            starts.append(ts)
    return starts


def train_stage2(
    model: VelocityModel,
    dataset: Dataset,
    config: TrainConfig,
    out_dir,
    init_checkpoint: Checkpoint | str | Path | None = None,
    stats: NormStats | None = None,
    weights: WeightScheme | None = None,
    resume=None,
) -> TrainResult:
    """Rollout fine-tuning on hourly sequences through the Euler chain.

    Gradients flow through every Euler step (full backprop through time);
    with ``recompute_activations`` the per-step caches are rebuilt during the
    backward pass instead of stored. Without an initial checkpoint the model
    trains from scratch on hourly data (the single-stage baseline).
    """
    if config.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_params = None
    if init_checkpoint is not None:
        ckpt = (
            init_checkpoint
            if isinstance(init_checkpoint, Checkpoint)
            else load_checkpoint(init_checkpoint)
        )
        init_params = {k: v.copy() for k, v in ckpt.params.items()}
        if stats is None:
            stats = ckpt.norm_stats
    stats = stats or prepare_normalization(dataset)
    if weights is None:
        ds6 = dataset.subset_hours(SYNOPTIC_HOURS)
        states6 = [to_model_space(s, dataset.registry, stats) for s in ds6.iter_states()]
        weights = WeightScheme.build(dataset.grid, dataset.registry, states6)
    starts = _stage2_windows(dataset.timestamps, config.ar_steps)
    if not starts:
        raise ValueError(f"no {config.ar_steps}-hour hourly windows in the dataset")
    cache = _load_normalized(dataset, stats, dataset.timestamps, model.config.np_dtype)
    cond_of = ConditioningProvider(dataset.grid, dataset.load_statics())
    delta = 1.0 / 6.0
    T = config.ar_steps

    def window_grads(params, ts0):
        truths = [cache[ts0 + dt.timedelta(hours=h)] for h in range(T + 1)]
        xs = [truths[0]]
        step_caches = []
        step_inputs = []
        x = truths[0]
        for n in range(T):
            t_n = (n % 6) * delta
            cond = cond_of(ts0 + dt.timedelta(hours=n))
            if config.recompute_activations:
                v = model.forward(params, x, t_n, cond)
                step_inputs.append((x, t_n, cond))
            else:
                v, c = model.forward(params, x, t_n, cond, want_cache=True)
                step_caches.append(c)
                step_inputs.append((x, t_n, cond))
            x = x + delta * v
            xs.append(x)
        loss, gloss = stage2_loss(xs[1:], truths[1:], weights)
        grads = None
        gx = np.zeros_like(x)
        for n in reversed(range(T)):
            gx = gx + gloss[n]
            if config.recompute_activations:
                xin, t_n, cond = step_inputs[n]
                _, c = model.forward(params, xin, t_n, cond, want_cache=True)
            else:
                c = step_caches[n]
            pgrads, gxin = model.backward(params, c, delta * gx)
            grads = pgrads if grads is None else {k: grads[k] + pgrads[k] for k in grads}
            gx = gx + gxin
        return loss, grads

    def batch_loss_and_grads(rng, params):
        idx = rng.integers(0, len(starts), size=config.batch_size)
        total = 0.0
        acc = None
        for i in idx:
            loss, grads = window_grads(params, starts[i])
            total += loss
            acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
        scale = 1.0 / config.batch_size
        return total * scale, {k: v * scale for k, v in acc.items()}

    return _run_loop(model, config, out_dir, stats, batch_loss_and_grads,
                     steps_per_epoch=max(1, len(starts) // config.batch_size),
                     init_params=init_params, resume=resume, stage_meta={"stage": "2"})


def _run_loop(model, config, out_dir, stats, batch_fn, steps_per_epoch,
              init_params, resume, stage_meta):
    rng = np.random.default_rng(config.seed)
    params = init_params if init_params is not None else model.init_params(config.seed)
    ema = EMAState.from_params(params, config.ema_decay)
    opt = AdamW(params, config.weight_decay, config.beta1, config.beta2)
    start_step = 0
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    if resume is not None:
        ck = load_checkpoint(resume)
        params = {k: v.copy() for k, v in ck.params.items()}
        ema = EMAState(shadow={k: v.copy() for k, v in ck.ema.items()}, decay=config.ema_decay)
        opt = AdamW(params, config.weight_decay, config.beta1, config.beta2)
        opt.load_state(ck.opt)
        rng.bit_generator.state = ck.rng_state
        start_step = int(ck.meta.get("global_step", opt.step))

    metrics = _MetricsLog(Path(out_dir) / "metrics.csv", resume is not None)
    meta = dict(stage_meta)
    last_good = _save(Path(out_dir), "ckpt_step_0000.zip", model, params, ema, opt, rng,
                      stats, {**meta, "global_step": "0"}) if resume is None else Path(resume)
    losses = []
    try:
        for step in range(start_step, total_steps):
            lr = (
                cosine_lr(step, total_steps, config.lr)
                if config.schedule == "cosine"
                else config.lr
            )
            loss, grads = batch_fn(rng, params)
            if not math.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at step {step}; last good checkpoint {last_good}",
                    last_good,
                )
            opt.update(params, grads, lr)
            ema_update(ema, params)
            losses.append(loss)
            metrics.row(step, loss, lr, _grad_norm(grads))
            if (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps:
                epoch = (step + 1) // steps_per_epoch
                last_good = _save(
                    Path(out_dir), f"ckpt_epoch_{epoch:04d}.zip", model, params, ema, opt,
                    rng, stats, {**meta, "global_step": str(step + 1)},
                )
    finally:
        metrics.close()
    final = _save(Path(out_dir), "checkpoint.zip", model, params, ema, opt, rng, stats,
                  {**meta, "global_step": str(total_steps)})
    return TrainResult(checkpoint_path=final, losses=np.array(losses))
