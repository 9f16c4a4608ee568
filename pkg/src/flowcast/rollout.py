"""Explicit Euler integration of a velocity field in hourly blocks.

A forecast block advances six hourly steps with the normalized flow time
t_n = (n-1)/6 presented to the model at the start of step n; t resets to
zero at each block boundary and the block's final state seeds the next
block, extending the horizon autoregressively.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .grid import StateField
from .nn.model import NonFiniteError


@dataclass(frozen=True)
class RolloutConfig:
    steps_per_block: int = 6
    delta_t: float = 1.0 / 6.0
    horizon_hours: int = 120
    max_horizon: int = 120
    update_clock_each_step: bool = True

    def __post_init__(self):
        if abs(self.steps_per_block * self.delta_t - 1.0) > 1e-12:
            raise ValueError("steps_per_block * delta_t must equal 1")
        if not 1 <= self.horizon_hours <= self.max_horizon:
            raise ValueError(
                f"horizon must lie in [1, {self.max_horizon}], got {self.horizon_hours}"
            )


def block_times(steps_per_block: int = 6) -> tuple[float, ...]:
    """Flow times presented to the model within one block: (0, 1/6, ..., 5/6)."""
    return tuple(n / steps_per_block for n in range(steps_per_block))


def euler_block(velocity_fn, state: StateField, cond_fn, config: RolloutConfig | None = None):
    """One forecast block: six hourly Euler steps from `state` (normalized).

    `velocity_fn(x, t, cond)` evaluates the velocity; `cond_fn(when)` builds
    the conditioning stack for a timestamp. Returns the list of six hourly
    states. Raises NonFiniteError with the offending step index if the state
    stops being finite.
    """
    config = config or RolloutConfig()
    if not state.normalized:
        raise ValueError("euler_block expects a normalized state")
    return _steps(velocity_fn, state, cond_fn, config, config.steps_per_block)


def _steps(velocity_fn, state: StateField, cond_fn, config, n_steps):
    x = state.values
    when = state.timestamp
    cond = None
    out = []
    for n in range(n_steps):
        t_n = n * config.delta_t
        if cond is None or config.update_clock_each_step:
            cond = cond_fn(when)
        v = velocity_fn(x, t_n, cond)
        x = x + config.delta_t * np.asarray(v, dtype=x.dtype)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state after block step {n + 1}")
        when = when + dt.timedelta(hours=1)
        out.append(StateField(x, when, normalized=True))
    return out


def rollout(velocity_fn, initial: StateField, horizon_hours: int, cond_fn,
            config: RolloutConfig | None = None):
    """Chain forecast blocks to `horizon_hours`, emitting every hourly state.

    The flow time resets to zero at each block start. A horizon that is not
    a multiple of the block length truncates the final block to the leftover
    steps (their flow times still start at zero).
    """
    base = config or RolloutConfig()
    if base.horizon_hours != horizon_hours:
        base = RolloutConfig(
            steps_per_block=base.steps_per_block,
            delta_t=base.delta_t,
            horizon_hours=horizon_hours,
            max_horizon=base.max_horizon,
            update_clock_each_step=base.update_clock_each_step,
        )
    out: list[StateField] = []
    state = initial
    remaining = horizon_hours
    while remaining > 0:
        steps = min(base.steps_per_block, remaining)
        block = _steps(velocity_fn, state, cond_fn, base, steps)
        out.extend(block)
        state = block[-1]
        remaining -= steps
    return out


def euler_integrate(f, x0, delta, n_steps, t0=0.0):
    """Generic forward-Euler loop, x <- x + delta * f(x, t).

    No casting is forced, so exact types (e.g. fractions.Fraction) propagate
    exactly; used by the convergence probe and the solver oracle tests.
    """
    x = x0
    t = t0
    for _ in range(n_steps):
        x = x + delta * f(x, t)
        t = t + delta
    return x


@dataclass
class ConvergenceResult:
    entries: list  # (dt, error) pairs
    slope: float | None  # fitted log-log order; None when any error is zero


def solve_convergence_probe(velocity_fn, x0, dt_list, exact_fn, t_end=1.0) -> ConvergenceResult:
    """Global Euler error at t_end versus step size, with the fitted order.

    `exact_fn(t)` must provide the analytic flow. For a first-order scheme
    the fitted log-log slope sits near 1.
    """
    entries = []
    for delta in dt_list:
        n = round(t_end / delta)
        if abs(n * delta - t_end) > 1e-12:
            raise ValueError(f"dt {delta} does not divide t_end {t_end}")
        x = euler_integrate(velocity_fn, x0, delta, n)
        err = float(np.max(np.abs(np.asarray(x) - np.asarray(exact_fn(t_end)))))
        entries.append((float(delta), err))
    if any(err == 0.0 for _, err in entries):
        return ConvergenceResult(entries=entries, slope=None)
    logs = np.log([d for d, _ in entries]), np.log([e for _, e in entries])
    slope = float(np.polyfit(logs[0], logs[1], 1)[0])
    return ConvergenceResult(entries=entries, slope=slope)
