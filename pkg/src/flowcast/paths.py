"""Conditional probability paths and target velocities for training.

Two Gaussian paths are provided. The noise-to-data optimal-transport path
interpolates from a standard normal sample toward the target; the
data-to-data dynamic path interpolates from the previous state toward the
target with a constant noise width, so its target velocity is simply
``x1 - x0`` at every flow time. In deterministic mode (sigma_min = 0) the
dynamic path is exactly the straight line between the two states.

Path summary (mu_t, sigma_t define psi_t(x) = sigma_t * x + mu_t and
u_t(x|x1) = sigma_t'/sigma_t * (x - mu_t) + mu_t'):

==============  ===========================  =======================
quantity        optimal transport            dynamic transport
==============  ===========================  =======================
mu_t            t x1                         t x1 + (1-t) x0
sigma_t         1 - (1 - s_min) t            s_min
u_t at psi_t    x1 - (1 - s_min) x0          x1 - x0
==============  ===========================  =======================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATH_KINDS = ("OptimalTransport", "DynamicTransport")


@dataclass(frozen=True)
class PathParams:
    kind: str
    sigma_min: float = 0.0

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"kind must be one of {PATH_KINDS}, got {self.kind!r}")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if self.sigma_min == 0 and self.kind == "OptimalTransport":
            raise ValueError(
                "sigma_min = 0 is only permitted for DynamicTransport in deterministic mode"
            )


@dataclass(frozen=True)
class PathSample:
    """A training point on a conditional path: state x_t at flow time t with
    the regression target u_target."""

    x_t: np.ndarray
    t: float
    u_target: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.t}")
        if self.x_t.shape != self.u_target.shape:
            raise ValueError("x_t and u_target must share a shape")
        if not (np.all(np.isfinite(self.x_t)) and np.all(np.isfinite(self.u_target))):
            raise ValueError("path sample contains non-finite values")


def _check_pair(a, b, t):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")


def ot_path_sample(x_noise: np.ndarray, x1: np.ndarray, t: float, sigma_min: float) -> PathSample:
    """Sample the noise-to-data optimal-transport path at flow time t.

    x_t = t*x1 + (1 - (1 - sigma_min)*t) * x_noise, and the target velocity
    is the path velocity evaluated along the flow: x1 - (1 - sigma_min)*x_noise.
    """
    x_noise = np.asarray(x_noise)
    x1 = np.asarray(x1)
    _check_pair(x_noise, x1, t)
    t = float(t)
    x_t = t * x1 + (1.0 - (1.0 - sigma_min) * t) * x_noise
    u = x1 - (1.0 - sigma_min) * x_noise
    return PathSample(x_t=x_t, t=t, u_target=u)


def dynamic_path_sample(
    x0: np.ndarray,
    x1: np.ndarray,
    t: float,
    sigma_min: float = 0.0,
    noise: np.ndarray | None = None,
) -> PathSample:
    """Sample the data-to-data dynamic path at flow time t.

    x_t = t*x1 + (1-t)*x0 + sigma_min*noise; the target velocity x1 - x0 is
    independent of t. A noise array is required exactly when sigma_min > 0.
    """
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    _check_pair(x0, x1, t)
    t = float(t)
    if sigma_min > 0:
        if noise is None:
            raise ValueError("noise array required when sigma_min > 0")
        noise = np.asarray(noise)
        if noise.shape != x0.shape:
            raise ValueError(f"noise shape {noise.shape} does not match state {x0.shape}")
    x_t = t * x1 + (1.0 - t) * x0
    if sigma_min > 0:
        x_t = x_t + sigma_min * noise
    u = x1 - x0
    return PathSample(x_t=x_t, t=t, u_target=u)


# ---------------------------------------------------------------------------
# independent table evaluation, used as a test oracle


def path_table(kind: str, x0, x1, t: float, sigma_min: float):
    """Direct evaluation of the per-path quantities (mu_t, sigma_t, psi_t(x0),
    u_t(psi_t(x0)|x1)) from their defining formulas, written independently of
    the sampling functions above so the two can be cross-checked."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = float(t)
    if kind == "OptimalTransport":
        mu = t * x1
        sigma = 1.0 - (1.0 - sigma_min) * t
        dmu = x1
        dsigma = -(1.0 - sigma_min)
    elif kind == "DynamicTransport":
        mu = t * x1 + (1.0 - t) * x0
        sigma = sigma_min
        dmu = x1 - x0
        dsigma = 0.0
    else:
        raise ValueError(f"unknown path kind {kind!r}")
    psi = sigma * x0 + mu
    if sigma > 0:
        u_at_psi = (dsigma / sigma) * (psi - mu) + dmu
    else:
        # sigma == 0: the path is deterministic and u reduces to mu_t'
        u_at_psi = dmu
    return {"mu": mu, "sigma": sigma, "psi": psi, "u_at_psi": u_at_psi}


def path_tables_agree(n_trials: int = 100, n: int = 8, seed: int = 0, tol: float = 1e-12) -> bool:
    """Cross-check both sampling functions against :func:`path_table`.

    For the optimal-transport path, psi_t treats x0 as the noise draw. True
    when every quantity matches to ``tol`` over ``n_trials`` random cases.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n_trials):
        x0 = rng.normal(size=n)
        x1 = rng.normal(size=n)
        t = float(rng.uniform())
        s_ot = float(rng.uniform(0.01, 1.0))
        tab = path_table("OptimalTransport", x0, x1, t, s_ot)
        samp = ot_path_sample(x0, x1, t, s_ot)
        if np.max(np.abs(samp.x_t - tab["psi"])) > tol:
            return False
        if np.max(np.abs(samp.u_target - tab["u_at_psi"])) > tol:
            return False
        for s_dt in (0.0, float(rng.uniform(0.0, 0.2))):
            tab = path_table("DynamicTransport", x0, x1, t, s_dt)
            noise = x0 if s_dt > 0 else None  # table's psi uses x0 as the noise argument
            samp = dynamic_path_sample(x0, x1, t, s_dt, noise=noise)
            if np.max(np.abs(samp.x_t - tab["psi"])) > tol:
                return False
            if np.max(np.abs(samp.u_target - tab["u_at_psi"])) > tol:
                return False
    return True
