"""Skill motion generation: dynamic movement primitives and cubic splines.

The DMP transformation system is the standard point-attractor form

    tau * v' = alpha_z * (beta_z * (g - y) - v) + f(x) * (g - y0)
    tau * y' = v
    tau * x' = -alpha_x * x

with a Gaussian-basis forcing term f(x) indexed by the canonical phase x.
Weights are fitted by locally weighted regression on a demonstration's
forcing term. Spline skills are natural cubic interpolants through timed
waypoints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline

DEFAULT_ALPHA_Z = 25.0
DEFAULT_N_BASIS = 20


class MotionError(Exception):
    """Degenerate demonstration or waypoint input."""


@dataclass(frozen=True)
class Trajectory:
    """Uniform-rate position setpoints with derived velocities."""

    rate_hz: float
    positions: np.ndarray  # (T, dims)
    velocities: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        if self.rate_hz <= 0:
            raise MotionError("rate_hz must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise MotionError("trajectory contains non-finite values")
        if self.velocities is None:
            vel = np.gradient(self.positions, 1.0 / self.rate_hz, axis=0) \
                if len(self.positions) > 1 else np.zeros_like(self.positions)
            object.__setattr__(self, "velocities", vel)

    def __len__(self):
        return len(self.positions)

    @property
    def duration(self) -> float:
        return len(self.positions) / self.rate_hz

    @property
    def dims(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class DmpParams:
    """Fitted DMP: basis weights plus attractor gains and endpoints."""

    dims: int
    weights: np.ndarray  # (dims, N)
    centers: np.ndarray  # (N,)
    widths: np.ndarray  # (N,)
    alpha_z: float
    beta_z: float
    alpha_x: float
    tau: float
    y0: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        for name in ("weights", "centers", "widths", "y0", "g"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if abs(self.beta_z - self.alpha_z / 4.0) > 1e-9:
            raise MotionError("beta_z must equal alpha_z / 4 (critical damping)")
        if np.any(self.widths <= 0):
            raise MotionError("basis widths must be positive")
        if self.tau <= 0:
            raise MotionError("tau must be positive")


def _basis_layout(alpha_x, n_basis):
    """Centers spaced evenly in phase time, widths tied to center spacing."""
    ts = np.linspace(0.0, 1.0, n_basis)
    centers = np.exp(-alpha_x * ts)
    widths = np.empty(n_basis)
    diffs = np.diff(centers)
    widths[:-1] = 2.0 / (diffs**2 + 1e-12)
    widths[-1] = widths[-2]
    return centers, widths


def _forcing(params, x):
    """f(x) for phase values x: Gaussian-basis weighted average scaled by x."""
    x = np.atleast_1d(x)
    psi = np.exp(-params.widths[None, :] * (x[:, None] - params.centers[None, :]) ** 2)
    denom = psi.sum(axis=1) + 1e-12
    return (psi @ params.weights.T) * (x / denom)[:, None]  # (len(x), dims)


def dmp_fit(demo: Trajectory, n_basis=DEFAULT_N_BASIS, alpha_z=DEFAULT_ALPHA_Z) -> DmpParams:
    """Fit DMP weights to a demonstration by locally weighted regression."""
    T = len(demo)
    if T < 3 * n_basis:
        raise MotionError(f"demo length {T} < 3 * n_basis = {3 * n_basis}")
    tau = demo.duration
    if tau <= 0:
        raise MotionError("demo has zero duration")
    beta_z = alpha_z / 4.0
    alpha_x = 4.0  # phase decays as exp(-alpha_x t / tau)
    dt = 1.0 / demo.rate_hz
    y = demo.positions
    yd = np.gradient(y, dt, axis=0)
    ydd = np.gradient(yd, dt, axis=0)
    y0, g = y[0], y[-1]
    ts = np.arange(T) * dt
    x = np.exp(-alpha_x * ts / tau)

    # Forcing target: f_t = tau^2 ydd - alpha_z (beta_z (g - y) - tau yd),
    # normalized per dimension by the displacement g - y0.
    f_target = tau**2 * ydd - alpha_z * (beta_z * (g - y) - tau * yd)
    span = g - y0
    scale = np.where(np.abs(span) > 1e-10, span, 1.0)
    xi = f_target / scale  # (T, dims)

    centers, widths = _basis_layout(alpha_x, n_basis)
    psi = np.exp(-widths[None, :] * (x[:, None] - centers[None, :]) ** 2)  # (T, N)
    weights = np.empty((y.shape[1], n_basis))
    for i in range(n_basis):
        w = psi[:, i]
        denom = np.sum(w * x * x) + 1e-12
        weights[:, i] = (xi * (w * x)[:, None]).sum(axis=0) / denom
    weights[np.abs(span) <= 1e-10, :] = 0.0

    return DmpParams(
        dims=y.shape[1], weights=weights, centers=centers, widths=widths,
        alpha_z=alpha_z, beta_z=beta_z, alpha_x=alpha_x, tau=tau, y0=y0, g=g,
    )


def dmp_rollout(params: DmpParams, y0=None, g=None, tau=None, rate_hz=200.0,
                duration_scale=1.5) -> Trajectory:
    """Integrate the DMP by explicit Euler for duration_scale * tau seconds."""
    y0 = params.y0 if y0 is None else np.asarray(y0, dtype=float)
    g = params.g if g is None else np.asarray(g, dtype=float)
    tau = params.tau if tau is None else float(tau)
    dt = 1.0 / rate_hz
    steps = int(round(duration_scale * tau * rate_hz))
    if tau * rate_hz < 10:
        raise MotionError("rate_hz * tau must be at least 10 steps")
    y = y0.copy()
    v = np.zeros_like(y)
    x = 1.0
    span = g - y0
    positions = np.empty((steps, params.dims))
    velocities = np.empty((steps, params.dims))
    for t in range(steps):
        f = _forcing(params, x)[0]
        vdot = (params.alpha_z * (params.beta_z * (g - y) - v) + f * span) / tau
        ydot = v / tau
        positions[t] = y
        velocities[t] = ydot
        y = y + ydot * dt
        v = v + vdot * dt
        x = x + (-params.alpha_x * x / tau) * dt
    return Trajectory(rate_hz=rate_hz, positions=positions, velocities=velocities)


def retarget(params: DmpParams, new_g) -> DmpParams:
    """Replace the goal only; weights and shape parameters stay untouched."""
    return replace(params, g=np.asarray(new_g, dtype=float))


def natural_cubic_spline(waypoints):
    """Natural cubic interpolant through (t, position) waypoints."""
    if len(waypoints) < 2:
        raise MotionError("need at least 2 waypoints")
    ts = np.array([float(t) for t, _ in waypoints])
    ps = np.array([np.asarray(p, dtype=float) for _, p in waypoints])
    if np.any(np.diff(ts) <= 0):
        raise MotionError("waypoint times must be strictly increasing")
    return CubicSpline(ts, ps, axis=0, bc_type="natural")


def spline_interp(waypoints, rate_hz=200.0) -> Trajectory:
    """Sample a natural cubic spline through the waypoints at a uniform rate."""
    spline = natural_cubic_spline(waypoints)
    t0, t1 = spline.x[0], spline.x[-1]
    n = max(int(round((t1 - t0) * rate_hz)), 1)
    ts = t0 + np.arange(n + 1) / rate_hz
    ts = np.minimum(ts, t1)
    return Trajectory(rate_hz=rate_hz, positions=spline(ts),
                      velocities=spline(ts, 1))


def min_jerk(y0, g, duration, rate_hz=200.0) -> Trajectory:
    """Minimum-jerk point-to-point reference trajectory."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    n = int(round(duration * rate_hz))
    s = np.arange(n) / max(n - 1, 1)
    blend = 10 * s**3 - 15 * s**4 + 6 * s**5
    return Trajectory(rate_hz=rate_hz,
                      positions=y0[None, :] + blend[:, None] * (g - y0)[None, :])


def normalize_quaternions(positions, quat_slice=slice(3, 7)):
    """Renormalize the quaternion block of a pose trajectory, row by row."""
    positions = np.array(positions, dtype=float)
    q = positions[:, quat_slice]
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    positions[:, quat_slice] = q / norms
    return positions
