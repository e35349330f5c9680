"""Kinematic bicycle model, RK4 discretization, and comfort quantities.

The state carries inertial pose, longitudinal body velocity, forward
center-of-gravity velocity, and a normalized route-progress integral.  The
forward velocity is not integrated independently: it is coupled to the
longitudinal velocity through the slip angle (v_fwd = v / cos(beta)) and
recomputed whenever the steering input changes, so each discrete step is a
deterministic map of (state, input).

Batch variants evaluate one RK4 step and its analytic Jacobians across a
whole horizon at once; these feed the optimal control transcription.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# State vector component order used throughout the OCP.
IX, IY, IYAW, IV, IVFWD, IPROG = range(6)
NX = 6
NU = 3
# Indices of the integrated (non-derived) components.
_CORE = np.array([IX, IY, IYAW, IV, IPROG])


@dataclass(frozen=True)
class VehicleParams:
    """Geometry and legal limits of the controlled platform."""

    lf: float = 1.45
    lr: float = 1.45
    length: float = 4.8
    width: float = 2.0
    v_max: float = 8.0

    def __post_init__(self):
        if self.lf <= 0.0 or self.lr <= 0.0:
            raise ValueError("axle distances must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass(frozen=True)
class VehicleState:
    """Pose, velocities, and route progress."""

    x: float
    y: float
    yaw: float
    v: float
    v_fwd: float
    progress: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v, self.v_fwd, self.progress])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(*(float(v) for v in np.asarray(arr)[:NX]))


@dataclass(frozen=True)
class ControlInput:
    """Commanded acceleration, road-wheel angle, and progress rate."""

    accel: float
    steer: float
    progress_rate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer, self.progress_rate])

    @staticmethod
    def from_array(arr) -> "ControlInput":
        return ControlInput(*(float(v) for v in np.asarray(arr)[:NU]))


@dataclass(frozen=True)
class ComfortMetrics:
    """Lateral acceleration and longitudinal jerk at one step."""

    lat_accel: float
    lon_jerk: float


def slip_angle(steer, params: VehicleParams):
    """Slip angle at the center of gravity for a given road-wheel angle."""
    return np.arctan(params.lr * np.tan(steer) / params.wheelbase)


def lateral_accel(v, steer, params: VehicleParams):
    """Body-frame lateral acceleration v^2 * steer / wheelbase."""
    return v * v * steer / params.wheelbase


def longitudinal_jerk(accel_cmd: float, accel_prev: float, dt: float) -> float:
    """Backward difference of commanded acceleration over one sample."""
    if dt <= 0.0:
        raise ValueError("sample time must be positive")
    return (accel_cmd - accel_prev) / dt


def derivative(state: VehicleState, control: ControlInput, params: VehicleParams) -> np.ndarray:
    """Continuous-time state derivative of the kinematic bicycle.

    The forward-velocity component evolves as accel / cos(beta), consistent
    with the v_fwd = v / cos(beta) coupling at fixed steering.
    """
    beta = float(slip_angle(control.steer, params))
    cb = math.cos(beta)
    v_fwd = state.v / cb
    return np.array(
        [
            v_fwd * math.cos(state.yaw + beta),
            v_fwd * math.sin(state.yaw + beta),
            v_fwd * cb * math.tan(control.steer) / params.wheelbase,
            control.accel,
            control.accel / cb,
            control.progress_rate,
        ]
    )


def _core_rates(core: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Vectorized rates of the integrated components; core is (..., 5)."""
    yaw = core[..., 2]
    v = core[..., 3]
    accel, steer, rate = u[..., 0], u[..., 1], u[..., 2]
    beta = np.arctan(params.lr * np.tan(steer) / params.wheelbase)
    v_fwd = v / np.cos(beta)
    out = np.empty_like(core)
    out[..., 0] = v_fwd * np.cos(yaw + beta)
    out[..., 1] = v_fwd * np.sin(yaw + beta)
    out[..., 2] = v * np.tan(steer) / params.wheelbase
    out[..., 3] = accel
    out[..., 4] = rate
    return out


def rk4_step(
    state: VehicleState, control: ControlInput, params: VehicleParams, dt: float
) -> VehicleState:
    """One classical Runge-Kutta step with the input held constant."""
    nxt = rk4_step_batch(state.as_array()[None, :], control.as_array()[None, :], params, dt)
    return VehicleState.from_array(nxt[0])


def rk4_step_batch(states: np.ndarray, controls: np.ndarray, params: VehicleParams, dt: float) -> np.ndarray:
    """RK4 step applied row-wise; states (K, 6), controls (K, 3) -> (K, 6)."""
    if dt <= 0.0:
        raise ValueError("step length must be positive")
    X = np.asarray(states, dtype=float)
    U = np.asarray(controls, dtype=float)
    core = X[..., _CORE]
    k1 = _core_rates(core, U, params)
    k2 = _core_rates(core + 0.5 * dt * k1, U, params)
    k3 = _core_rates(core + 0.5 * dt * k2, U, params)
    k4 = _core_rates(core + dt * k3, U, params)
    core_next = core + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    beta = np.arctan(params.lr * np.tan(U[..., 1]) / params.wheelbase)
    out = np.empty_like(X)
    out[..., _CORE] = core_next
    out[..., IVFWD] = core_next[..., 3] / np.cos(beta)
    return out


def _rate_jacobians(core: np.ndarray, u: np.ndarray, params: VehicleParams):
    """d(rates)/d(core) and d(rates)/d(input) for a (K, 5) batch."""
    K = core.shape[0]
    yaw, v = core[:, 2], core[:, 3]
    steer = u[:, 1]
    L = params.wheelbase
    tan_d = np.tan(steer)
    sec2_d = 1.0 + tan_d * tan_d
    beta = np.arctan(params.lr * tan_d / L)
    cb, sb = np.cos(beta), np.sin(beta)
    # d(beta)/d(steer)
    bp = (params.lr * sec2_d / L) / (1.0 + (params.lr * tan_d / L) ** 2)
    cyb, syb = np.cos(yaw + beta), np.sin(yaw + beta)

    A = np.zeros((K, 5, 5))
    A[:, 0, 2] = -v / cb * syb
    A[:, 0, 3] = cyb / cb
    A[:, 1, 2] = v / cb * cyb
    A[:, 1, 3] = syb / cb
    A[:, 2, 3] = tan_d / L

    B = np.zeros((K, 5, 3))
    # d/d(steer) of v*cos(yaw+beta)/cos(beta) collapses to -v*sin(yaw)*bp/cos^2.
    B[:, 0, 1] = -v * np.sin(yaw) * bp / cb**2
    B[:, 1, 1] = v * np.cos(yaw) * bp / cb**2
    B[:, 2, 1] = v * sec2_d / L
    B[:, 3, 0] = 1.0
    B[:, 4, 2] = 1.0
    return A, B


def rk4_jacobians(states: np.ndarray, controls: np.ndarray, params: VehicleParams, dt: float):
    """Analytic Jacobians of rk4_step_batch wrt state and input.

    Chain rule propagated forward through the four stages.  Returns
    (Jx, Ju) with shapes (K, 6, 6) and (K, 6, 3); the column for the derived
    forward-velocity component is zero since the step ignores it.
    """
    X = np.asarray(states, dtype=float)
    U = np.asarray(controls, dtype=float)
    core = X[..., _CORE]
    K = core.shape[0]
    eye = np.broadcast_to(np.eye(5), (K, 5, 5))

    k1 = _core_rates(core, U, params)
    A1, B1 = _rate_jacobians(core, U, params)
    D1x, D1u = A1, B1

    c2 = core + 0.5 * dt * k1
    k2 = _core_rates(c2, U, params)
    A2, B2 = _rate_jacobians(c2, U, params)
    D2x = A2 @ (eye + 0.5 * dt * D1x)
    D2u = A2 @ (0.5 * dt * D1u) + B2

    c3 = core + 0.5 * dt * k2
    k3 = _core_rates(c3, U, params)
    A3, B3 = _rate_jacobians(c3, U, params)
    D3x = A3 @ (eye + 0.5 * dt * D2x)
    D3u = A3 @ (0.5 * dt * D2u) + B3

    c4 = core + dt * k3
    A4, B4 = _rate_jacobians(c4, U, params)
    D4x = A4 @ (eye + dt * D3x)
    D4u = A4 @ (dt * D3u) + B4

    Fx_core = eye + (dt / 6.0) * (D1x + 2.0 * D2x + 2.0 * D3x + D4x)
    Fu_core = (dt / 6.0) * (D1u + 2.0 * D2u + 2.0 * D3u + D4u)

    steer = U[:, 1]
    tan_d = np.tan(steer)
    sec2_d = 1.0 + tan_d * tan_d
    L = params.wheelbase
    beta = np.arctan(params.lr * tan_d / L)
    cb, sb = np.cos(beta), np.sin(beta)
    bp = (params.lr * sec2_d / L) / (1.0 + (params.lr * tan_d / L) ** 2)

    # Scatter the 5x5 core blocks into the 6x6 layout.
    Jx = np.zeros((K, NX, NX))
    Ju = np.zeros((K, NX, NU))
    Jx[np.ix_(np.arange(K), _CORE, _CORE)] = Fx_core
    Ju[:, _CORE, :] = Fu_core

    # Derived forward velocity: v_next / cos(beta) with v_next = v + accel*dt.
    v_next = core[:, 3] + U[:, 0] * dt
    Jx[:, IVFWD, IV] = 1.0 / cb
    Ju[:, IVFWD, 0] = dt / cb
    Ju[:, IVFWD, 1] = v_next * sb * bp / cb**2
    return Jx, Ju
