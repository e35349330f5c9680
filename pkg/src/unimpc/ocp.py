"""Discrete-time optimal control problem for simultaneous planning and control.

Decision variables are the stacked states for steps 0..N followed by the
inputs for steps 0..N-1.  The objective trades squared position error against
route progress, with the reference point for step k evaluated on the center
spline at that step's own progress variable, so tracking and progress are
optimized jointly.  Constraints: multiple-shooting dynamics equalities,
actuation and comfort bounds, road-boundary sidedness, and point-versus-
ellipse obstacle avoidance over a 6-point footprint expansion.

The assembled problem is a plain dense-Jacobian NLP; parameters (measured
state, reference window, obstacle horizon, progress weight, previous
acceleration) rebind without touching the structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    IPROG,
    IV,
    IX,
    IY,
    IYAW,
    NU,
    NX,
    VehicleParams,
    VehicleState,
    rk4_jacobians,
    rk4_step_batch,
)
from .solver import NlpProblem
from .splines import ReferenceSet
from .world import Ellipse, ObstacleHorizon


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights, and the comfort/legal constraint bounds."""

    horizon: int = 15
    dt: float = 0.25
    q_follow: float = 1.0
    q_avoid: float = 1000.0
    q_switch_distance: float = 5.0
    accel_bound: float = 3.5
    lat_accel_bound: float = 3.5
    jerk_min: float = -10.0
    jerk_max: float = 15.0
    steer_bound: float = math.pi / 4
    progress_rate_max: float = 1.0
    footprint_samples: int = 6
    obstacle_margin: float = 0.2
    sidedness_margin: float = 0.1

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0.0:
            raise ValueError("horizon must be >= 1 and dt positive")
        if self.q_follow <= 0.0 or self.q_avoid <= 0.0:
            raise ValueError("progress weights must be positive")
        if self.footprint_samples != 6:
            raise ValueError("footprint expansion is fixed at 6 samples")


def footprint_points(params: VehicleParams) -> np.ndarray:
    """Six body-frame border points: 4 corners + long-side midpoints."""
    a, b = params.length / 2.0, params.width / 2.0
    return np.array(
        [[a, b], [a, -b], [-a, b], [-a, -b], [0.0, b], [0.0, -b]]
    )


def in_ellipse_value(p, el: Ellipse) -> float:
    """Containment form after rotating point and centroid into ellipse axes.

    < 1 inside, = 1 on the boundary; the avoidance constraint keeps it >= 1.
    """
    c, s = math.cos(el.theta), math.sin(el.theta)
    px = c * p[0] + s * p[1]
    py = -s * p[0] + c * p[1]
    ex = c * el.x + s * el.y
    ey = -s * el.x + c * el.y
    return ((px - ex) / el.rx) ** 2 + ((py - ey) / el.ry) ** 2


def objective(states, refs, Q: float) -> float:
    """Tracking-plus-progress cost over steps 1..N with fixed reference points."""
    X = _states_array(states)
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    if len(refs) != len(X) - 1:
        raise ValueError(f"need one reference point per step 1..N: got {len(refs)} for {len(X) - 1}")
    pos = X[1:, [IX, IY]]
    err = pos - refs
    return float(np.sum(err * err) + Q * np.sum(1.0 - X[1:, IPROG]))


def q_schedule(ego, horizon: ObstacleHorizon, config: OcpConfig | None = None) -> float:
    """Progress weight: the avoidance setting inside the switch distance.

    Distance is measured from the ego point to the nearest current-step
    ellipse boundary (strictly less than the switch distance triggers it).
    """
    config = config or OcpConfig()
    if len(horizon) == 0 or not horizon.step(0):
        return config.q_follow
    d = min(el.boundary_distance(ego) for el in horizon.step(0))
    return config.q_avoid if d < config.q_switch_distance else config.q_follow


def obstacle_constraints(states, horizon: ObstacleHorizon, footprint: np.ndarray,
                         margin: float = 0.0) -> np.ndarray:
    """Containment-form values for every (step, obstacle, footprint point).

    States are steps 0..N; steps 1..N are constrained against the matching
    horizon entry (the last entry replicates past the end).  Radii are
    inflated by `margin` before evaluation.  Each value must end up >= 1.
    """
    X = _states_array(states)
    vals = []
    for k in range(1, len(X)):
        yaw = X[k, IYAW]
        c, s = math.cos(yaw), math.sin(yaw)
        world = X[k, [IX, IY]] + footprint @ np.array([[c, s], [-s, c]])
        for el in horizon.step(k):
            grown = el.inflated(margin) if margin else el
            for p in world:
                vals.append(in_ellipse_value(p, grown))
    return np.asarray(vals)


def boundary_constraints(states, refs: ReferenceSet) -> np.ndarray:
    """Signed sidedness values per step: [left_1, right_1, left_2, ...].

    Left values are positive when the position is right of the left bound;
    right values are negated so that positive likewise means legal.  Both
    bounds are sampled at the step's progress variable with the configured
    lookahead, clamped at the domain end.
    """
    X = _states_array(states)
    la = refs.lookahead
    out = []
    for k in range(1, len(X)):
        p = X[k, [IX, IY]]
        s0 = min(max(X[k, IPROG], 0.0), 1.0 - la)
        lb0, lb1 = refs.left.eval(s0), refs.left.eval(s0 + la)
        rb0, rb1 = refs.right.eval(s0), refs.right.eval(s0 + la)
        left = (p[0] - lb0[0]) * (lb1[1] - lb0[1]) - (p[1] - lb0[1]) * (lb1[0] - lb0[0])
        right = (p[0] - rb0[0]) * (rb1[1] - rb0[1]) - (p[1] - rb0[1]) * (rb1[0] - rb0[0])
        out.extend([left, -right])
    return np.asarray(out)


def _states_array(states) -> np.ndarray:
    if isinstance(states, np.ndarray):
        return np.atleast_2d(states)
    rows = []
    for s in states:
        rows.append(s.as_array() if isinstance(s, VehicleState) else np.asarray(s, float))
    return np.vstack(rows)


class DrivingNlp(NlpProblem):
    """The assembled OCP as a dense NLP with analytic derivatives."""

    hessian_psd = True  # Gauss-Newton tracking curvature is PSD by construction

    def __init__(self, x0, refs: ReferenceSet, horizon: ObstacleHorizon,
                 config: OcpConfig, params: VehicleParams,
                 Q: float | None = None, prev_accel: float = 0.0,
                 include_boundary: bool = True):
        self.config = config
        self.params = params
        self.refs = refs
        self.horizon = horizon
        self.Q = config.q_follow if Q is None else float(Q)
        # The NLP minimizes J / max(1, Q): an equivalent objective whose dual
        # scale stays O(1) when the avoidance weight is active, which keeps
        # the merit penalty from amplifying constraint curvature.
        self.obj_scale = 1.0 / max(1.0, self.Q)
        self.prev_accel = float(prev_accel)
        self.include_boundary = include_boundary
        self.warnings: list = []

        N = config.horizon
        self.N = N
        self.num_vars = NX * (N + 1) + NU * N
        self._u_off = NX * (N + 1)

        x0 = x0.as_array() if isinstance(x0, VehicleState) else np.asarray(x0, float).copy()
        if not np.all(np.isfinite(x0)):
            raise ValueError("initial state must be finite")
        clipped = x0.copy()
        clipped[IV] = np.clip(x0[IV], 0.0, params.v_max)
        clipped[IPROG] = np.clip(x0[IPROG], 0.0, 1.0)
        if not np.array_equal(clipped, x0):
            self.warnings.append(
                f"initial state projected into bounds: {x0.tolist()} -> {clipped.tolist()}"
            )
        self.x0 = clipped

        # Obstacle rows: one per (step, ellipse, footprint point), flattened.
        self.footprint = footprint_points(params)
        step_idx, centers, inv_radii, rot = [], [], [], []
        offs = []
        m = config.obstacle_margin
        for k in range(1, N + 1):
            for el in horizon.step(k) if len(horizon) else ():
                for o in self.footprint:
                    step_idx.append(k)
                    centers.append([el.x, el.y])
                    inv_radii.append([1.0 / (el.rx + m), 1.0 / (el.ry + m)])
                    rot.append([math.cos(el.theta), math.sin(el.theta)])
                    offs.append(o)
        self._obs_k = np.asarray(step_idx, dtype=int)
        self._obs_c = np.asarray(centers, dtype=float).reshape(-1, 2)
        self._obs_ir = np.asarray(inv_radii, dtype=float).reshape(-1, 2)
        self._obs_rot = np.asarray(rot, dtype=float).reshape(-1, 2)
        self._obs_off = np.asarray(offs, dtype=float).reshape(-1, 2)

        # The path-integral coordinates carry route-length-squared objective
        # curvature; scaling them to meters balances the Newton geometry.
        probe = np.linspace(0.02, 0.98, 25)
        self.route_scale = float(max(1.0, np.mean(np.linalg.norm(refs.center.deriv(probe), axis=1))))

        self.m_fix = NX
        self.m_dyn = NX * N
        # Scatter indices for the vectorized dynamics-Jacobian fill.
        k_arr = np.arange(N)
        rows_blk = NX + NX * k_arr[:, None, None] + np.arange(NX)[None, :, None]
        self._dyn_rows_x = np.broadcast_to(rows_blk, (N, NX, NX)).ravel()
        self._dyn_cols_x = (NX * k_arr[:, None, None]
                            + np.arange(NX)[None, None, :] + np.zeros((1, NX, 1), dtype=int)).ravel()
        rows_u = NX + NX * k_arr[:, None, None] + np.arange(NX)[None, :, None]
        self._dyn_rows_u = np.broadcast_to(rows_u, (N, NX, NU)).ravel()
        u_off = NX * (N + 1)
        self._dyn_cols_u = (u_off + NU * k_arr[:, None, None]
                            + np.arange(NU)[None, None, :] + np.zeros((1, NX, 1), dtype=int)).ravel()
        self._dyn_rows_eye = (NX + NX * k_arr[:, None] + np.arange(NX)[None, :]).ravel()
        self._dyn_cols_eye = (NX * (k_arr + 1)[:, None] + np.arange(NX)[None, :]).ravel()
        self.m_lat = N
        self.m_jerk = N
        self.m_bound = 2 * N if include_boundary else 0
        self.m_obs = len(self._obs_k)
        self._cache = {}

    # -- layout helpers -------------------------------------------------
    def state_index(self, k: int) -> slice:
        return slice(NX * k, NX * (k + 1))

    def input_index(self, k: int) -> slice:
        return slice(self._u_off + NU * k, self._u_off + NU * (k + 1))

    def split(self, z):
        z = np.asarray(z, dtype=float)
        X = z[: self._u_off].reshape(self.N + 1, NX)
        U = z[self._u_off:].reshape(self.N, NU)
        return X, U

    def initial_vector(self) -> np.ndarray:
        """Cold-start decision vector (all zeros)."""
        return np.zeros(self.num_vars)

    def var_scales(self) -> np.ndarray:
        """Per-variable solver scaling: path-integral entries go to meters."""
        s = np.ones(self.num_vars)
        for k in range(self.N + 1):
            s[self.state_index(k).start + IPROG] = self.route_scale
        for k in range(self.N):
            s[self.input_index(k).start + 2] = self.route_scale
        return s

    def worst_obstacle_violation(self, z) -> float:
        """Depth of the deepest footprint-point penetration, in containment form."""
        if not self.m_obs:
            return 0.0
        X, _ = self.split(np.asarray(z, dtype=float))
        vals, _ = self._obstacle_values(X)
        return float(max(0.0, 1.0 - np.min(vals)))

    def braking_fallback(self) -> np.ndarray:
        """Comfort-braking rollout from the measured state.

        Jerk-limited ramp from the previously applied acceleration down to
        full comfortable braking, straight steering; progress entries follow
        from the rollout.  Serves as a feasible-leaning warm start when the
        shifted plan has become unusable (e.g. it penetrates an obstacle).
        """
        # Half-rate jerk ramp and a creep floor keep the seed strictly inside
        # the comfort envelope: a seed sitting exactly on the jerk and speed
        # bounds freezes the barrier iteration solid.
        cfg = self.config
        U = np.zeros((self.N, NU))
        a = self.prev_accel
        v = float(self.x0[IV])
        creep = 0.2
        for k in range(self.N):
            a = max(-0.85 * cfg.accel_bound, a + 0.5 * cfg.jerk_min * cfg.dt)
            if v + a * cfg.dt < creep:
                a = max(a, (creep - v) / cfg.dt) if v > creep else 0.0
            U[k, 0] = a
            v = max(v + a * cfg.dt, 0.0)
        # Pure braking: no swerve conditioning here.  Route exploration is the
        # exploration solver's job; the fallback only sheds speed safely.
        X, U = self._conditioned_rollout(U, allow_swerve=False)
        return np.concatenate([X.ravel(), U.ravel()])

    def presolve_start(self, z: np.ndarray) -> np.ndarray:
        """Condition a grossly inconsistent start from the measured state.

        Local defects (a shifted plan's duplicated tail, the measured-state
        row) are left for the solver, which absorbs them in a few iterations
        while keeping the plan's geometry.  Only a start that carries no
        usable plan at all (the zero-initialized exploration vector, or one
        whose states disagree with its own inputs by meters) is replaced by a
        conditioned rollout.
        """
        X, U = self.split(np.array(z, dtype=float))
        X = X.copy()
        U = U.copy()
        pred = rk4_step_batch(X[:-1], U, self.params, self.config.dt)
        defects = np.max(np.abs(X[1:] - pred), axis=1)
        x0_gap = float(np.max(np.abs(X[0] - self.x0)))
        if x0_gap <= 3.0 and float(np.max(defects, initial=0.0)) <= 3.0:
            return np.asarray(z, dtype=float)

        # A gross start carries no usable plan: seed a cruise-speed profile so
        # the rollout explores the route ahead even from a standstill.  Any
        # swerve conditioning is reserved for the exploration seed.
        X, U = self._conditioned_rollout(self._cruise_inputs(), allow_swerve=False)
        return np.concatenate([X.ravel(), U.ravel()])

    def _cruise_inputs(self, cruise: float | None = None) -> np.ndarray:
        U = np.zeros((self.N, NU))
        if cruise is None:
            cruise = float(np.clip(self.x0[IV], 3.0, self.params.v_max))
        v_est = float(self.x0[IV])
        for k in range(self.N):
            U[k, 0] = float(np.clip((cruise - v_est) / self.config.dt, -2.5, 2.5))
            v_est = max(v_est + U[k, 0] * self.config.dt, 0.0)
        return U

    def exploration_seed(self) -> np.ndarray:
        """Conditioned start for the zero-initialized exploration solver.

        A speed-limit rollout from the measured state (route progress is the
        efficiency target, so the seed drives at the limit); when that
        rollout penetrates an obstacle, static or moving, the steering is
        re-synthesized to pass it on the side with corridor room.  This is
        the less-biased start that lets the exploration solver propose routes
        the warm-started chain cannot.
        """
        U = self._cruise_inputs(cruise=self.params.v_max)
        X, U = self._conditioned_rollout(U, allow_swerve=True)
        return np.concatenate([X.ravel(), U.ravel()])

    def _conditioned_rollout(self, U, allow_swerve: bool = True):
        """Roll the inputs from the measured state; swerve around penetrations.

        If the plain rollout drives the footprint into an obstacle ellipse,
        the steering is re-synthesized to track a laterally offset line past
        that obstacle, choosing the side with corridor room (the nearer side
        when the road boundaries are not enforced).  Progress entries follow
        from projecting the rolled positions onto the reference.
        """
        from .splines import project_points_to_spline, project_to_spline

        U = U.copy()
        X = self._roll(U)
        target = self._swerve_target(X) if allow_swerve else None
        if target is not None:
            s_ob, d_pass, ramp = target
            X = self._roll(U, lateral=(s_ob, d_pass, ramp))
            U = self._last_rolled_inputs
        s = project_points_to_spline(self.refs.center, X[:, :2], grid=500)
        s = np.maximum.accumulate(np.clip(s, 0.0, 1.0))
        rate = np.clip(np.diff(s) / self.config.dt, 0.0, self.config.progress_rate_max)
        prog = np.concatenate([[s[0]], s[0] + np.cumsum(rate) * self.config.dt])
        X[:, IPROG] = np.clip(prog, 0.0, 1.0)
        U[:, 2] = rate
        X[:, IV] = np.clip(X[:, IV], 0.0, self.params.v_max)
        return X, U

    def _roll(self, U, lateral=None):
        """Forward rollout; optionally steer toward a lateral offset profile."""
        from .splines import project_to_spline

        cfg = self.config
        X = np.empty((self.N + 1, NX))
        X[0] = self.x0
        U_used = U.copy()
        for k in range(self.N):
            if lateral is not None:
                s_ob, d_pass, ramp = lateral
                s_here = project_to_spline(self.refs.center, X[k, :2], grid=300)
                ref_pt = self.refs.center.eval(s_here)
                ref_d = self.refs.center.deriv(s_here)
                t_hat = ref_d / max(np.linalg.norm(ref_d), 1e-9)
                n_hat = np.array([-t_hat[1], t_hat[0]])
                lat_now = float((X[k, :2] - ref_pt) @ n_hat)
                gap = (s_ob - s_here) * self.route_scale
                w = max(0.0, 1.0 - abs(gap) / ramp)
                want = d_pass * w
                head_ref = math.atan2(t_hat[1], t_hat[0])
                # Steer toward the offset line with a simple geometric law.
                desired_heading = head_ref + np.clip(0.35 * (want - lat_now), -0.5, 0.5)
                err = (desired_heading - X[k, IYAW] + math.pi) % (2 * math.pi) - math.pi
                steer = float(np.clip(2.0 * err, -cfg.steer_bound, cfg.steer_bound))
                U_used[k, 1] = steer
            X[k + 1] = rk4_step_batch(X[k][None, :], U_used[k][None, :],
                                      self.params, cfg.dt)[0]
        self._last_rolled_inputs = U_used
        return X

    def _swerve_target(self, X):
        """Pass side and offset for the first obstacle the rollout penetrates."""
        from .splines import project_to_spline, sidedness

        if not self.m_obs:
            return None
        vals, _ = self._obstacle_values(X)
        hit = vals < 1.0
        if not np.any(hit):
            return None
        first = int(np.argmax(hit))
        cx, cy = self._obs_c[first]
        irx, iry = self._obs_ir[first]
        radius = 1.0 / min(irx, iry)
        s_ob = project_to_spline(self.refs.center, (cx, cy), grid=500)
        ref_pt = self.refs.center.eval(s_ob)
        ref_d = self.refs.center.deriv(s_ob)
        t_hat = ref_d / max(np.linalg.norm(ref_d), 1e-9)
        n_hat = np.array([-t_hat[1], t_hat[0]])
        d_ob = float((np.array([cx, cy]) - ref_pt) @ n_hat)
        half_width = self.params.width / 2.0
        clear = radius + half_width + 0.3
        room = {}
        for side in (+1.0, -1.0):
            d_pass = d_ob + side * clear
            pass_pt = ref_pt + n_hat * d_pass
            if not self.include_boundary:
                room[side] = 1e9 - abs(d_pass)  # prefer the smaller deviation
                continue
            la = self.refs.lookahead
            s0 = min(s_ob, 1.0 - la)
            left_val = sidedness(pass_pt, self.refs.left.eval(s0), self.refs.left.eval(s0 + la))
            right_val = -sidedness(pass_pt, self.refs.right.eval(s0), self.refs.right.eval(s0 + la))
            margin = self.config.sidedness_margin
            legal = left_val > margin and right_val > margin
            room[side] = min(left_val, right_val) if legal else -1e9
        side = +1.0 if room[+1.0] >= room[-1.0] else -1.0
        if room[side] <= -1e8:
            return None
        ramp = max(12.0, 3.0 * radius)
        return s_ob, d_ob + side * clear, ramp

    def with_params(self, x0=None, refs=None, horizon=None, Q=None, prev_accel=None) -> "DrivingNlp":
        """Rebind per-tick parameters; structure is rebuilt only as needed."""
        return DrivingNlp(
            self.x0 if x0 is None else x0,
            self.refs if refs is None else refs,
            self.horizon if horizon is None else horizon,
            self.config,
            self.params,
            Q=self.Q if Q is None else Q,
            prev_accel=self.prev_accel if prev_accel is None else prev_accel,
            include_boundary=self.include_boundary,
        )

    # -- bounds ----------------------------------------------------------
    def var_bounds(self):
        n = self.num_vars
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        for k in range(self.N + 1):
            sl = self.state_index(k)
            lb[sl.start + IV] = 0.0
            ub[sl.start + IV] = self.params.v_max
            lb[sl.start + IPROG] = 0.0
            ub[sl.start + IPROG] = 1.0
        cfg = self.config
        for k in range(self.N):
            sl = self.input_index(k)
            lb[sl.start + 0], ub[sl.start + 0] = -cfg.accel_bound, cfg.accel_bound
            lb[sl.start + 1], ub[sl.start + 1] = -cfg.steer_bound, cfg.steer_bound
            lb[sl.start + 2], ub[sl.start + 2] = 0.0, cfg.progress_rate_max
        return lb, ub

    def constraint_bounds(self):
        cfg = self.config
        cl = np.concatenate([
            np.zeros(self.m_fix + self.m_dyn),
            np.full(self.m_lat, -cfg.lat_accel_bound),
            np.full(self.m_jerk, cfg.jerk_min),
            np.full(self.m_bound, cfg.sidedness_margin),
            np.ones(self.m_obs),
        ])
        cu = np.concatenate([
            np.zeros(self.m_fix + self.m_dyn),
            np.full(self.m_lat, cfg.lat_accel_bound),
            np.full(self.m_jerk, cfg.jerk_max),
            np.full(self.m_bound, np.inf),
            np.full(self.m_obs, np.inf),
        ])
        return cl, cu

    @property
    def num_constraints(self) -> int:
        return self.m_fix + self.m_dyn + self.m_lat + self.m_jerk + self.m_bound + self.m_obs

    # -- shared evaluation ------------------------------------------------
    def _common(self, z, need_grad):
        key = (z.tobytes(), need_grad)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        X, U = self.split(z)
        la = self.refs.lookahead
        prog = np.clip(X[1:, IPROG], 0.0, 1.0)
        s0 = np.minimum(prog, 1.0 - la)
        data = {
            "X": X, "U": U, "prog": prog, "s0": s0,
            "ref": self.refs.center.eval(prog),
            "lb0": self.refs.left.eval(s0), "lb1": self.refs.left.eval(s0 + la),
            "rb0": self.refs.right.eval(s0), "rb1": self.refs.right.eval(s0 + la),
        }
        if need_grad:
            data["ref_d"] = self.refs.center.deriv(prog)
            data["lb0_d"] = self.refs.left.deriv(s0)
            data["lb1_d"] = self.refs.left.deriv(s0 + la)
            data["rb0_d"] = self.refs.right.deriv(s0)
            data["rb1_d"] = self.refs.right.deriv(s0 + la)
            # Progress-clip masks: derivative of the clamped samples.
            data["dprog"] = ((X[1:, IPROG] > 0.0) & (X[1:, IPROG] < 1.0)).astype(float)
            data["ds0"] = data["dprog"] * (X[1:, IPROG] < 1.0 - la).astype(float)
        if len(self._cache) > 4:
            self._cache.clear()
        self._cache[key] = data
        return data

    # -- objective ---------------------------------------------------------
    def objective(self, z):
        d = self._common(np.asarray(z, dtype=float), False)
        err = d["X"][1:, [IX, IY]] - d["ref"]
        return self.obj_scale * float(np.sum(err * err) + self.Q * np.sum(1.0 - d["prog"]))

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        d = self._common(z, True)
        g = np.zeros(self.num_vars)
        err = d["X"][1:, [IX, IY]] - d["ref"]
        for i, k in enumerate(range(1, self.N + 1)):
            sl = self.state_index(k).start
            g[sl + IX] = 2.0 * err[i, 0]
            g[sl + IY] = 2.0 * err[i, 1]
            g[sl + IPROG] = (
                -2.0 * float(err[i] @ d["ref_d"][i]) * d["dprog"][i] - self.Q * d["dprog"][i]
            )
        return self.obj_scale * g

    def hessian(self, z):
        """Gauss-Newton curvature of the tracking term (PSD by construction)."""
        z = np.asarray(z, dtype=float)
        d = self._common(z, True)
        H = np.zeros((self.num_vars, self.num_vars))
        for i, k in enumerate(range(1, self.N + 1)):
            sl = self.state_index(k).start
            sx = d["ref_d"][i, 0] * d["dprog"][i]
            sy = d["ref_d"][i, 1] * d["dprog"][i]
            idx = [sl + IX, sl + IY, sl + IPROG]
            J_r = np.array([[1.0, 0.0, -sx], [0.0, 1.0, -sy]])
            H[np.ix_(idx, idx)] += 2.0 * J_r.T @ J_r
        return self.obj_scale * H

    def lagrangian_hessian(self, z, w):
        """Objective curvature minus weighted constraint curvature.

        Models the rows whose second derivatives are cheap and matter for
        step quality: the obstacle containment forms (exact quadratic in the
        footprint point, chained through the pose) and the bilinear lateral
        acceleration rows.  Dynamics-row curvature over one RK4 step is mild
        and left to the regularization.
        """
        z = np.asarray(z, dtype=float)
        H = self.hessian(z)
        N = self.N

        if self.m_obs:
            X, _ = self.split(z)
            obs_off = self.m_fix + self.m_dyn + self.m_lat + self.m_jerk + self.m_bound
            w_obs = w[obs_off : obs_off + self.m_obs]
            active = np.flatnonzero(w_obs)
            if len(active):
                yaw = X[self._obs_k[active], IYAW]
                c, s = np.cos(yaw), np.sin(yaw)
                ox, oy = self._obs_off[active, 0], self._obs_off[active, 1]
                qx = -s * ox - c * oy       # dp/dyaw
                qy = c * ox - s * oy
                rxx = -c * ox + s * oy      # d2p/dyaw2
                ryy = -s * ox - c * oy
                ce, se = self._obs_rot[active, 0], self._obs_rot[active, 1]
                ia, ib = self._obs_ir[active, 0], self._obs_ir[active, 1]
                # Containment-form Hessian wrt the world point (constant).
                hxx = 2.0 * ((ce * ia) ** 2 + (se * ib) ** 2)
                hyy = 2.0 * ((se * ia) ** 2 + (ce * ib) ** 2)
                hxy = 2.0 * (ce * se * (ia * ia - ib * ib))
                px = X[self._obs_k[active], IX] + c * ox - s * oy
                py = X[self._obs_k[active], IY] + s * ox + c * oy
                dx = px - self._obs_c[active, 0]
                dy = py - self._obs_c[active, 1]
                lx = (ce * dx + se * dy) * ia
                ly = (-se * dx + ce * dy) * ib
                gpx = 2.0 * (lx * ia * ce - ly * ib * se)
                gpy = 2.0 * (lx * ia * se + ly * ib * ce)
                # 3x3 block over (x, y, yaw) per active row.
                b_xx = hxx
                b_xy = hxy
                b_yy = hyy
                b_xth = hxx * qx + hxy * qy
                b_yth = hxy * qx + hyy * qy
                b_thth = (qx * (hxx * qx + hxy * qy) + qy * (hxy * qx + hyy * qy)
                          + gpx * rxx + gpy * ryy)
                wk = w_obs[active]
                ks = self._obs_k[active]
                acc = np.zeros((N + 1, 3, 3))
                blocks = np.empty((len(active), 3, 3))
                blocks[:, 0, 0] = wk * b_xx
                blocks[:, 0, 1] = blocks[:, 1, 0] = wk * b_xy
                blocks[:, 1, 1] = wk * b_yy
                blocks[:, 0, 2] = blocks[:, 2, 0] = wk * b_xth
                blocks[:, 1, 2] = blocks[:, 2, 1] = wk * b_yth
                blocks[:, 2, 2] = wk * b_thth
                np.add.at(acc, ks, blocks)
                for k in range(1, N + 1):
                    if not np.any(acc[k]):
                        continue
                    sl = self.state_index(k).start
                    idx = [sl + IX, sl + IY, sl + IYAW]
                    H[np.ix_(idx, idx)] -= acc[k]
        return H

    # -- constraints --------------------------------------------------------
    def constraints(self, z):
        z = np.asarray(z, dtype=float)
        d = self._common(z, False)
        X, U = d["X"], d["U"]
        cfg = self.config
        out = np.empty(self.num_constraints)
        o = 0
        out[o : o + NX] = X[0] - self.x0
        o += NX
        pred = rk4_step_batch(X[:-1], U, self.params, cfg.dt)
        out[o : o + self.m_dyn] = (X[1:] - pred).ravel()
        o += self.m_dyn
        out[o : o + self.m_lat] = X[:-1, IV] ** 2 * U[:, 1] / self.params.wheelbase
        o += self.m_lat
        prev = np.concatenate([[self.prev_accel], U[:-1, 0]])
        out[o : o + self.m_jerk] = (U[:, 0] - prev) / cfg.dt
        o += self.m_jerk
        if self.m_bound:
            pos = X[1:, [IX, IY]]
            left = ((pos[:, 0] - d["lb0"][:, 0]) * (d["lb1"][:, 1] - d["lb0"][:, 1])
                    - (pos[:, 1] - d["lb0"][:, 1]) * (d["lb1"][:, 0] - d["lb0"][:, 0]))
            right = ((pos[:, 0] - d["rb0"][:, 0]) * (d["rb1"][:, 1] - d["rb0"][:, 1])
                     - (pos[:, 1] - d["rb0"][:, 1]) * (d["rb1"][:, 0] - d["rb0"][:, 0]))
            out[o : o + self.m_bound : 2] = left
            out[o + 1 : o + self.m_bound : 2] = -right
            o += self.m_bound
        if self.m_obs:
            out[o:] = self._obstacle_values(X)[0]
        return out

    def _obstacle_values(self, X):
        yaw = X[self._obs_k, IYAW]
        c, s = np.cos(yaw), np.sin(yaw)
        ox, oy = self._obs_off[:, 0], self._obs_off[:, 1]
        px = X[self._obs_k, IX] + c * ox - s * oy
        py = X[self._obs_k, IY] + s * ox + c * oy
        dx = px - self._obs_c[:, 0]
        dy = py - self._obs_c[:, 1]
        ce, se = self._obs_rot[:, 0], self._obs_rot[:, 1]
        lx = (ce * dx + se * dy) * self._obs_ir[:, 0]
        ly = (-se * dx + ce * dy) * self._obs_ir[:, 1]
        vals = lx * lx + ly * ly
        aux = (c, s, ox, oy, ce, se, lx, ly)
        return vals, aux

    def jacobian(self, z):
        z = np.asarray(z, dtype=float)
        d = self._common(z, True)
        X, U = d["X"], d["U"]
        cfg = self.config
        N = self.N
        J = np.zeros((self.num_constraints, self.num_vars))
        o = 0
        J[o : o + NX, : NX] = np.eye(NX)
        o += NX

        Jx, Ju = rk4_jacobians(X[:-1], U, self.params, cfg.dt)
        J[self._dyn_rows_eye, self._dyn_cols_eye] = 1.0
        J[self._dyn_rows_x, self._dyn_cols_x] = -Jx.ravel()
        J[self._dyn_rows_u, self._dyn_cols_u] = -Ju.ravel()
        o += self.m_dyn

        L = self.params.wheelbase
        ks = np.arange(N)
        u_off = self._u_off
        J[o + ks, NX * ks + IV] = 2.0 * X[:-1, IV] * U[:, 1] / L
        J[o + ks, u_off + NU * ks + 1] = X[:-1, IV] ** 2 / L
        o += self.m_lat

        J[o + ks, u_off + NU * ks] = 1.0 / cfg.dt
        J[o + ks[1:], u_off + NU * (ks[1:] - 1)] = -1.0 / cfg.dt
        o += self.m_jerk

        if self.m_bound:
            for i, k in enumerate(range(1, N + 1)):
                sl = self.state_index(k).start
                p = X[k, [IX, IY]]
                for j, (b0, b1, b0d, b1d, sign) in enumerate(
                    (
                        (d["lb0"][i], d["lb1"][i], d["lb0_d"][i], d["lb1_d"][i], 1.0),
                        (d["rb0"][i], d["rb1"][i], d["rb0_d"][i], d["rb1_d"][i], -1.0),
                    )
                ):
                    r = o + 2 * i + j
                    J[r, sl + IX] = sign * (b1[1] - b0[1])
                    J[r, sl + IY] = sign * (-(b1[0] - b0[0]))
                    db0 = np.array([p[1] - b1[1], b1[0] - p[0]])
                    db1 = np.array([-(p[1] - b0[1]), p[0] - b0[0]])
                    dside = float(db0 @ b0d + db1 @ b1d) * d["ds0"][i]
                    J[r, sl + IPROG] = sign * dside
            o += self.m_bound

        if self.m_obs:
            _, (c, s, ox, oy, ce, se, lx, ly) = self._obstacle_values(X)
            dv_dpx = 2.0 * (lx * self._obs_ir[:, 0] * ce - ly * self._obs_ir[:, 1] * se)
            dv_dpy = 2.0 * (lx * self._obs_ir[:, 0] * se + ly * self._obs_ir[:, 1] * ce)
            dp_dyaw_x = -s * ox - c * oy
            dp_dyaw_y = c * ox - s * oy
            rows = o + np.arange(self.m_obs)
            cols = NX * self._obs_k
            J[rows, cols + IX] = dv_dpx
            J[rows, cols + IY] = dv_dpy
            J[rows, cols + IYAW] = dv_dpx * dp_dyaw_x + dv_dpy * dp_dyaw_y
        return J


def build_nlp(x0, refs: ReferenceSet, horizon: ObstacleHorizon, config: OcpConfig,
              params: VehicleParams, Q: float | None = None, prev_accel: float = 0.0,
              include_boundary: bool = True) -> DrivingNlp:
    """Assemble the driving NLP for one tick's parameters."""
    return DrivingNlp(x0, refs, horizon, config, params, Q=Q, prev_accel=prev_accel,
                      include_boundary=include_boundary)
