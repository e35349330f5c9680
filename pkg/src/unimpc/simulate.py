"""Closed-loop simulation: plant + controller + world model + metrics.

The plant integrates the same kinematic bicycle as the predictive model (an
optional zero-mean Gaussian disturbance can be enabled per scenario).  Each
tick the harness re-fits the sliding reference window, rebuilds the obstacle
horizon, estimates the measured path integral by projecting the plant
position onto the current reference, runs one controller tick, and applies
the first input.  Runs are deterministic for a fixed scenario, configuration
and seed (solver wall times are recorded but never feed back into control).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import IPROG, IV, IX, IY, IYAW, NU, NX, ControlInput, VehicleParams, VehicleState, lateral_accel, rk4_step
from .ocp import OcpConfig, build_nlp, footprint_points, in_ellipse_value, q_schedule
from .runtime import Controller, ExplorationTask, TickResult
from .solver import SolverOptions
from .splines import (
    ReferenceSet,
    fit_spline,
    polyline_arclength,
    project_points_to_spline,
    project_to_spline,
    sidedness,
    window_indices,
)
from .world import (
    Ellipse,
    ObstacleHorizon,
    OccupancyGrid,
    VehicleTrack,
    grid_to_ellipses,
    interp_point_at_distance,
    locate_on_polyline,
    predict_dynamic,
)


class ScenarioError(ValueError):
    """Scenario file or definition is inconsistent."""


@dataclass
class Scenario:
    """One closed-loop experiment definition."""

    name: str
    centerline: np.ndarray
    left_boundary: np.ndarray
    right_boundary: np.ndarray
    v_max: float
    initial_state: VehicleState
    duration: float
    grid: OccupancyGrid | None = None
    tracks: list = field(default_factory=list)
    disable_boundary_constraints: bool = False
    disable_exploration_solver: bool = False
    window: float = 60.0
    margin: float = 5.0
    pieces: int = 8
    metrics_pieces: int = 16
    noise_std: float = 0.0
    note: str = ""

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        self.left_boundary = np.asarray(self.left_boundary, dtype=float)
        self.right_boundary = np.asarray(self.right_boundary, dtype=float)
        if not (len(self.centerline) == len(self.left_boundary) == len(self.right_boundary)):
            raise ScenarioError("centerline and boundary polylines must share sample counts")
        if len(self.centerline) < 4:
            raise ScenarioError("route needs at least 4 samples")

    def route_length(self) -> float:
        return float(polyline_arclength(self.centerline)[-1])

    def full_refs(self, pieces: int | None = None) -> ReferenceSet:
        p = pieces or self.metrics_pieces
        return ReferenceSet(
            fit_spline(self.centerline, p),
            fit_spline(self.left_boundary, p),
            fit_spline(self.right_boundary, p),
        )

    def validate(self):
        """Every centerline sample must lie between the boundary splines."""
        refs = self.full_refs()
        la = refs.lookahead
        s = np.minimum(project_points_to_spline(refs.left, self.centerline), 1.0 - la)
        s_r = np.minimum(project_points_to_spline(refs.right, self.centerline), 1.0 - la)
        for i, p in enumerate(self.centerline):
            left_ok = sidedness(p, refs.left.eval(s[i]), refs.left.eval(s[i] + la)) > 0
            right_ok = sidedness(p, refs.right.eval(s_r[i]), refs.right.eval(s_r[i] + la)) < 0
            if not (left_ok and right_ok):
                raise ScenarioError(
                    f"centerline sample {i} at {p.tolist()} is outside the boundaries"
                )


@dataclass
class TickRecord:
    """One row of the run log."""

    tick: int
    t: float
    state: np.ndarray            # plant state, measured progress in [5]
    control: np.ndarray
    Q: float
    warm_source: str
    warm_cost: float
    objective: float
    status: str
    iterations: int
    wall_time: float
    violation: float
    mailbox_stamp: int | None
    n_obstacles: int
    route_frac: float
    clearance: float
    boundary_ok: bool
    lateral_deviation: float
    degraded: bool


@dataclass
class RunLog:
    scenario_name: str
    config: OcpConfig
    seed: int
    records: list = field(default_factory=list)
    collided: bool = False
    boundary_violated: bool = False
    failed: bool = False
    final_route_frac: float = 0.0
    track_final_arcs: list = field(default_factory=list)
    reference_text: str = ""
    wheelbase: float = 2.9


@dataclass
class MetricsReport:
    max_lateral_deviation: float
    solve_time_max: float
    solve_time_p95: float
    solve_time_mean: float
    comfort_violations: int
    worst_lat_accel: float
    worst_jerk: float
    worst_accel: float
    min_clearance: float
    boundary_violations: int
    mean_speed: float
    peak_speed: float
    route_completion: float
    mean_speed_straights: float
    ticks: int
    exploration_adoptions: int
    final_route_frac: float
    final_track_arcs: list

    def to_text(self) -> str:
        lines = [
            f"ticks: {self.ticks}",
            f"route_completion: {self.route_completion:.4f}",
            f"max_lateral_deviation_m: {self.max_lateral_deviation:.4f}",
            f"solve_time_max_s: {self.solve_time_max:.4f}",
            f"solve_time_p95_s: {self.solve_time_p95:.4f}",
            f"solve_time_mean_s: {self.solve_time_mean:.4f}",
            f"comfort_violations: {self.comfort_violations}",
            f"worst_lat_accel: {self.worst_lat_accel:.4f}",
            f"worst_jerk: {self.worst_jerk:.4f}",
            f"worst_accel: {self.worst_accel:.4f}",
            f"min_clearance_m: {self.min_clearance:.4f}",
            f"boundary_violations: {self.boundary_violations}",
            f"mean_speed_mps: {self.mean_speed:.4f}",
            f"peak_speed_mps: {self.peak_speed:.4f}",
            f"mean_speed_straights_mps: {self.mean_speed_straights:.4f}",
            f"exploration_adoptions: {self.exploration_adoptions}",
            f"final_track_arcs_m: {' '.join(f'{a:.2f}' for a in self.final_track_arcs)}",
        ]
        return "\n".join(lines) + "\n"


def footprint_clearance(state, ellipses, params: VehicleParams) -> float:
    """Min scaled ellipse-frame distance from footprint points to obstacles.

    For each footprint point p and ellipse: (sqrt(containment) - 1) * min
    radius, an exact distance for circles and a conservative lower bound
    otherwise.  Positive means clear of every obstacle; +inf with none.
    """
    if not ellipses:
        return float("inf")
    yaw = state[IYAW]
    c, s = math.cos(yaw), math.sin(yaw)
    pts = state[[IX, IY]] + footprint_points(params) @ np.array([[c, s], [-s, c]])
    worst = float("inf")
    for el in ellipses:
        scale = min(el.rx, el.ry)
        for p in pts:
            worst = min(worst, (math.sqrt(in_ellipse_value(p, el)) - 1.0) * scale)
    return worst


def default_online_options() -> SolverOptions:
    """Warm-started low-budget settings for the commanding solver."""
    return SolverOptions(max_iterations=24, mu_init=3e-4, mu_shrink=0.1,
                         tol_opt=2e-3, tol_feas=3e-7, mu_min=1e-8,
                         stagnation_window=12)


def default_exploration_options() -> SolverOptions:
    """Zero-initialized high-budget settings (10x the online iteration cap)."""
    return SolverOptions(max_iterations=240, mu_init=0.1, mu_shrink=0.1,
                         tol_opt=5e-3, tol_feas=3e-7, mu_min=1e-8,
                         stagnation_window=30)


def simulate(scenario: Scenario, config: OcpConfig | None = None, seed: int = 0,
             max_ticks: int | None = None,
             online_options: SolverOptions | None = None,
             exploration_options: SolverOptions | None = None,
             exploration_latency: int = 3) -> RunLog:
    """Run the closed loop until duration, route completion, or failure."""
    config = config or OcpConfig()
    scenario.validate()
    params = VehicleParams(v_max=scenario.v_max)
    rng = np.random.default_rng(seed)

    center = scenario.centerline
    arc = polyline_arclength(center)
    route_len = float(arc[-1])
    full_refs = scenario.full_refs()

    # Static world: grid clusters filtered against the full-route surface.
    static_ellipses = []
    if scenario.grid is not None:
        static_ellipses = grid_to_ellipses(scenario.grid, rad=4, refs=full_refs)

    exploration = None
    if not scenario.disable_exploration_solver:
        exploration = ExplorationTask(
            exploration_options or default_exploration_options(),
            latency_ticks=exploration_latency,
        )
    controller = Controller(online_options or default_online_options(), exploration)

    plant = scenario.initial_state.as_array()
    track_arcs = []
    for tr in scenario.tracks:
        a, gap = locate_on_polyline(center, tr.pos)
        if gap > 3.0:
            raise ScenarioError(f"track at {tr.pos} is {gap:.1f} m off the route")
        track_arcs.append(a)

    log = RunLog(scenario.name, config, seed,
                 reference_text=full_refs.center.to_text(), wheelbase=params.wheelbase)
    avoid_mode = False
    n_ticks = int(round(scenario.duration / config.dt))
    if max_ticks is not None:
        n_ticks = min(n_ticks, max_ticks)

    for tick in range(n_ticks):
        # Measurement (exact odometry; optional disturbance is plant-side).
        measured = plant.copy()

        ego_arc, _ = locate_on_polyline(center, measured[[IX, IY]])
        first, last = window_indices(arc, ego_arc, scenario.window, scenario.margin)
        refs = ReferenceSet(
            fit_spline(center[first : last + 1], scenario.pieces),
            fit_spline(scenario.left_boundary[first : last + 1], scenario.pieces),
            fit_spline(scenario.right_boundary[first : last + 1], scenario.pieces),
        )
        measured[IPROG] = project_to_spline(refs.center, measured[[IX, IY]])

        dyn_trajs = []
        for tr, a in zip(scenario.tracks, track_arcs):
            pos = interp_point_at_distance(center, arc, a)
            moved = VehicleTrack((float(pos[0]), float(pos[1])), tr.lon_vel, tr.rx, tr.ry)
            dyn_trajs.append(predict_dynamic(moved, center, config.dt, config.horizon + 1))
        horizon = ObstacleHorizon.assemble(static_ellipses, dyn_trajs, config.horizon + 1)

        # The avoidance weight keys off the vehicle's leading extent (the
        # front bumper reaches an obstacle first) and latches: once avoiding,
        # the mode holds until the obstacle falls well outside the switch
        # distance, so the weight cannot chatter mid-maneuver.
        bumper = measured[[IX, IY]] + (params.length / 2.0) * np.array(
            [math.cos(measured[IYAW]), math.sin(measured[IYAW])]
        )
        near = max(q_schedule(measured[[IX, IY]], horizon, config),
                   q_schedule(bumper, horizon, config)) == config.q_avoid
        if near:
            avoid_mode = True
        elif avoid_mode and horizon.step(0):
            far = min(el.boundary_distance(bumper) for el in horizon.step(0))
            if far > 2.0 * config.q_switch_distance:
                avoid_mode = False
        elif not horizon.step(0):
            avoid_mode = False
        Q = config.q_avoid if avoid_mode else config.q_follow
        problem = build_nlp(
            VehicleState.from_array(measured), refs, horizon, config, params,
            Q=Q, prev_accel=controller.prev_accel,
            include_boundary=not scenario.disable_boundary_constraints,
        )
        result = controller.tick(problem)

        # Apply the first input to the plant.
        control = result.control
        plant = rk4_step(VehicleState.from_array(plant), control, params, config.dt).as_array()
        if scenario.noise_std > 0.0:
            plant[[IX, IY, IYAW, IV]] += rng.normal(scale=scenario.noise_std, size=4)
            plant[IV] = max(plant[IV], 0.0)
        # Advance ground-truth tracks along the lane at constant speed.
        track_arcs = [a + tr.lon_vel * config.dt for tr, a in zip(scenario.tracks, track_arcs)]

        new_arc, _ = locate_on_polyline(center, plant[[IX, IY]])
        route_frac = new_arc / route_len if route_len > 0 else 1.0

        current_obstacles = list(horizon.step(0))
        clearance = footprint_clearance(plant, current_obstacles, params)
        boundary_ok = _inside_boundaries(plant[[IX, IY]], full_refs)
        lat_dev = _lateral_deviation(plant[[IX, IY]], full_refs.center)

        log.records.append(TickRecord(
            tick=tick, t=tick * config.dt, state=measured.copy(),
            control=control.as_array(), Q=Q,
            warm_source=result.warm_source, warm_cost=result.warm_cost,
            objective=result.solve.objective, status=result.solve.status,
            iterations=result.solve.iterations, wall_time=result.solve_time_total,
            violation=result.solve.max_constraint_violation,
            mailbox_stamp=result.mailbox_stamp, n_obstacles=len(current_obstacles),
            route_frac=route_frac, clearance=clearance, boundary_ok=boundary_ok,
            lateral_deviation=lat_dev, degraded=result.degraded,
        ))

        if clearance <= 0.0:
            log.collided = True
        if not boundary_ok:
            log.boundary_violated = True
        if result.degraded and controller._degraded_index > config.horizon:
            log.failed = True
            break
        if route_frac >= 0.99:
            break

    if exploration is not None:
        exploration.stop()
    log.final_route_frac = log.records[-1].route_frac if log.records else 0.0
    log.track_final_arcs = list(track_arcs)
    return log


def _inside_boundaries(p, refs: ReferenceSet) -> bool:
    la = refs.lookahead
    s_l = min(project_to_spline(refs.left, p), 1.0 - la)
    s_r = min(project_to_spline(refs.right, p), 1.0 - la)
    left = sidedness(p, refs.left.eval(s_l), refs.left.eval(s_l + la))
    right = sidedness(p, refs.right.eval(s_r), refs.right.eval(s_r + la))
    return left > 0.0 and right < 0.0


def _lateral_deviation(p, spline) -> float:
    s = project_to_spline(spline, p, grid=2000)
    return float(np.linalg.norm(spline.eval(s) - np.asarray(p, dtype=float)))


def compute_metrics(log: RunLog, scenario: Scenario) -> MetricsReport:
    """Deterministic pure summary of a run log against its scenario."""
    if not log.records:
        raise ValueError("empty run log")
    config = log.config
    params = VehicleParams(v_max=scenario.v_max)
    refs = scenario.full_refs()

    states = np.array([r.state for r in log.records])
    controls = np.array([r.control for r in log.records])
    lat_dev = max(_lateral_deviation(st[[IX, IY]], refs.center) for st in states)

    times = np.array([r.wall_time for r in log.records])
    solve_max = float(times.max())
    solve_p95 = float(np.percentile(times, 95))
    solve_mean = float(times.mean())

    # Comfort replay per the constraint formulas on the logged trajectory.
    tol = 1e-6
    lat = np.array([lateral_accel(st[IV], u[1], params) for st, u in zip(states, controls)])
    prev_a = np.concatenate([[0.0], controls[:-1, 0]])
    jerks = (controls[:, 0] - prev_a) / config.dt
    accels = controls[:, 0]
    violations = int(np.sum(np.abs(lat) > config.lat_accel_bound + tol)
                     + np.sum((jerks < config.jerk_min - tol) | (jerks > config.jerk_max + tol))
                     + np.sum(np.abs(accels) > config.accel_bound + tol))

    clearances = np.array([r.clearance for r in log.records])
    boundary_violations = int(np.sum([not r.boundary_ok for r in log.records]))
    speeds = states[:, IV]

    # Straight segments: curvature of the metrics reference below threshold.
    s_grid = np.array([project_to_spline(refs.center, st[[IX, IY]], grid=2000) for st in states])
    d1 = refs.center.deriv(s_grid)
    d2 = refs.center.second_deriv(s_grid)
    num = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    den = np.maximum(np.linalg.norm(d1, axis=1) ** 3, 1e-9)
    curvature = num / den
    straight = curvature < 0.01
    mean_straight = float(speeds[straight].mean()) if np.any(straight) else float(speeds.mean())

    return MetricsReport(
        max_lateral_deviation=float(lat_dev),
        solve_time_max=solve_max,
        solve_time_p95=solve_p95,
        solve_time_mean=solve_mean,
        comfort_violations=violations,
        worst_lat_accel=float(np.max(np.abs(lat))),
        worst_jerk=float(jerks[np.argmax(np.abs(jerks))]),
        worst_accel=float(accels[np.argmax(np.abs(accels))]),
        min_clearance=float(clearances.min()),
        boundary_violations=boundary_violations,
        mean_speed=float(speeds.mean()),
        peak_speed=float(speeds.max()),
        route_completion=float(log.final_route_frac),
        mean_speed_straights=mean_straight,
        ticks=len(log.records),
        exploration_adoptions=int(sum(r.warm_source == "exploration" for r in log.records)),
        final_route_frac=float(log.final_route_frac),
        final_track_arcs=[float(a) for a in log.track_final_arcs],
    )


RUN_CSV_COLUMNS = (
    "tick,t,x,y,yaw,v,v_fwd,progress,accel,steer,progress_rate,Q,warm_source,"
    "warm_cost,objective,status,iterations,wall_time,violation,mailbox_stamp,"
    "n_obstacles,route_frac,clearance,boundary_ok,lateral_deviation,degraded"
)


def emit(log: RunLog, report: MetricsReport, out_dir) -> list:
    """Write run.csv, metrics.txt, and plot-ready series; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if v is None:
            return ""
        if isinstance(v, (bool, np.bool_)):
            return "1" if v else "0"
        return str(v)

    run_csv = out / "run.csv"
    with run_csv.open("w") as f:
        f.write(RUN_CSV_COLUMNS + "\n")
        for r in log.records:
            cells = [r.tick, float(r.t), *[float(v) for v in r.state],
                     *[float(v) for v in r.control], float(r.Q), r.warm_source,
                     float(r.warm_cost), float(r.objective), r.status, r.iterations,
                     float(r.wall_time), float(r.violation), r.mailbox_stamp,
                     r.n_obstacles, float(r.route_frac), float(r.clearance),
                     r.boundary_ok, float(r.lateral_deviation), r.degraded]
            f.write(",".join(fmt(c) for c in cells) + "\n")
    paths.append(run_csv)

    metrics_txt = out / "metrics.txt"
    metrics_txt.write_text(report.to_text())
    paths.append(metrics_txt)

    comfort_rows = []
    prev_a = 0.0
    for r in log.records:
        lat = float(r.state[IV]) ** 2 * float(r.control[1]) / log.wheelbase
        jerk = (float(r.control[0]) - prev_a) / log.config.dt
        prev_a = float(r.control[0])
        comfort_rows.append((float(r.t), lat, jerk, float(r.control[0])))

    series = {
        "velocity.csv": ("t,v", [(float(r.t), float(r.state[IV])) for r in log.records]),
        "comfort.csv": ("t,lat_accel,jerk,accel", comfort_rows),
        "solve_times.csv": ("t,wall_time,iterations,status",
                            [(float(r.t), float(r.wall_time), r.iterations, r.status)
                             for r in log.records]),
        "trajectory.csv": ("t,x,y,lateral_deviation,clearance,boundary_ok",
                           [(float(r.t), float(r.state[IX]), float(r.state[IY]),
                             float(r.lateral_deviation), float(r.clearance),
                             int(r.boundary_ok)) for r in log.records]),
    }
    for fname, (header, rows) in series.items():
        p = out / fname
        with p.open("w") as f:
            f.write(header + "\n")
            for row in rows:
                f.write(",".join(fmt(v) for v in row) + "\n")
        paths.append(p)

    splines_txt = out / "reference_spline.txt"
    splines_txt.write_text(log.reference_text)
    paths.append(splines_txt)
    return paths


def parse_run_csv(path) -> list:
    """Read run.csv back into per-tick dicts (floats exact via repr round-trip)."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = dict(zip(header, cells))
        rows.append(row)
    return rows
