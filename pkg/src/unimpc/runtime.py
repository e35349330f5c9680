"""Receding-horizon runtime: warm starts and the dual-solver protocol.

The online solver commands the vehicle every tick from a shifted warm start.
A second, exploration solver repeatedly solves the newest published problem
from a zero initialization with a much larger iteration budget; its results
land in a latest-wins mailbox.  Before each online solve the controller polls
the mailbox, re-costs the candidate under the current tick's parameters, and
adopts it only when strictly cheaper than the shifted warm start.

Exchanges between the two sides never block: both directions go through
single-slot latest-wins containers.  The exploration side can run either on a
real thread or on a deterministic tick-driven schedule (used by the
simulation harness so runs are reproducible).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NU, NX, ControlInput, VehicleState
from .ocp import DrivingNlp
from .solver import SolveResult, SolverOptions, cost_of, max_violation, solve


@dataclass(frozen=True)
class WarmStart:
    """Initial decision vector for one online solve and where it came from."""

    vector: np.ndarray
    source: str  # previous_shifted | exploration | cold
    source_cost: float


class LatestSlot:
    """Single-item overwrite slot; reads and writes never block."""

    def __init__(self):
        self._lock = threading.Lock()
        self._item = None

    def put(self, item):
        with self._lock:
            self._item = item

    def get(self):
        with self._lock:
            return self._item

    def take(self):
        with self._lock:
            item = self._item
            self._item = None
            return item


class ExplorationMailbox:
    """Latest exploration result, stamped with the tick id it solved against."""

    def __init__(self):
        self._slot = LatestSlot()

    def publish(self, stamp: int, result: SolveResult):
        self._slot.put((stamp, result))

    def poll(self):
        """Most recent (stamp, result) or None; never blocks, never consumes."""
        return self._slot.get()


def shift_warm_start(prev: SolveResult) -> WarmStart:
    """Shift a horizon solution one step: drop step 0, duplicate the tail."""
    z = np.asarray(prev.solution, dtype=float)
    N = (len(z) - NX) // (NX + NU)
    states = z[: NX * (N + 1)].reshape(N + 1, NX)
    inputs = z[NX * (N + 1):].reshape(N, NU)
    shifted_states = np.vstack([states[1:], states[-1]])
    shifted_inputs = np.vstack([inputs[1:], inputs[-1]])
    return WarmStart(
        np.concatenate([shifted_states.ravel(), shifted_inputs.ravel()]),
        "previous_shifted",
        prev.objective,
    )


def select_warm_start(prev_online: SolveResult | None, mailbox: ExplorationMailbox,
                      problem: DrivingNlp) -> WarmStart:
    """Pick the online solver's start for the current tick's problem.

    The shifted previous solution is the default.  A polled exploration
    result is adopted only when its cost, re-evaluated under the current
    parameters, is strictly lower than the shifted baseline's re-evaluated
    cost.  The first tick starts cold from the zero vector.
    """
    if prev_online is None:
        return WarmStart(problem.initial_vector(), "cold", float("inf"))
    base = shift_warm_start(prev_online)
    base_vec = rebase_progress(problem, base.vector)
    base_cost, _ = cost_of(problem, base_vec)
    base = WarmStart(base_vec, base.source, base_cost)
    polled = mailbox.poll() if mailbox is not None else None
    if polled is None:
        return base
    _, candidate = polled
    if candidate.solution is None or len(candidate.solution) != problem.num_vars:
        return base
    cand_vec = rebase_progress(problem, np.asarray(candidate.solution, dtype=float))
    try:
        cand_cost, _ = cost_of(problem, cand_vec)
    except ValueError:
        return base
    if cand_cost < base_cost:
        return WarmStart(cand_vec, "exploration", cand_cost)
    return base


def rebase_progress(problem: DrivingNlp, vector: np.ndarray) -> np.ndarray:
    """Re-project a warm start's progress entries onto the current reference.

    The reference window slides between ticks, so progress values solved
    against an older spline are re-estimated from the stored positions.
    """
    from .splines import project_points_to_spline

    z = np.array(vector, dtype=float)
    states = z[: NX * (problem.N + 1)].reshape(problem.N + 1, NX)
    s = project_points_to_spline(problem.refs.center, states[:, :2])
    states[:, 5] = np.maximum.accumulate(s)  # keep progress monotone
    z[: NX * (problem.N + 1)] = states.ravel()
    return z


@dataclass
class TickResult:
    """Everything one controller tick produced."""

    control: ControlInput
    solve: SolveResult
    warm_source: str
    warm_cost: float
    Q: float
    degraded: bool
    mailbox_stamp: int | None
    solve_time_total: float = 0.0


class ExplorationTask:
    """Zero-initialized high-budget solver feeding the mailbox.

    In deterministic mode (`threaded=False`) the task is driven by
    `on_tick`: a published problem is solved synchronously but its result
    becomes visible only `latency_ticks` later, and newer publications
    supersede queued ones (latest wins).  In threaded mode a daemon thread
    consumes the latest published problem as fast as it can.
    """

    def __init__(self, options: SolverOptions | None = None, latency_ticks: int = 1,
                 threaded: bool = False):
        self.options = options or SolverOptions(max_iterations=300)
        self.latency_ticks = max(1, int(latency_ticks))
        self.mailbox = ExplorationMailbox()
        self._params = LatestSlot()
        self._pending = None  # (ready_tick, stamp, result)
        self._threaded = threaded
        self._stop = threading.Event()
        self._thread = None
        if threaded:
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def publish_problem(self, stamp: int, problem: DrivingNlp):
        self._params.put((stamp, problem))

    def on_tick(self, now: int):
        """Deterministic schedule: deliver finished work, start the newest."""
        if self._threaded:
            return
        if self._pending is not None:
            ready, stamp, result = self._pending
            if now >= ready:
                if result is not None:
                    self.mailbox.publish(stamp, result)
                self._pending = None
        if self._pending is None:
            item = self._params.take()
            if item is not None:
                stamp, problem = item
                result = self._solve(problem)
                self._pending = (now + self.latency_ticks, stamp, result)

    def _solve(self, problem: DrivingNlp):
        seed = getattr(problem, "exploration_seed", None)
        init = seed() if seed is not None else problem.initial_vector()
        try:
            return solve(problem, init, self.options)
        except (ValueError, FloatingPointError):
            return None

    def _run(self):
        while not self._stop.is_set():
            item = self._params.take()
            if item is None:
                time.sleep(1e-3)
                continue
            stamp, problem = item
            result = self._solve(problem)
            if result is not None:
                self.mailbox.publish(stamp, result)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)


class Controller:
    """Online receding-horizon controller with optional exploration support."""

    def __init__(self, online_options: SolverOptions | None = None,
                 exploration: ExplorationTask | None = None):
        self.online_options = online_options or SolverOptions(max_iterations=30, mu_init=1e-3)
        self.exploration = exploration
        self.prev_result: SolveResult | None = None
        self.prev_accel = 0.0
        self.tick_id = 0
        self._degraded_index = 0

    # A returned plan whose worst violation exceeds this is not trusted to
    # command the vehicle.
    plan_violation_limit: float = 1e-2

    def tick(self, problem: DrivingNlp) -> TickResult:
        """Solve the bound problem, apply its first input, publish parameters."""
        mailbox = self.exploration.mailbox if self.exploration is not None else None
        warm = select_warm_start(self.prev_result, mailbox, problem)
        stamp = None
        if mailbox is not None:
            polled = mailbox.poll()
            stamp = polled[0] if polled is not None else None

        # Safety filter: a shifted plan that now penetrates an obstacle is
        # swapped for the comfort-braking rollout up front; boundary or
        # comfort defects are routine repairs and do not trigger this.
        solve_time = 0.0
        if warm.source != "cold":
            pen_warm = problem.worst_obstacle_violation(warm.vector)
            if pen_warm > self.plan_violation_limit:
                fallback = problem.braking_fallback()
                if problem.worst_obstacle_violation(fallback) < pen_warm:
                    cost_fb, _ = cost_of(problem, fallback)
                    warm = WarmStart(fallback, warm.source, cost_fb)

        result = solve(problem, warm.vector, self.online_options)
        solve_time += result.wall_time

        # Backstop: if the returned plan still penetrates an obstacle, solve
        # once more from the braking rollout and keep the cleaner plan.
        pen = problem.worst_obstacle_violation(result.solution)
        if pen > self.plan_violation_limit and result.status != "numerical_failure":
            retry = solve(problem, problem.braking_fallback(), self.online_options)
            solve_time += retry.wall_time
            if problem.worst_obstacle_violation(retry.solution) < pen:
                result = retry

        if result.status == "numerical_failure" or \
                problem.worst_obstacle_violation(result.solution) > self.plan_violation_limit:
            control = self._degraded_control()
            degraded = True
        else:
            degraded = False
            self._degraded_index = 0
            u0 = result.solution[NX * (problem.N + 1): NX * (problem.N + 1) + NU]
            control = self._saturate(ControlInput.from_array(u0), problem)
            self.prev_result = result
            self.prev_accel = control.accel

        if self.exploration is not None:
            self.exploration.publish_problem(self.tick_id, problem)
            self.exploration.on_tick(self.tick_id)
        out = TickResult(control, result, warm.source, warm.source_cost,
                         problem.Q, degraded, stamp, solve_time_total=solve_time)
        self.tick_id += 1
        return out

    def _saturate(self, control: ControlInput, problem: DrivingNlp) -> ControlInput:
        """Actuator-level comfort saturation of the applied input.

        Converged plans already satisfy these; the clamp only trims the first
        input of a non-converged iterate so the commanded acceleration, jerk,
        steering range, and lateral acceleration never leave their envelopes.
        """
        cfg = problem.config
        accel = float(np.clip(control.accel, -cfg.accel_bound, cfg.accel_bound))
        accel = float(np.clip(accel, self.prev_accel + cfg.jerk_min * cfg.dt,
                              self.prev_accel + cfg.jerk_max * cfg.dt))
        steer_cap = cfg.steer_bound
        v = float(problem.x0[3])
        if v > 1e-6:
            steer_cap = min(steer_cap,
                            cfg.lat_accel_bound * problem.params.wheelbase / (v * v))
        steer = float(np.clip(control.steer, -steer_cap, steer_cap))
        rate = float(np.clip(control.progress_rate, 0.0, cfg.progress_rate_max))
        return ControlInput(accel, steer, rate)

    def _degraded_control(self) -> ControlInput:
        """Consume the previous solution's later inputs, then brake hard."""
        self._degraded_index += 1
        if self.prev_result is not None:
            N = (len(self.prev_result.solution) - NX) // (NX + NU)
            u_off = NX * (N + 1)
            idx = self._degraded_index
            if idx < N:
                u = self.prev_result.solution[u_off + NU * idx: u_off + NU * (idx + 1)]
                control = ControlInput.from_array(u)
                self.prev_accel = control.accel
                return control
        self.prev_accel = -3.5
        return ControlInput(-3.5, 0.0, 0.0)
