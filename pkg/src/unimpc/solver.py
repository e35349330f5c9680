"""Primal-dual interior-point solver for smooth nonlinear programs.

Problems are posed IPOPT-style:

    min f(x)   s.t.  cl <= c(x) <= cu,   lb <= x <= ub

Rows with cl == cu are equalities; the rest get slack variables and a log
barrier.  Variable bounds are handled directly through bound duals.  Each
iteration solves a reduced KKT system (dense at this problem scale), takes a
fraction-to-the-boundary step, and backtracks on an l1 merit function.  The
barrier parameter shrinks by a fixed factor per outer stage.

The solver is deterministic: identical problem, start, and options give
identical iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class NlpProblem:
    """Base interface consumed by the solver.

    Subclasses provide `num_vars`, `objective`, `gradient`, `constraints`,
    `jacobian`, `var_bounds`, `constraint_bounds`; `hessian` optionally
    returns a positive-semidefinite objective-curvature approximation (the
    solver falls back to a damped BFGS model when it returns None).
    """

    num_vars: int = 0

    def objective(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def constraints(self, x) -> np.ndarray:
        return np.zeros(0)

    def jacobian(self, x) -> np.ndarray:
        return np.zeros((0, self.num_vars))

    def var_bounds(self):
        n = self.num_vars
        return np.full(n, -np.inf), np.full(n, np.inf)

    def constraint_bounds(self):
        return np.zeros(0), np.zeros(0)

    def hessian(self, x):
        return None

    @property
    def num_constraints(self) -> int:
        return len(self.constraint_bounds()[0])

    def jacobian_triplets(self, x):
        """(rows, cols, values) of nonzero Jacobian entries."""
        J = self.jacobian(x)
        rows, cols = np.nonzero(J)
        return rows, cols, J[rows, cols]


class FunctionalProblem(NlpProblem):
    """Problem assembled from plain callables; handy for tests and demos."""

    def __init__(self, n, objective, gradient, constraints=None, jacobian=None,
                 cl=None, cu=None, lb=None, ub=None, hessian=None):
        self.num_vars = n
        self._f = objective
        self._g = gradient
        self._c = constraints
        self._J = jacobian
        self._cl = np.asarray(cl, dtype=float) if cl is not None else np.zeros(0)
        self._cu = np.asarray(cu, dtype=float) if cu is not None else np.zeros(0)
        self._lb = np.asarray(lb, dtype=float) if lb is not None else np.full(n, -np.inf)
        self._ub = np.asarray(ub, dtype=float) if ub is not None else np.full(n, np.inf)
        self._h = hessian

    def objective(self, x):
        return float(self._f(x))

    def gradient(self, x):
        return np.asarray(self._g(x), dtype=float)

    def constraints(self, x):
        if self._c is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self._c(x), dtype=float))

    def jacobian(self, x):
        if self._J is None:
            return np.zeros((0, self.num_vars))
        return np.atleast_2d(np.asarray(self._J(x), dtype=float))

    def var_bounds(self):
        return self._lb, self._ub

    def constraint_bounds(self):
        return self._cl, self._cu

    def hessian(self, x):
        if self._h is None:
            return None
        return np.asarray(self._h(x), dtype=float)


@dataclass
class SolverOptions:
    """Iteration caps, tolerances, barrier schedule, derivative selection."""

    max_iterations: int = 100
    tol_feas: float = 1e-7
    tol_opt: float = 1e-6
    stagnation_window: int = 0  # 0 disables the early stagnation exit
    mu_init: float = 0.1
    mu_shrink: float = 0.2
    mu_min: float = 1e-9
    slack_floor: float = 1e-4
    bound_push: float = 1e-2
    tau_boundary: float = 0.995
    kappa_sigma: float = 1e10
    derivatives: str = "analytic"  # or "fd"
    fd_step: float = 1e-6
    trace: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tol_feas <= 0.0 or self.tol_opt <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.derivatives not in ("analytic", "fd"):
            raise ValueError("derivatives must be 'analytic' or 'fd'")


@dataclass
class SolveResult:
    """Best iterate found, with status and accounting."""

    solution: np.ndarray
    objective: float
    status: str
    iterations: int
    wall_time: float
    max_constraint_violation: float
    trace: list = field(default_factory=list)


def max_violation(problem: NlpProblem, x) -> float:
    """Worst constraint or bound violation at a point."""
    x = np.asarray(x, dtype=float)
    lb, ub = problem.var_bounds()
    viol = 0.0
    if len(lb):
        viol = max(viol, float(np.max(np.maximum(lb - x, 0.0), initial=0.0)))
        viol = max(viol, float(np.max(np.maximum(x - ub, 0.0), initial=0.0)))
    c = problem.constraints(x)
    if len(c):
        cl, cu = problem.constraint_bounds()
        viol = max(viol, float(np.max(np.maximum(cl - c, 0.0), initial=0.0)))
        viol = max(viol, float(np.max(np.maximum(c - cu, 0.0), initial=0.0)))
    return viol


def cost_of(problem: NlpProblem, x):
    """Objective and worst violation at a point, for warm-start comparisons."""
    x = np.asarray(x, dtype=float)
    f = float(problem.objective(x))
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the queried point")
    return f, max_violation(problem, x)


def _fd_jacobian(problem: NlpProblem, x, h):
    m = problem.num_constraints
    n = problem.num_vars
    J = np.zeros((m, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        J[:, i] = (problem.constraints(x + step) - problem.constraints(x - step)) / (2 * h)
    return J


def _fd_gradient(problem: NlpProblem, x, h):
    n = problem.num_vars
    g = np.zeros(n)
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        g[i] = (problem.objective(x + step) - problem.objective(x - step)) / (2 * h)
    return g


def jacobian(problem: NlpProblem, x, opts: SolverOptions | None = None) -> np.ndarray:
    """Constraint Jacobian at x, analytic or central-difference per options."""
    opts = opts or SolverOptions()
    x = np.asarray(x, dtype=float)
    if opts.derivatives == "fd":
        J = _fd_jacobian(problem, x, opts.fd_step)
    else:
        J = problem.jacobian(x)
    if J.size and not np.all(np.isfinite(J)):
        raise ValueError("non-finite Jacobian entries")
    return J


class _Canonical:
    """Equality/inequality split of a two-sided problem, with caching."""

    def __init__(self, problem: NlpProblem, opts: SolverOptions):
        self.problem = problem
        self.opts = opts
        self.n = problem.num_vars
        cl, cu = problem.constraint_bounds()
        self.cl, self.cu = np.asarray(cl, float), np.asarray(cu, float)
        eq = np.isfinite(self.cl) & np.isfinite(self.cu) & (self.cu - self.cl <= 1e-12)
        self.eq_idx = np.flatnonzero(eq)
        self.lo_idx = np.flatnonzero(~eq & np.isfinite(self.cl))
        self.up_idx = np.flatnonzero(~eq & np.isfinite(self.cu))
        lb, ub = problem.var_bounds()
        self.lb, self.ub = np.asarray(lb, float), np.asarray(ub, float)
        self.xlo_idx = np.flatnonzero(np.isfinite(self.lb))
        self.xup_idx = np.flatnonzero(np.isfinite(self.ub))
        self.m_eq = len(self.eq_idx)
        self.m_in = len(self.lo_idx) + len(self.up_idx)

    def eval(self, x, need_jac=True):
        c = self.problem.constraints(x)
        f = self.problem.objective(x)
        if self.opts.derivatives == "fd":
            grad = _fd_gradient(self.problem, x, self.opts.fd_step)
        else:
            grad = self.problem.gradient(x)
        if not (np.isfinite(f) and np.all(np.isfinite(grad)) and np.all(np.isfinite(c))):
            raise FloatingPointError("non-finite evaluation")
        out = {"f": float(f), "grad": grad, "c": c}
        out["c_eq"] = c[self.eq_idx] - self.cl[self.eq_idx]
        out["g"] = np.concatenate([c[self.lo_idx] - self.cl[self.lo_idx],
                                   self.cu[self.up_idx] - c[self.up_idx]])
        if need_jac:
            J = jacobian(self.problem, x, self.opts)
            out["J_eq"] = J[self.eq_idx]
            out["J_in"] = np.vstack([J[self.lo_idx], -J[self.up_idx]]) if self.m_in else np.zeros((0, self.n))
        return out

    def residuals_only(self, x):
        c = self.problem.constraints(x)
        f = self.problem.objective(x)
        if not (np.isfinite(f) and np.all(np.isfinite(c))):
            raise FloatingPointError("non-finite evaluation")
        c_eq = c[self.eq_idx] - self.cl[self.eq_idx]
        g = np.concatenate([c[self.lo_idx] - self.cl[self.lo_idx],
                            self.cu[self.up_idx] - c[self.up_idx]])
        return float(f), c_eq, g


class _ScaledView(NlpProblem):
    """Diagonal change of variables y = s * x for better conditioning.

    Problems may expose `var_scales()`; entries > 1 stretch poorly scaled
    coordinates (e.g. a normalized path parameter whose objective curvature
    is route-length squared) so Newton geometry is balanced.
    """

    def __init__(self, inner: NlpProblem, scales: np.ndarray):
        self.inner = inner
        self.s = np.asarray(scales, dtype=float)
        self.num_vars = inner.num_vars
        self.hessian_psd = bool(getattr(inner, "hessian_psd", False))
        if getattr(inner, "lagrangian_hessian", None) is not None:
            self.lagrangian_hessian = self._lagrangian_hessian

    def to_x(self, y):
        return y / self.s

    def to_y(self, x):
        return np.asarray(x, dtype=float) * self.s

    def objective(self, y):
        return self.inner.objective(self.to_x(y))

    def gradient(self, y):
        return self.inner.gradient(self.to_x(y)) / self.s

    def hessian(self, y):
        H = self.inner.hessian(self.to_x(y))
        if H is None:
            return None
        return H / np.outer(self.s, self.s)

    def _lagrangian_hessian(self, y, w):
        H = self.inner.lagrangian_hessian(self.to_x(y), w)
        if H is None:
            return None
        return H / np.outer(self.s, self.s)

    def constraints(self, y):
        return self.inner.constraints(self.to_x(y))

    def jacobian(self, y):
        return self.inner.jacobian(self.to_x(y)) / self.s[None, :]

    def var_bounds(self):
        lb, ub = self.inner.var_bounds()
        return lb * self.s, ub * self.s

    def constraint_bounds(self):
        return self.inner.constraint_bounds()


def solve(problem: NlpProblem, init, opts: SolverOptions | None = None) -> SolveResult:
    """Minimize the problem from `init` (need not be feasible)."""
    opts = opts or SolverOptions()
    pres = getattr(problem, "presolve_start", None)
    if pres is not None:
        z = np.array(init, dtype=float).ravel()
        if z.size != problem.num_vars:
            raise ValueError(f"init has dimension {z.size}, problem needs {problem.num_vars}")
        init = pres(z)
    scales = getattr(problem, "var_scales", None)
    if scales is not None:
        x0 = np.array(init, dtype=float).ravel()
        if x0.size != problem.num_vars:
            raise ValueError(f"init has dimension {x0.size}, problem needs {problem.num_vars}")
        s = np.asarray(scales() if callable(scales) else scales, dtype=float)
        if np.any(s <= 0.0):
            raise ValueError("variable scales must be positive")
        view = _ScaledView(problem, s)
        res = _solve_core(view, view.to_y(x0), opts)
        res.solution = view.to_x(res.solution)
        return res
    return _solve_core(problem, init, opts)


def _solve_core(problem: NlpProblem, init, opts: SolverOptions) -> SolveResult:
    t0 = time.perf_counter()
    x0 = np.array(init, dtype=float).ravel()
    if x0.size != problem.num_vars:
        raise ValueError(f"init has dimension {x0.size}, problem needs {problem.num_vars}")

    can = _Canonical(problem, opts)
    n = can.n
    trace: list = []

    x = x0.copy()
    # Presolve: satisfy equality rows that fix a single variable (measured
    # initial states and the like).  A start that already honors them avoids a
    # violent first repair step through the inequality barriers.
    if can.m_eq:
        try:
            J0 = jacobian(problem, x, opts)
            c0 = problem.constraints(x)
            fixes = {}
            for r in can.eq_idx:
                nz = np.flatnonzero(J0[r])
                if len(nz) == 1 and int(nz[0]) not in fixes:
                    fixes[int(nz[0])] = (r, float(J0[r, nz[0]]))
            if fixes:
                cand = x.copy()
                for j, (r, coef) in fixes.items():
                    cand[j] += (can.cl[r] - c0[r]) / coef
                c1 = problem.constraints(cand)
                rows = [r for r, _ in fixes.values()]
                if np.all(np.abs(c1[rows] - can.cl[rows]) < 1e-9):
                    x = cand
        except (FloatingPointError, ValueError):
            pass

    # Feasibility restoration: from far-off starts (a zero-initialized
    # exploration solve, a shifted horizon with its duplicated tail) repair
    # the constraint residuals before starting the barrier iteration.
    try:
        if max_violation(problem, x) > 1e-2:
            x = _restore_feasibility(can, x, opts)
    except (FloatingPointError, ValueError):
        pass

    # Push the start strictly inside the variable bounds (relative push a la
    # interior-point folklore: thin initial gaps wreck the barrier diagonal).
    lo_mask = np.isfinite(can.lb)
    up_mask = np.isfinite(can.ub)
    span = np.where(lo_mask & up_mask, can.ub - can.lb, np.inf)
    with np.errstate(invalid="ignore"):
        push_lo = np.minimum(opts.bound_push * np.maximum(1.0, np.abs(can.lb)), 0.25 * span)
        push_up = np.minimum(opts.bound_push * np.maximum(1.0, np.abs(can.ub)), 0.25 * span)
    x[lo_mask] = np.maximum(x[lo_mask], can.lb[lo_mask] + push_lo[lo_mask])
    x[up_mask] = np.minimum(x[up_mask], can.ub[up_mask] - push_up[up_mask])

    def bound_gaps(xv):
        gl = xv[can.xlo_idx] - can.lb[can.xlo_idx]
        gu = can.ub[can.xup_idx] - xv[can.xup_idx]
        return gl, gu

    best = {"x": x0.copy(), "merit": np.inf, "f": np.inf, "viol": np.inf}

    feas_enough = max(1e-6, 10.0 * opts.tol_feas)

    def consider(xv, fv, viol):
        if not np.isfinite(fv):
            return
        merit = fv if viol <= feas_enough else fv + 1e4 * viol
        if merit < best["merit"]:
            best.update(x=np.array(xv), merit=merit, f=fv, viol=viol)

    def consider_ev(xv, ev):
        viol = float(np.max(np.abs(ev["c_eq"]), initial=0.0))
        if can.m_in:
            viol = max(viol, float(np.max(np.maximum(-ev["g"], 0.0), initial=0.0)))
        gl_v = xv[can.xlo_idx] - can.lb[can.xlo_idx]
        gu_v = can.ub[can.xup_idx] - xv[can.xup_idx]
        viol = max(viol, float(np.max(np.maximum(-gl_v, 0.0), initial=0.0)),
                   float(np.max(np.maximum(-gu_v, 0.0), initial=0.0)))
        consider(xv, ev["f"], viol)

    try:
        consider(x0, float(problem.objective(x0)), max_violation(problem, x0))
    except (FloatingPointError, ValueError):
        pass

    status = "max_iter"
    iters_done = 0
    mu = opts.mu_init

    try:
        ev = can.eval(x)
    except (FloatingPointError, ValueError):
        return SolveResult(best["x"], best["f"], "numerical_failure", 0,
                           time.perf_counter() - t0, best["viol"], trace)

    m_eq, m_in = can.m_eq, can.m_in
    s = np.maximum(ev["g"], opts.slack_floor)
    nu = np.full(m_in, mu / np.maximum(s, 1e-8)) if m_in else np.zeros(0)
    nu = np.clip(nu, 1e-8, 1e8)
    gl, gu = bound_gaps(x)
    z_lo = np.clip(mu / np.maximum(gl, 1e-8), 1e-8, 1e8)
    z_up = np.clip(mu / np.maximum(gu, 1e-8), 1e-8, 1e8)

    # Least-squares estimate of the equality multipliers from stationarity,
    # capped: a wild estimate at a poor start poisons the merit penalty.
    lam = np.zeros(m_eq)
    if m_eq:
        rhs = ev["grad"].copy()
        if m_in:
            rhs -= ev["J_in"].T @ nu
        lam = np.linalg.lstsq(ev["J_eq"].T, rhs, rcond=None)[0]
        if np.max(np.abs(lam), initial=0.0) > 1e2:
            lam = np.clip(lam, -1e2, 1e2)

    W_bfgs = np.eye(n)
    prev_grad_lag = None
    prev_x = None
    rho = 10.0  # l1 merit penalty
    delta_reg = 0.0
    feas_hist: list = []
    restorations = 0
    tau = opts.tau_boundary

    def kkt_errors(ev, s, lam, nu, z_lo, z_up, mu_val):
        """KKT error at complementarity targets 0 and mu_val, plus feasibility."""
        r = ev["grad"].copy()
        if m_eq:
            r -= ev["J_eq"].T @ lam
        if m_in:
            r -= ev["J_in"].T @ nu
        r[can.xlo_idx] -= z_lo
        r[can.xup_idx] += z_up
        sd = max(100.0, (np.sum(np.abs(lam)) + np.sum(np.abs(nu)) + np.sum(np.abs(z_lo)) + np.sum(np.abs(z_up)))
                 / max(1, m_eq + m_in + len(z_lo) + len(z_up))) / 100.0
        e_stat = float(np.max(np.abs(r), initial=0.0)) / sd
        e_feas = float(np.max(np.abs(ev["c_eq"]), initial=0.0))
        if m_in:
            e_feas = max(e_feas, float(np.max(np.abs(ev["g"] - s), initial=0.0)))
        gl, gu = bound_gaps(x)
        prods = [s * nu] if m_in else []
        if len(gl):
            prods.append(gl * z_lo)
        if len(gu):
            prods.append(gu * z_up)
        e0 = emu = 0.0
        for p in prods:
            e0 = max(e0, float(np.max(p)))
            emu = max(emu, float(np.max(np.abs(p - mu_val))))
        base = max(e_stat, e_feas)
        return max(base, e0 / sd), max(base, emu / sd), e_feas

    stagnant_since = 0
    stagnant_merit = np.inf
    for it in range(opts.max_iterations):
        iters_done = it + 1
        gl, gu = bound_gaps(x)
        err_0, err_mu, feas_0 = kkt_errors(ev, s, lam, nu, z_lo, z_up, mu)
        consider_ev(x, ev)
        if err_0 <= opts.tol_opt and feas_0 <= opts.tol_feas:
            status = "optimal"
            best.update(x=np.array(x), f=ev["f"], viol=max_violation(problem, x),
                        merit=ev["f"])
            break
        if opts.stagnation_window > 0:
            if best["merit"] < stagnant_merit - 1e-7 * (1.0 + abs(stagnant_merit)):
                stagnant_merit = best["merit"]
                stagnant_since = it
            elif it - stagnant_since >= opts.stagnation_window:
                status = "max_iter"
                break
        if err_mu <= 10.0 * mu and mu > opts.mu_min:
            mu = max(opts.mu_min, min(opts.mu_shrink * mu, mu**1.5))
            tau = max(opts.tau_boundary, 1.0 - mu)

        # Curvature model: structured Lagrangian Hessian when the problem can
        # build one (objective curvature minus weighted constraint curvature),
        # otherwise the objective model alone, otherwise damped BFGS.
        H = None
        lag_hess = getattr(problem, "lagrangian_hessian", None)
        if lag_hess is not None:
            w = np.zeros(len(can.cl))
            if m_eq:
                w[can.eq_idx] += lam
            if m_in:
                n_lo = len(can.lo_idx)
                w[can.lo_idx] += nu[:n_lo]
                w[can.up_idx] -= nu[n_lo:]
            H = lag_hess(x, w)
        if H is None:
            H = problem.hessian(x)
        if H is None:
            if prev_grad_lag is not None:
                y = _grad_lag(ev, lam, nu, can, z_lo, z_up) - prev_grad_lag
                d = x - prev_x
                dy = float(d @ y)
                dWd = float(d @ W_bfgs @ d)
                if dWd > 1e-12 and np.linalg.norm(d) > 1e-12:
                    # Powell damping keeps the model positive definite.
                    theta = 1.0 if dy >= 0.2 * dWd else (0.8 * dWd) / (dWd - dy)
                    r_vec = theta * y + (1 - theta) * (W_bfgs @ d)
                    W_bfgs = (W_bfgs - np.outer(W_bfgs @ d, W_bfgs @ d) / dWd
                              + np.outer(r_vec, r_vec) / float(d @ r_vec))
            H = W_bfgs

        Sig = np.zeros(n)
        Sig[can.xlo_idx] += z_lo / np.maximum(gl, 1e-12)
        Sig[can.xup_idx] += z_up / np.maximum(gu, 1e-12)
        H_red = H + np.diag(Sig)
        if m_in:
            D = nu / np.maximum(s, 1e-12)
            H_red = H_red + ev["J_in"].T @ (D[:, None] * ev["J_in"])

        grad_phi = ev["grad"].copy()
        grad_phi[can.xlo_idx] -= mu / np.maximum(gl, 1e-12)
        grad_phi[can.xup_idx] += mu / np.maximum(gu, 1e-12)

        # The multiplier block is solved for in full (memoryless) rather than
        # incremented: with Gauss-Newton curvature a dual Newton recursion can
        # be expansive, while the solved multiplier is a function of the
        # current primal point and cannot drift.
        rhs_x = -grad_phi
        if m_in:
            rhs_x += ev["J_in"].T @ (mu / np.maximum(s, 1e-12) - D * (ev["g"] - s))

        # Inertia correction: the primal block must be positive definite or
        # the equality-multiplier step is unbounded along its null space.
        # Problems whose hessian() is PSD by construction skip the probe.
        delta = max(delta_reg, 1e-8)
        solved = False
        psd_known = bool(getattr(problem, "hessian_psd", False)) and lag_hess is None
        for attempt in range(30):
            if not (psd_known and attempt == 0):
                try:
                    np.linalg.cholesky(H_red + delta * np.eye(n))
                except np.linalg.LinAlgError:
                    delta *= 10.0
                    continue
            try:
                if m_eq:
                    K = np.zeros((n + m_eq, n + m_eq))
                    K[:n, :n] = H_red + delta * np.eye(n)
                    K[:n, n:] = -ev["J_eq"].T
                    K[n:, :n] = ev["J_eq"]
                    K[n:, n:] = -1e-10 * np.eye(m_eq)
                    rhs = np.concatenate([rhs_x, -ev["c_eq"]])
                    sol = np.linalg.solve(K, rhs)
                    dx, lam_hat = sol[:n], sol[n:]
                else:
                    sol = np.linalg.solve(H_red + delta * np.eye(n), rhs_x)
                    dx, lam_hat = sol, np.zeros(0)
            except np.linalg.LinAlgError:
                delta *= 10.0
                continue
            if np.all(np.isfinite(dx)) and np.all(np.isfinite(lam_hat)):
                solved = True
                break
            delta *= 10.0
        if not solved:
            status = "numerical_failure"
            break
        delta_reg = delta

        ds = (ev["J_in"] @ dx + (ev["g"] - s)) if m_in else np.zeros(0)
        dnu = (mu / np.maximum(s, 1e-12) - nu - D * ds) if m_in else np.zeros(0)
        dz_lo = mu / np.maximum(gl, 1e-12) - z_lo - (z_lo / np.maximum(gl, 1e-12)) * dx[can.xlo_idx]
        dz_up = mu / np.maximum(gu, 1e-12) - z_up + (z_up / np.maximum(gu, 1e-12)) * dx[can.xup_idx]

        def max_step(vals, dirs):
            neg = dirs < 0
            if not np.any(neg):
                return 1.0
            return float(min(1.0, np.min(-tau * vals[neg] / dirs[neg])))

        alpha_max = min(max_step(s, ds) if m_in else 1.0,
                        max_step(gl, dx[can.xlo_idx]),
                        max_step(gu, -dx[can.xup_idx]))
        alpha_dual = min(max_step(nu, dnu) if m_in else 1.0,
                         max_step(z_lo, dz_lo),
                         max_step(z_up, dz_up))

        # l1 merit with barrier terms; penalty tracks multiplier scale but is
        # capped so one bad dual estimate cannot freeze the line search.
        mult_scale = max(np.max(np.abs(lam_hat), initial=0.0),
                         np.max(np.abs(nu + dnu), initial=0.0))
        rho = min(max(rho, 2.0 * mult_scale + 1.0), 1e5)

        def merit(xv, sv):
            fv, c_eq_v, g_v = can.residuals_only(xv)
            glv, guv = (xv[can.xlo_idx] - can.lb[can.xlo_idx],
                        can.ub[can.xup_idx] - xv[can.xup_idx])
            if np.any(sv <= 0) or np.any(glv <= 0) or np.any(guv <= 0):
                return np.inf, fv
            bar = -mu * (np.sum(np.log(sv)) + np.sum(np.log(glv)) + np.sum(np.log(guv)))
            pen = rho * (np.sum(np.abs(c_eq_v)) + np.sum(np.abs(g_v - sv)))
            return fv + bar + pen, fv

        phi0, _ = merit(x, s)
        infeas0 = np.sum(np.abs(ev["c_eq"])) + (np.sum(np.abs(ev["g"] - s)) if m_in else 0.0)
        dphi = float(grad_phi @ dx) - rho * infeas0
        if m_in:
            dphi += float(-(mu / np.maximum(s, 1e-12)) @ ds)

        # Small absolute allowance keeps the endgame from stalling on merit
        # changes at rounding scale.
        noise = 1e-9 * (1.0 + abs(phi0))

        def acceptable(phi_t, a):
            return np.isfinite(phi_t) and phi_t <= phi0 + 1e-4 * a * min(dphi, 0.0) + noise

        alpha = alpha_max
        accepted = False
        f_trial = ev["f"]
        tried_soc = False
        for _ in range(30):
            try:
                phi_trial, f_trial = merit(x + alpha * dx, s + alpha * ds)
            except FloatingPointError:
                phi_trial = np.inf
            if acceptable(phi_trial, alpha):
                accepted = True
                break
            if not tried_soc and m_eq and alpha == alpha_max:
                # Second-order correction: constraint curvature often rejects
                # an otherwise good step; re-solve with the residual observed
                # at the trial point and try the corrected direction.
                tried_soc = True
                try:
                    _, c_trial, _ = can.residuals_only(x + alpha * dx)
                    rhs_soc = np.concatenate([rhs_x, -(alpha * ev["c_eq"] + c_trial)])
                    sol_soc = np.linalg.solve(K, rhs_soc)
                    dx_soc = sol_soc[:n]
                    lam_soc = sol_soc[n:]
                    ds_soc = (ev["J_in"] @ dx_soc + (ev["g"] - s)) if m_in else np.zeros(0)
                    a_soc = min(max_step(s, ds_soc) if m_in else 1.0,
                                max_step(gl, dx_soc[can.xlo_idx]),
                                max_step(gu, -dx_soc[can.xup_idx]))
                    phi_soc, f_soc = merit(x + a_soc * dx_soc, s + a_soc * ds_soc)
                    if acceptable(phi_soc, a_soc):
                        dx, ds, lam_hat = dx_soc, ds_soc, lam_soc
                        dnu = (mu / np.maximum(s, 1e-12) - nu - D * ds) if m_in else np.zeros(0)
                        dz_lo = mu / np.maximum(gl, 1e-12) - z_lo - (z_lo / np.maximum(gl, 1e-12)) * dx[can.xlo_idx]
                        dz_up = mu / np.maximum(gu, 1e-12) - z_up + (z_up / np.maximum(gu, 1e-12)) * dx[can.xup_idx]
                        alpha_dual = min(max_step(nu, dnu) if m_in else 1.0,
                                         max_step(z_lo, dz_lo), max_step(z_up, dz_up))
                        alpha, phi_trial, f_trial = a_soc, phi_soc, f_soc
                        accepted = True
                        break
                except (np.linalg.LinAlgError, FloatingPointError):
                    pass
            if np.isfinite(phi_trial) and dphi < 0.0:
                # Quadratic interpolation on the rejected trial, safeguarded.
                denom = 2.0 * (phi_trial - phi0 - dphi * alpha)
                cand = -dphi * alpha * alpha / denom if denom > 0 else 0.5 * alpha
                alpha = min(max(cand, 0.1 * alpha), 0.5 * alpha)
            else:
                alpha *= 0.3
            if alpha < 1e-12:
                break

        if not accepted:
            # Direction unusable: bump regularization and retry from scratch.
            delta_reg = max(delta_reg * 10.0, 1e-6)
            step_norm = float(np.linalg.norm(alpha * dx))
            if delta_reg > 1e8 or step_norm < 1e-14:
                status = "infeasible" if feas_0 > max(1e-3, 1e3 * opts.tol_feas) else "max_iter"
                break
            continue

        # Levenberg-style damping driven by the achieved-versus-predicted
        # merit reduction: mistrust the model when steps vastly underdeliver,
        # relax as soon as predictions come true again.
        # Damping adaptation from two signals: severe line-search truncation
        # means the step length itself is the failure (unmodeled constraint
        # curvature) and the direction must shorten; healthy near-full steps
        # that deliver the predicted decrease release the damping.
        curv = float(dx @ (H_red @ dx)) + delta * float(dx @ dx)
        predicted = -(alpha * dphi + 0.5 * alpha * alpha * max(curv, 0.0))
        achieved = phi0 - phi_trial
        if alpha < 1e-2 * alpha_max:
            delta_reg = min(max(delta_reg * 4.0, 1e-4), 1e8)
        elif predicted > max(1e-12, 10.0 * noise):
            ratio = achieved / predicted
            if ratio < 0.25:
                delta_reg = min(max(delta_reg * 4.0, 1e-4), 1e8)
            elif ratio > 0.75 and alpha > 0.5 * alpha_max:
                delta_reg = max(delta_reg / 3.0, 1e-8)

        # Wedged while infeasible (violated inequalities pin the slack steps):
        # hand the iterate to the restoration phase, then resume the barrier
        # iteration with fresh slacks and duals.
        feas_hist.append(feas_0)
        wedged = (len(feas_hist) > 5 and feas_0 > 1e-2
                  and feas_0 > 0.9 * feas_hist[-6] and restorations < 3)
        if wedged:
            restorations += 1
            feas_hist.clear()
            x = _restore_feasibility(can, x, opts)
            x[lo_mask] = np.maximum(x[lo_mask], can.lb[lo_mask] + push_lo[lo_mask])
            x[up_mask] = np.minimum(x[up_mask], can.ub[up_mask] - push_up[up_mask])
            try:
                ev = can.eval(x)
            except (FloatingPointError, ValueError):
                status = "numerical_failure"
                break
            s = np.maximum(ev["g"], opts.slack_floor) if m_in else s
            nu = np.clip(mu / np.maximum(s, 1e-8), 1e-8, 1e8) if m_in else nu
            gl, gu = bound_gaps(x)
            z_lo = np.clip(mu / np.maximum(gl, 1e-8), 1e-8, 1e8)
            z_up = np.clip(mu / np.maximum(gu, 1e-8), 1e-8, 1e8)
            delta_reg = 1e-8
            consider_ev(x, ev)
            continue

        prev_grad_lag = _grad_lag(ev, lam, nu, can, z_lo, z_up)
        prev_x = x.copy()

        x = x + alpha * dx
        lam = lam_hat
        # Sigma safeguard: keep each barrier dual within a kappa-sized band of
        # its central value so the reduced Hessian stays sanely conditioned.
        ks = opts.kappa_sigma
        mu_f = max(mu, 1e-12)
        if m_in:
            s = np.maximum(s + alpha * ds, 1e-14)
            nu = np.clip(nu + alpha_dual * dnu, mu_f / (ks * s), ks * mu_f / s)
        gl, gu = bound_gaps(x)
        z_lo = np.clip(z_lo + alpha_dual * dz_lo,
                       mu_f / (ks * np.maximum(gl, 1e-14)), ks * mu_f / np.maximum(gl, 1e-14))
        z_up = np.clip(z_up + alpha_dual * dz_up,
                       mu_f / (ks * np.maximum(gu, 1e-14)), ks * mu_f / np.maximum(gu, 1e-14))

        try:
            ev = can.eval(x)
        except (FloatingPointError, ValueError):
            status = "numerical_failure"
            break
        if m_in:
            # Slack correction: lifting a crushed slack up to a positive
            # constraint value strictly improves both the slack residual and
            # the barrier term, and un-pins the fraction-to-the-boundary cap.
            s = np.maximum(s, np.minimum(ev["g"], 1e6))
        consider_ev(x, ev)

        if opts.trace:
            trace.append({"iter": iters_done, "objective": ev["f"],
                          "violation": max(float(np.max(np.abs(ev["c_eq"]), initial=0.0)),
                                           float(np.max(np.maximum(s - ev["g"], 0.0), initial=0.0)) if m_in else 0.0),
                          "mu": mu, "alpha": alpha, "alpha_max": alpha_max,
                          "dphi": dphi, "delta": delta, "err": err_0})

    else:
        status = "max_iter"

    if status == "optimal":
        sol_x, sol_f, sol_viol = x, ev["f"], max_violation(problem, x)
    else:
        sol_x, sol_f, sol_viol = best["x"], best["f"], best["viol"]
    if not np.isfinite(sol_f):
        sol_f, sol_viol = cost_of(problem, sol_x)
    return SolveResult(np.array(sol_x), float(sol_f), status, iters_done,
                       time.perf_counter() - t0, float(sol_viol), trace)


def _grad_lag(ev, lam, nu, can, z_lo, z_up):
    g = ev["grad"].copy()
    if can.m_eq:
        g -= ev["J_eq"].T @ lam
    if can.m_in:
        g -= ev["J_in"].T @ nu
    return g


def _restore_feasibility(can: _Canonical, x: np.ndarray, opts: SolverOptions,
                         rounds: int = 12, target: float = 1e-3) -> np.ndarray:
    """Gauss-Newton repair of constraint residuals, ignoring the objective.

    Drives the equality residuals (and any violated inequalities) toward
    zero before the barrier iteration starts; a start on the constraint
    manifold avoids violent first steps through the inequality barriers.
    Variable bounds are maintained by clipping.
    """
    lb, ub = can.lb, can.ub
    for _ in range(rounds):
        try:
            ev = can.eval(x)
        except (FloatingPointError, ValueError):
            return x
        viol_in = np.minimum(ev["g"], 0.0) if can.m_in else np.zeros(0)
        res = np.concatenate([ev["c_eq"], viol_in])
        norm0 = float(np.max(np.abs(res), initial=0.0))
        if norm0 <= target:
            break
        rows = [ev["J_eq"]]
        if can.m_in:
            Jv = ev["J_in"].copy()
            Jv[viol_in >= 0.0] = 0.0
            rows.append(Jv)
        J = np.vstack(rows)
        A = J.T @ J + 1e-6 * np.eye(can.n)
        try:
            dx = np.linalg.solve(A, -J.T @ res)
        except np.linalg.LinAlgError:
            return x
        step = 1.0
        improved = False
        for _ in range(12):
            cand = np.clip(x + step * dx, lb, ub)
            try:
                _, c_eq_c, g_c = can.residuals_only(cand)
            except (FloatingPointError, ValueError):
                step *= 0.5
                continue
            cand_norm = max(float(np.max(np.abs(c_eq_c), initial=0.0)),
                            float(np.max(np.maximum(-g_c, 0.0), initial=0.0)))
            if cand_norm < norm0 * (1.0 - 0.1 * step):
                x = cand
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return x
