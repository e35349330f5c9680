import numpy as np
import pytest

from unimpc.solver import (
    FunctionalProblem,
    SolverOptions,
    cost_of,
    jacobian,
    max_violation,
    solve,
)


def bound_qp():
    """min x^2 s.t. x >= 1."""
    return FunctionalProblem(
        1,
        objective=lambda x: x[0] ** 2,
        gradient=lambda x: np.array([2 * x[0]]),
        lb=np.array([1.0]),
        hessian=lambda x: np.array([[2.0]]),
    )


def equality_qp():
    """min (x-2)^2 + (y-1)^2 s.t. x + y = 1; optimum (1.5, 0.5)."""
    return FunctionalProblem(
        2,
        objective=lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2,
        gradient=lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
        constraints=lambda x: np.array([x[0] + x[1]]),
        jacobian=lambda x: np.array([[1.0, 1.0]]),
        cl=np.array([1.0]),
        cu=np.array([1.0]),
        hessian=lambda x: 2 * np.eye(2),
    )


class TestTextbookProblems:
    def test_bound_constrained_quadratic(self):
        res = solve(bound_qp(), np.array([5.0]))
        assert res.status == "optimal"
        assert res.solution[0] == pytest.approx(1.0, abs=1e-6)
        assert res.objective == pytest.approx(1.0, abs=1e-6)

    def test_bound_constrained_quadratic_infeasible_start(self):
        res = solve(bound_qp(), np.array([-3.0]))
        assert res.status == "optimal"
        assert res.solution[0] == pytest.approx(1.0, abs=1e-6)

    def test_equality_constrained_quadratic(self):
        # Closed form: projection of (2, 1) onto {x + y = level}.
        for level, expected in ((1.0, [1.0, 0.0]), (2.0, [1.5, 0.5])):
            prob = FunctionalProblem(
                2,
                objective=lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2,
                gradient=lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
                constraints=lambda x: np.array([x[0] + x[1]]),
                jacobian=lambda x: np.array([[1.0, 1.0]]),
                cl=np.array([level]),
                cu=np.array([level]),
                hessian=lambda x: 2 * np.eye(2),
            )
            res = solve(prob, np.array([0.0, 0.0]))
            assert res.status == "optimal"
            assert res.solution == pytest.approx(expected, abs=1e-6)

    def test_rosenbrock_with_unit_disk(self):
        def f(x):
            return 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2

        def grad(x):
            return np.array(
                [-400 * (x[1] - x[0] ** 2) * x[0] - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)]
            )

        def hess(x):
            return np.array(
                [
                    [1200 * x[0] ** 2 - 400 * x[1] + 2, -400 * x[0]],
                    [-400 * x[0], 200.0],
                ]
            )

        prob = FunctionalProblem(
            2,
            objective=f,
            gradient=grad,
            constraints=lambda x: np.array([x[0] ** 2 + x[1] ** 2]),
            jacobian=lambda x: np.array([[2 * x[0], 2 * x[1]]]),
            cl=np.array([-np.inf]),
            cu=np.array([1.0]),
            hessian=hess,
        )
        res = solve(prob, np.array([0.0, 0.0]), SolverOptions(max_iterations=300))
        assert res.status == "optimal"

        # Grid-refinement oracle: dense search over the disk, refined twice.
        center, half = np.zeros(2), 1.0
        best = None
        for _ in range(3):
            xs = np.linspace(center[0] - half, center[0] + half, 1000)
            ys = np.linspace(center[1] - half, center[1] + half, 1000)
            XX, YY = np.meshgrid(xs, ys)
            mask = XX**2 + YY**2 <= 1.0
            vals = 100 * (YY - XX**2) ** 2 + (1 - XX) ** 2
            vals[~mask] = np.inf
            k = np.unravel_index(np.argmin(vals), vals.shape)
            best = np.array([XX[k], YY[k]])
            center, half = best, half * 3.0 / 999
        assert np.linalg.norm(res.solution - best) < 1e-4


def random_feasible_qp(rng, n, m_eq, m_in):
    """Convex QP with known-feasible interior and analytic KKT solution."""
    L = rng.normal(size=(n, n))
    P = L @ L.T + n * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m_eq, n)) if m_eq else np.zeros((0, n))
    x_feas = rng.normal(size=n)
    b = A @ x_feas
    G = rng.normal(size=(m_in, n)) if m_in else np.zeros((0, n))
    h = G @ x_feas + rng.uniform(0.5, 2.0, size=m_in)  # strictly feasible slack
    return P, q, A, b, G, h, x_feas


def qp_kkt_oracle(P, q, A, b, G, h):
    """Active-set enumeration on the analytic KKT system (small problems)."""
    from itertools import combinations

    n = len(q)
    m_in = len(h)
    best_x, best_f = None, np.inf
    for k in range(m_in + 1):
        for active in combinations(range(m_in), k):
            Aact = np.vstack([A, G[list(active)]]) if (len(A) or active) else np.zeros((0, n))
            bact = np.concatenate([b, h[list(active)]])
            KKT = np.block(
                [[P, Aact.T], [Aact, np.zeros((len(bact), len(bact)))]]
            )
            rhs = np.concatenate([-q, bact])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            mult = sol[n + len(b):]
            if len(h) and np.any(G @ x - h > 1e-9):
                continue
            if np.any(mult < -1e-9):
                continue
            f = 0.5 * x @ P @ x + q @ x
            if f < best_f:
                best_f, best_x = f, x
    return best_x, best_f


class TestConvexQpSuite:
    def test_twenty_random_qps_reach_kkt_solution(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            n = int(rng.integers(2, 6))
            m_eq = int(rng.integers(0, min(n, 3)))
            m_in = int(rng.integers(0, 4))
            P, q, A, b, G, h, x_feas = random_feasible_qp(rng, n, m_eq, m_in)
            oracle_x, oracle_f = qp_kkt_oracle(P, q, A, b, G, h)
            assert oracle_x is not None

            C = np.vstack([A, G])
            cl = np.concatenate([b, np.full(m_in, -np.inf)])
            cu = np.concatenate([b, h])
            prob = FunctionalProblem(
                n,
                objective=lambda x, P=P, q=q: 0.5 * x @ P @ x + q @ x,
                gradient=lambda x, P=P, q=q: P @ x + q,
                constraints=(lambda x, C=C: C @ x) if len(C) else None,
                jacobian=(lambda x, C=C: C) if len(C) else None,
                cl=cl if len(C) else None,
                cu=cu if len(C) else None,
                hessian=lambda x, P=P: P,
            )
            res = solve(prob, rng.normal(size=n), SolverOptions(max_iterations=200))
            assert res.status == "optimal", f"trial {trial}: {res.status}"
            assert np.linalg.norm(res.solution - oracle_x) < 1e-6, f"trial {trial}"


class TestJacobianAndCost:
    def test_linear_constraint_constant_row(self):
        a = np.array([2.0, -3.0, 0.5])
        prob = FunctionalProblem(
            3,
            objective=lambda x: float(x @ x),
            gradient=lambda x: 2 * x,
            constraints=lambda x: np.array([a @ x - 1.0]),
            jacobian=lambda x: a[None, :],
            cl=np.array([0.0]),
            cu=np.array([np.inf]),
        )
        for point in (np.zeros(3), np.array([1.0, -2.0, 7.0])):
            assert jacobian(prob, point) == pytest.approx(a[None, :])

    def test_fd_mode_matches_analytic(self):
        prob = equality_qp()
        x = np.array([0.3, -1.2])
        J_an = jacobian(prob, x, SolverOptions(derivatives="analytic"))
        J_fd = jacobian(prob, x, SolverOptions(derivatives="fd"))
        assert J_fd == pytest.approx(J_an, abs=1e-6)

    def test_cost_of_known_optimum(self):
        f, viol = cost_of(bound_qp(), np.array([1.0]))
        assert f == pytest.approx(1.0)
        assert viol == 0.0

    def test_cost_of_matches_solve_objective(self):
        res = solve(equality_qp(), np.array([3.0, 3.0]))
        f, viol = cost_of(equality_qp(), res.solution)
        assert f == pytest.approx(res.objective, abs=1e-12)
        assert viol <= 1e-7

    def test_cost_of_reports_violation(self):
        f, viol = cost_of(bound_qp(), np.array([0.5]))
        assert viol == pytest.approx(0.5)


class TestSolverContract:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            solve(bound_qp(), np.zeros(3))

    def test_deterministic_bit_for_bit(self):
        prob = equality_qp()
        r1 = solve(prob, np.array([9.0, -4.0]))
        r2 = solve(prob, np.array([9.0, -4.0]))
        assert np.array_equal(r1.solution, r2.solution)
        assert r1.objective == r2.objective
        assert r1.iterations == r2.iterations
        assert r1.status == r2.status

    def test_best_iterate_merit_never_worse_than_feasible_start(self):
        # Start feasible; a capped solve must return something at least as good
        # in objective + 1e4 * violation merit.
        prob = bound_qp()
        start = np.array([2.0])
        f0, v0 = cost_of(prob, start)
        for cap in (1, 2, 3, 5, 8):
            res = solve(prob, start, SolverOptions(max_iterations=cap))
            f, v = cost_of(prob, res.solution)
            assert f + 1e4 * v <= f0 + 1e4 * v0 + 1e-9

    def test_max_iter_status(self):
        res = solve(equality_qp(), np.array([50.0, -50.0]), SolverOptions(max_iterations=1))
        assert res.status in ("max_iter", "optimal")
        assert res.iterations <= 1

    def test_optimal_implies_feasible(self):
        opts = SolverOptions()
        res = solve(equality_qp(), np.array([10.0, 10.0]), opts)
        assert res.status == "optimal"
        assert res.max_constraint_violation <= opts.tol_feas

    def test_trace_stream(self):
        res = solve(equality_qp(), np.array([0.0, 0.0]), SolverOptions(trace=True))
        assert len(res.trace) > 0
        assert {"iter", "objective", "violation", "mu", "alpha"} <= set(res.trace[0])

    def test_infeasible_problem_flagged(self):
        # x >= 1 and x <= -1 cannot hold.
        prob = FunctionalProblem(
            1,
            objective=lambda x: x[0] ** 2,
            gradient=lambda x: np.array([2 * x[0]]),
            constraints=lambda x: np.array([x[0], -x[0]]),
            jacobian=lambda x: np.array([[1.0], [-1.0]]),
            cl=np.array([1.0, 1.0]),
            cu=np.array([np.inf, np.inf]),
            hessian=lambda x: np.array([[2.0]]),
        )
        res = solve(prob, np.array([0.0]), SolverOptions(max_iterations=100))
        assert res.status in ("infeasible", "max_iter")
        assert res.max_constraint_violation > 1e-3

    def test_max_violation_helper(self):
        prob = equality_qp()
        assert max_violation(prob, np.array([0.0, 0.0])) == pytest.approx(1.0)
        assert max_violation(prob, np.array([0.5, 0.5])) == pytest.approx(0.0)
