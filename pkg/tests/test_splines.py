import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimpc.splines import (
    Spline2D,
    SplineError,
    fit_residual,
    fit_spline,
    polyline_arclength,
    project_to_spline,
    sidedness,
    sliding_window,
)


def quarter_circle(n=50, radius=20.0):
    ang = np.linspace(0.0, np.pi / 2, n)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def hermite_design_oracle(s, knots):
    """Independent dense normal-equations design for the same C1 cubic basis."""
    pieces = len(knots) - 1
    A = np.zeros((len(s), 2 * (pieces + 1)))
    for i, si in enumerate(s):
        j = min(int(np.searchsorted(knots, si, side="right")) - 1, pieces - 1)
        j = max(j, 0)
        h = knots[j + 1] - knots[j]
        u = (si - knots[j]) / h
        A[i, 2 * j] = 2 * u**3 - 3 * u**2 + 1
        A[i, 2 * j + 1] = (u**3 - 2 * u**2 + u) * h
        A[i, 2 * j + 2] = -2 * u**3 + 3 * u**2
        A[i, 2 * j + 3] = (u**3 - u**2) * h
    return A


class TestFitSpline:
    def test_collinear_points_exact(self):
        t = np.linspace(0.0, 10.0, 10)
        pts = np.stack([t, 2 * t], axis=1)
        sp = fit_spline(pts, pieces=2)
        assert fit_residual(sp, pts) < 1e-9

    def test_quarter_circle_residual_vs_normal_equations_oracle(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        res = fit_residual(sp, pts)
        assert res < 0.05

        # Oracle: solve the same least-squares problem by explicit normal
        # equations on an independently constructed design matrix.
        arc = polyline_arclength(pts)
        s = arc / arc[-1]
        knots = np.linspace(0.0, 1.0, 5)
        A = hermite_design_oracle(s, knots)
        sol_x = np.linalg.solve(A.T @ A, A.T @ pts[:, 0])
        sol_y = np.linalg.solve(A.T @ A, A.T @ pts[:, 1])
        oracle = np.stack([A @ sol_x, A @ sol_y], axis=1)
        oracle_res = float(np.max(np.linalg.norm(oracle - pts, axis=1)))
        assert res == pytest.approx(oracle_res, abs=1e-8)

    def test_too_few_points(self):
        with pytest.raises(SplineError, match="insufficient points"):
            fit_spline(np.zeros((3, 2)), pieces=1)

    def test_coincident_points(self):
        with pytest.raises(SplineError, match="degenerate"):
            fit_spline(np.ones((5, 2)), pieces=1)

    def test_residual_non_increasing_on_dyadic_refinement(self):
        # Uniform-knot C1 spaces are nested along the dyadic chain.
        rng = np.random.default_rng(7)
        t = np.linspace(0.0, 1.0, 80)
        pts = np.stack([10 * t + np.sin(4 * t), 5 * np.cos(3 * t)], axis=1)
        pts += rng.normal(scale=0.01, size=pts.shape)
        residuals = [fit_residual(fit_spline(pts, p), pts) for p in (1, 2, 4, 8)]
        for a, b in zip(residuals, residuals[1:]):
            assert b <= a + 1e-9


class TestEval:
    def test_linear_midpoint(self):
        pts = np.stack([np.linspace(0, 10, 10), np.zeros(10)], axis=1)
        sp = fit_spline(pts, pieces=1)
        assert sp.eval(0.5) == pytest.approx([5.0, 0.0], abs=1e-9)

    def test_endpoint_matches_first_point(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        assert np.linalg.norm(sp.eval(0.0) - pts[0]) < fit_residual(sp, pts) + 1e-9

    def test_quarter_circle_midpoint(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        # s=0.5 corresponds to the mid-arc point by chord-length symmetry.
        true_mid = 20.0 * np.array([np.cos(np.pi / 4), np.sin(np.pi / 4)])
        assert np.linalg.norm(sp.eval(0.5) - true_mid) < 0.05

    def test_out_of_domain(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=2)
        with pytest.raises(SplineError):
            sp.eval(1.2)
        with pytest.raises(SplineError):
            sp.eval(-0.1)

    def test_c1_continuity_at_knots(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        for k in sp.knots[1:-1]:
            below = sp.deriv(k - 1e-9)
            above = sp.deriv(k + 1e-9)
            assert np.allclose(below, above, atol=1e-5)


class TestSlidingWindow:
    def straight_route(self):
        x = np.linspace(0.0, 100.0, 101)
        return np.stack([x, np.zeros_like(x)], axis=1)

    def test_window_from_start(self):
        sub = sliding_window(self.straight_route(), ego_arclength=0.0, window=40.0)
        arc = polyline_arclength(sub)
        assert sub[0, 0] == pytest.approx(0.0)
        assert sub[-1, 0] == pytest.approx(40.0)
        assert arc[-1] == pytest.approx(40.0)

    def test_window_clamped_at_end(self):
        sub = sliding_window(self.straight_route(), ego_arclength=95.0, window=40.0)
        assert sub[0, 0] == pytest.approx(55.0)
        assert sub[-1, 0] == pytest.approx(100.0)

    def test_windowed_fit_beats_whole_route_fit_on_L_shape(self):
        leg1 = np.stack([np.linspace(0, 50, 60), np.zeros(60)], axis=1)
        leg2 = np.stack([np.full(60, 50.0), np.linspace(0, 50, 60)], axis=1)
        route = np.vstack([leg1, leg2[1:]])
        sub = sliding_window(route, ego_arclength=10.0, window=30.0)
        whole = fit_residual(fit_spline(route, pieces=3), route)
        windowed = fit_residual(fit_spline(sub, pieces=3), sub)
        assert windowed < whole


class TestSidedness:
    def test_right_of_positive_x_bound(self):
        assert sidedness((0, -1), (0, 0), (1, 0)) == pytest.approx(1.0)

    def test_left_of_positive_x_bound(self):
        assert sidedness((0, 1), (0, 0), (1, 0)) == pytest.approx(-1.0)

    def test_collinear_is_zero(self):
        assert sidedness((2, 0), (0, 0), (1, 0)) == pytest.approx(0.0)

    def test_degenerate_bound(self):
        with pytest.raises(SplineError, match="degenerate"):
            sidedness((0, 0), (1, 1), (1, 1))

    @given(
        st.tuples(*[st.floats(-100, 100) for _ in range(6)]).filter(
            lambda t: (t[2], t[3]) != (t[4], t[5])
        )
    )
    def test_antisymmetric_in_bound_direction(self, t):
        px, py, ax, ay, bx, by = t
        fwd = sidedness((px, py), (ax, ay), (bx, by))
        rev = sidedness((px, py), (bx, by), (ax, ay))
        assert fwd == pytest.approx(-rev, abs=1e-6 * max(1.0, abs(fwd)))

    @given(
        st.tuples(*[st.floats(-50, 50) for _ in range(6)]).filter(
            lambda t: abs(t[4]) + abs(t[5]) > 1e-3
        ),
        st.floats(0.1, 10.0),
    )
    def test_scales_linearly_with_bound_length(self, t, scale):
        px, py, ax, ay, dx, dy = t
        b0 = np.array([ax, ay])
        short = sidedness((px, py), b0, b0 + np.array([dx, dy]))
        long = sidedness((px, py), b0, b0 + scale * np.array([dx, dy]))
        assert long == pytest.approx(scale * short, rel=1e-9, abs=1e-7)
        if abs(short) > 1e-9:
            assert np.sign(long) == np.sign(short)


class TestProjectToSpline:
    def test_foot_of_perpendicular(self):
        pts = np.stack([np.linspace(0, 10, 20), np.zeros(20)], axis=1)
        sp = fit_spline(pts, pieces=1)
        s = project_to_spline(sp, (5.0, 3.0), grid=1001)
        assert s == pytest.approx(0.5, abs=1.5 / 1000)

    def test_on_curve_point(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        target = sp.eval(0.25)
        s = project_to_spline(sp, target, grid=1001)
        assert s == pytest.approx(0.25, abs=1.5 / 1000)

    def test_matches_dense_search_oracle(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        rng = np.random.default_rng(3)
        coarse_cell = 1.0 / (200 - 1)
        dense = np.linspace(0.0, 1.0, 10**6)
        curve = sp.eval(dense)
        for _ in range(10):
            p = rng.uniform(-5, 25, size=2)
            s_coarse = project_to_spline(sp, p, grid=200)
            s_true = dense[int(np.argmin(np.sum((curve - p) ** 2, axis=1)))]
            assert abs(s_coarse - s_true) <= coarse_cell + 1e-12

    def test_returns_global_grid_minimizer(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=4)
        p = np.array([10.0, 4.0])
        grid = 500
        s_hat = project_to_spline(sp, p, grid=grid)
        samples = np.linspace(0.0, 1.0, grid)
        d = np.linalg.norm(sp.eval(samples) - p, axis=1)
        assert np.linalg.norm(sp.eval(s_hat) - p) <= d.min() + 1e-12

    def test_grid_too_small(self):
        pts = quarter_circle()
        sp = fit_spline(pts, pieces=2)
        with pytest.raises(SplineError):
            project_to_spline(sp, (0, 0), grid=1)


class TestSerialization:
    def test_round_trip(self):
        sp = fit_spline(quarter_circle(), pieces=3)
        back = Spline2D.from_text(sp.to_text())
        assert np.array_equal(back.knots, sp.knots)
        assert np.array_equal(back.coeffs_x, sp.coeffs_x)
        assert np.array_equal(back.coeffs_y, sp.coeffs_y)
