"""Parametric 2D splines for lane references and drivable-surface bounds.

A route is given as an ordered polyline of lane-center points.  We fit a
piecewise-cubic curve (X(s), Y(s)) over a normalized chord-length parameter
s in [0, 1].  The basis is cubic Hermite per piece with shared values and
derivatives at the knots, so the curve is C1 by construction and the fit is
an ordinary linear least-squares problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SplineError(ValueError):
    """Bad input to a spline construction or query."""


def polyline_arclength(points: np.ndarray) -> np.ndarray:
    """Cumulative chord length of an (n, 2) polyline, starting at 0."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate(([0.0], np.cumsum(seg)))


@dataclass(frozen=True)
class Spline2D:
    """Piecewise-cubic parametric curve on s in [0, 1].

    coeffs_x / coeffs_y are (pieces, 4) power-basis coefficients: on piece j
    with local coordinate u = (s - knots[j]) / (knots[j+1] - knots[j]),
    X(s) = c0 + c1*u + c2*u**2 + c3*u**3.
    """

    knots: np.ndarray
    coeffs_x: np.ndarray
    coeffs_y: np.ndarray

    @property
    def pieces(self) -> int:
        return len(self.knots) - 1

    def _locate(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < -1e-12) or np.any(s > 1.0 + 1e-12):
            raise SplineError(f"parameter outside [0, 1]: {s}")
        s = np.clip(s, 0.0, 1.0)
        j = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, self.pieces - 1)
        h = self.knots[j + 1] - self.knots[j]
        u = (s - self.knots[j]) / h
        return j, u, h

    def eval(self, s):
        """Point(s) on the curve; s scalar or array in [0, 1]."""
        j, u, _ = self._locate(s)
        cx, cy = self.coeffs_x[j], self.coeffs_y[j]
        out = np.empty(u.shape + (2,)) if u.ndim else np.empty(2)
        out[..., 0] = cx[..., 0] + u * (cx[..., 1] + u * (cx[..., 2] + u * cx[..., 3]))
        out[..., 1] = cy[..., 0] + u * (cy[..., 1] + u * (cy[..., 2] + u * cy[..., 3]))
        return out

    def deriv(self, s):
        """First derivative d(X, Y)/ds."""
        j, u, h = self._locate(s)
        cx, cy = self.coeffs_x[j], self.coeffs_y[j]
        out = np.empty(u.shape + (2,)) if u.ndim else np.empty(2)
        out[..., 0] = (cx[..., 1] + u * (2.0 * cx[..., 2] + 3.0 * u * cx[..., 3])) / h
        out[..., 1] = (cy[..., 1] + u * (2.0 * cy[..., 2] + 3.0 * u * cy[..., 3])) / h
        return out

    def second_deriv(self, s):
        """Second derivative d2(X, Y)/ds2 (piecewise; used for curvature)."""
        j, u, h = self._locate(s)
        cx, cy = self.coeffs_x[j], self.coeffs_y[j]
        out = np.empty(u.shape + (2,)) if u.ndim else np.empty(2)
        out[..., 0] = (2.0 * cx[..., 2] + 6.0 * u * cx[..., 3]) / h**2
        out[..., 1] = (2.0 * cy[..., 2] + 6.0 * u * cy[..., 3]) / h**2
        return out

    def to_text(self) -> str:
        """Serialize knots and per-piece coefficients as structured text."""
        lines = ["knots: " + " ".join(repr(float(k)) for k in self.knots)]
        for name, arr in (("coeffs_x", self.coeffs_x), ("coeffs_y", self.coeffs_y)):
            lines.append(f"{name}:")
            for row in arr:
                lines.append("  " + " ".join(repr(float(c)) for c in row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "Spline2D":
        knots = None
        blocks = {"coeffs_x": [], "coeffs_y": []}
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("knots:"):
                knots = np.array([float(v) for v in line.split(":", 1)[1].split()])
                current = None
            elif line.startswith("coeffs_x:"):
                current = "coeffs_x"
            elif line.startswith("coeffs_y:"):
                current = "coeffs_y"
            elif current is not None:
                blocks[current].append([float(v) for v in line.split()])
        if knots is None or not blocks["coeffs_x"]:
            raise SplineError("malformed spline text")
        return Spline2D(knots, np.array(blocks["coeffs_x"]), np.array(blocks["coeffs_y"]))


@dataclass(frozen=True)
class ReferenceSet:
    """Center / left / right splines sharing one parameter domain."""

    center: Spline2D
    left: Spline2D
    right: Spline2D
    lookahead: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.lookahead < 1.0):
            raise SplineError(f"lookahead must be in (0, 1), got {self.lookahead}")


def _hermite_design(s: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Design matrix mapping (value, slope) knot unknowns to curve samples.

    Unknowns per coordinate are [v_0, d_0, v_1, d_1, ...] for the pieces+1
    knots, so C0/C1 continuity holds for any coefficient vector.
    """
    pieces = len(knots) - 1
    n = len(s)
    A = np.zeros((n, 2 * (pieces + 1)))
    j = np.clip(np.searchsorted(knots, s, side="right") - 1, 0, pieces - 1)
    h = knots[j + 1] - knots[j]
    u = (s - knots[j]) / h
    h00 = 2 * u**3 - 3 * u**2 + 1
    h10 = u**3 - 2 * u**2 + u
    h01 = -2 * u**3 + 3 * u**2
    h11 = u**3 - u**2
    rows = np.arange(n)
    A[rows, 2 * j] = h00
    A[rows, 2 * j + 1] = h10 * h
    A[rows, 2 * j + 2] = h01
    A[rows, 2 * j + 3] = h11 * h
    return A


def _hermite_to_power(vals: np.ndarray, slopes: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Convert knot (value, slope) pairs to per-piece power-basis coefficients."""
    pieces = len(knots) - 1
    coeffs = np.zeros((pieces, 4))
    for jp in range(pieces):
        h = knots[jp + 1] - knots[jp]
        v0, v1 = vals[jp], vals[jp + 1]
        m0, m1 = slopes[jp] * h, slopes[jp + 1] * h
        coeffs[jp] = [
            v0,
            m0,
            -3 * v0 + 3 * v1 - 2 * m0 - m1,
            2 * v0 - 2 * v1 + m0 + m1,
        ]
    return coeffs


def fit_spline(points, pieces: int) -> Spline2D:
    """Least-squares C1 piecewise-cubic fit of an ordered point sequence.

    Parameters are normalized chord lengths; knots are uniform on [0, 1].

    Raises:
        SplineError: fewer than 4 points, non-positive piece count, or all
            points coincident.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SplineError("points must be an (n, 2) array")
    if len(pts) < 4:
        raise SplineError("insufficient points: spline fit needs at least 4")
    if pieces < 1:
        raise SplineError("pieces must be >= 1")
    arc = polyline_arclength(pts)
    total = arc[-1]
    if total <= 0.0:
        raise SplineError("degenerate input: all points coincident")
    s = arc / total
    knots = np.linspace(0.0, 1.0, pieces + 1)
    A = _hermite_design(s, knots)
    # Independent least-squares solves per coordinate; rcond=None keeps the
    # minimum-norm solution when samples leave some pieces underdetermined.
    sol_x, _, _, _ = np.linalg.lstsq(A, pts[:, 0], rcond=None)
    sol_y, _, _, _ = np.linalg.lstsq(A, pts[:, 1], rcond=None)
    coeffs_x = _hermite_to_power(sol_x[0::2], sol_x[1::2], knots)
    coeffs_y = _hermite_to_power(sol_y[0::2], sol_y[1::2], knots)
    return Spline2D(knots, coeffs_x, coeffs_y)


def fit_residual(spline: Spline2D, points) -> float:
    """Max distance from the fitted curve (at chord parameters) to the points."""
    pts = np.asarray(points, dtype=float)
    arc = polyline_arclength(pts)
    s = arc / arc[-1]
    on_curve = spline.eval(s)
    return float(np.max(np.linalg.norm(on_curve - pts, axis=1)))


def window_bounds(total: float, ego_arclength: float, window: float, margin: float = 5.0):
    """[lo, hi] arclength range of the sliding window over a route of length total.

    The low end clamps at the route start; when the high end hits the route
    end, the whole window slides back so margin + window meters stay in view.
    """
    if window <= 0.0:
        raise SplineError("window must be positive")
    lo = max(0.0, ego_arclength - margin)
    hi = min(total, ego_arclength + window)
    if ego_arclength + window >= total:
        lo = max(0.0, total - (window + margin))
        hi = total
    return lo, hi


def window_indices(arc: np.ndarray, ego_arclength: float, window: float, margin: float = 5.0):
    """Contiguous index range of polyline samples inside the sliding window."""
    lo, hi = window_bounds(float(arc[-1]), ego_arclength, window, margin)
    mask = (arc >= lo - 1e-9) & (arc <= hi + 1e-9)
    idx = np.flatnonzero(mask)
    while len(idx) < 4 and (idx[0] > 0 or idx[-1] < len(arc) - 1):
        idx = np.arange(max(idx[0] - 1, 0), min(idx[-1] + 1, len(arc) - 1) + 1)
    return int(idx[0]), int(idx[-1])


def sliding_window(lane_points, ego_arclength: float, window: float, margin: float = 5.0):
    """Contiguous point subset covering [ego - margin, ego + window].

    Returns an (m, 2) array; see window_bounds for the clamping rules.
    """
    pts = np.asarray(lane_points, dtype=float)
    arc = polyline_arclength(pts)
    first, last = window_indices(arc, ego_arclength, window, margin)
    return pts[first : last + 1]


def sidedness(p, b0, b1) -> float:
    """Signed side test of point p against the directed segment b0 -> b1.

    Positive when p lies to the right of the direction of travel along the
    segment; zero when collinear.  Scales linearly with |b1 - b0|.
    """
    p = np.asarray(p, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    if np.all(b0 == b1):
        raise SplineError("degenerate bound: b0 == b1")
    return float((p[0] - b0[0]) * (b1[1] - b0[1]) - (p[1] - b0[1]) * (b1[0] - b0[0]))


def project_to_spline(spline: Spline2D, p, grid: int = 1000) -> float:
    """Parameter of the grid sample nearest to p (discretized linear search)."""
    if grid < 2:
        raise SplineError("grid must have at least 2 samples")
    s = np.linspace(0.0, 1.0, grid)
    pts = spline.eval(s)
    d2 = np.sum((pts - np.asarray(p, dtype=float)) ** 2, axis=1)
    return float(s[int(np.argmin(d2))])


def project_points_to_spline(spline: Spline2D, points, grid: int = 1000) -> np.ndarray:
    """Vectorized nearest-sample projection for many points at once."""
    if grid < 2:
        raise SplineError("grid must have at least 2 samples")
    s = np.linspace(0.0, 1.0, grid)
    curve = spline.eval(s)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = np.sum((curve[None, :, :] - pts[:, None, :]) ** 2, axis=2)
    return s[np.argmin(d2, axis=1)]
