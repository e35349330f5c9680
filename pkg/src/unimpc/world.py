"""Occupied-space model: grid clustering, enclosing ellipses, track prediction.

Static obstacles arrive as a binary occupancy grid and are turned into a
small set of 2D ellipses (centroid, two radii, yaw); dynamic vehicles arrive
as tracks and are rolled out along their lane into one ellipse per horizon
step.  Everything downstream (constraints, metrics) consumes ellipses only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .splines import polyline_arclength


class WorldError(ValueError):
    """Bad input to an occupied-space operation."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Ellipse:
    """Occupied-space primitive: centroid, longitudinal/lateral radii, yaw."""

    x: float
    y: float
    rx: float
    ry: float
    theta: float

    def __post_init__(self):
        if self.rx <= 0.0 or self.ry <= 0.0:
            raise WorldError(f"ellipse radii must be positive, got {self.rx}, {self.ry}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def inflated(self, margin: float) -> "Ellipse":
        return Ellipse(self.x, self.y, self.rx + margin, self.ry + margin, self.theta)

    def contains_value(self, p) -> float:
        """Quadratic containment form; < 1 inside, 1 on the boundary."""
        dx = p[0] - self.x
        dy = p[1] - self.y
        c, s = math.cos(self.theta), math.sin(self.theta)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (lx / self.rx) ** 2 + (ly / self.ry) ** 2

    def boundary_points(self, n: int = 720) -> np.ndarray:
        """Dense boundary sampling, used for distance queries."""
        ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        c, s = math.cos(self.theta), math.sin(self.theta)
        bx = self.rx * np.cos(ang)
        by = self.ry * np.sin(ang)
        return np.stack([self.x + c * bx - s * by, self.y + s * bx + c * by], axis=1)

    def boundary_distance(self, p, n: int = 720) -> float:
        """Distance from p to the ellipse boundary; 0 when p is inside."""
        if self.contains_value(p) < 1.0:
            return 0.0
        d = np.linalg.norm(self.boundary_points(n) - np.asarray(p, dtype=float), axis=1)
        return float(np.min(d))


@dataclass(frozen=True)
class OccupancyGrid:
    """Row-major binary grid; cell (r, c) center is origin + res*(c+.5, r+.5)."""

    width: int
    height: int
    resolution: float
    origin: tuple
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8).reshape(self.height, self.width)
        object.__setattr__(self, "cells", cells)
        if self.resolution <= 0.0:
            raise WorldError("grid resolution must be positive")

    def cell_center(self, r: int, c: int) -> np.ndarray:
        return np.array(
            [
                self.origin[0] + (c + 0.5) * self.resolution,
                self.origin[1] + (r + 0.5) * self.resolution,
            ]
        )

    def cell_centers(self, cells) -> np.ndarray:
        rc = np.asarray(cells, dtype=float)
        xs = self.origin[0] + (rc[:, 1] + 0.5) * self.resolution
        ys = self.origin[1] + (rc[:, 0] + 0.5) * self.resolution
        return np.stack([xs, ys], axis=1)

    @staticmethod
    def from_text(text: str) -> "OccupancyGrid":
        """Parse the plain-text asset format.

        Header line: "width height resolution origin_x origin_y", followed by
        height rows of width 0/1 characters (row 0 first).
        """
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        header = lines[0].split()
        if len(header) != 5:
            raise WorldError("grid header must be: width height resolution origin_x origin_y")
        width, height = int(header[0]), int(header[1])
        resolution = float(header[2])
        origin = (float(header[3]), float(header[4]))
        rows = lines[1 : 1 + height]
        if len(rows) != height or any(len(r.strip()) != width for r in rows):
            raise WorldError("grid body does not match header dimensions")
        cells = np.array([[1 if ch == "1" else 0 for ch in r.strip()] for r in rows], dtype=np.uint8)
        return OccupancyGrid(width, height, resolution, origin, cells)

    def to_text(self) -> str:
        header = f"{self.width} {self.height} {self.resolution!r} {self.origin[0]!r} {self.origin[1]!r}"
        body = "\n".join("".join(str(int(v)) for v in row) for row in self.cells)
        return header + "\n" + body + "\n"


@dataclass(frozen=True)
class VehicleTrack:
    """Tracked non-ego vehicle: position, lane speed, footprint half-extents."""

    pos: tuple
    lon_vel: float
    rx: float
    ry: float

    def __post_init__(self):
        if self.lon_vel < 0.0:
            raise WorldError("track longitudinal velocity must be >= 0")
        if self.rx <= 0.0 or self.ry <= 0.0:
            raise WorldError("track radii must be positive")


@dataclass(frozen=True)
class ObstacleHorizon:
    """Per-step obstacle sets; steps[i] holds the ellipses at horizon step i."""

    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(tuple(s) for s in self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, i: int):
        """Obstacles at step i; the last step is replicated past the end."""
        if not self.steps:
            return ()
        return self.steps[min(i, len(self.steps) - 1)]

    @staticmethod
    def assemble(static_ellipses, dynamic_trajectories, steps: int) -> "ObstacleHorizon":
        """Static ellipses replicated per step, dynamic rollouts appended."""
        per_step = []
        for i in range(steps):
            row = list(static_ellipses)
            for traj in dynamic_trajectories:
                row.append(traj[min(i, len(traj) - 1)])
            per_step.append(row)
        return ObstacleHorizon(tuple(per_step))


def chebyshev_offsets(rad: int) -> list:
    """All nonzero offsets within Chebyshev radius rad."""
    return [
        (dr, dc)
        for dr in range(-rad, rad + 1)
        for dc in range(-rad, rad + 1)
        if dr != 0 or dc != 0
    ]


def region_grow(grid: OccupancyGrid, r: int, c: int, rad: int, visited: np.ndarray) -> list:
    """Cluster of occupied cells reachable from (r, c) via radius-rad hops.

    Marks every returned cell in `visited`.  The scan is a plain breadth-first
    expansion over the Chebyshev neighborhood; neighbor indices are bounds
    checked before use.
    """
    if rad < 1:
        raise WorldError("neighborhood radius must be >= 1")
    if grid.cells[r][c] != 1:
        raise WorldError(f"seed cell ({r}, {c}) is not occupied")
    if visited[r][c]:
        raise WorldError(f"seed cell ({r}, {c}) already visited")
    offsets = chebyshev_offsets(rad)
    seeds = deque([(r, c)])
    visited[r][c] = 1
    cluster = [(r, c)]
    while seeds:
        cr, cc = seeds.popleft()
        for dr, dc in offsets:
            tr, tc = cr + dr, cc + dc
            if tr < 0 or tr >= grid.height or tc < 0 or tc >= grid.width:
                continue
            if grid.cells[tr][tc] == 1 and not visited[tr][tc]:
                visited[tr][tc] = 1
                seeds.append((tr, tc))
                cluster.append((tr, tc))
    return cluster


def mvee(points, tol: float = 1e-3, max_iter: int = 2000, min_radius: float = 0.1) -> Ellipse:
    """Minimum-volume enclosing ellipse by Khachiyan iterative reweighting.

    Stops on the duality gap (largest lifted leverage value within a tol-sized
    factor of d+1), which certifies containment form <= 1+tol and area within
    a (1+tol)-type factor of minimal.  Returns centroid, radii and yaw from
    the eigendecomposition of the shape matrix.  Degenerate inputs (single
    point, collinear) get their short radius floored at `min_radius`; if the
    iteration fails outright, the circumscribed ellipse of the axis-aligned
    bounding box is returned.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise WorldError("mvee needs at least one point")
    if tol <= 0.0:
        raise WorldError("tolerance must be positive")
    n, d = pts.shape
    center = pts.mean(axis=0)
    spread = pts - center
    if n == 1 or np.allclose(spread, 0.0):
        return Ellipse(center[0], center[1], min_radius, min_radius, 0.0)

    Q = np.vstack([pts.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    # Gap level chosen so the worst containment value (kappa-1)/d lands just
    # under 1+tol at termination.
    gap = 0.9 * tol * d / (d + 1.0)
    ok = False
    for _ in range(max_iter):
        V = Q @ (u[:, None] * Q.T)
        try:
            M = np.einsum("ij,ji->i", Q.T, np.linalg.solve(V, Q))
        except np.linalg.LinAlgError:
            break
        j_up = int(np.argmax(M))
        active = u > 0.0
        j_dn = int(np.flatnonzero(active)[np.argmin(M[active])])
        excess = M[j_up] - (d + 1.0)
        deficit = (d + 1.0) - M[j_dn]
        if excess <= gap * (d + 1.0) and deficit <= gap * (d + 1.0):
            ok = True
            break
        # Wolfe away-steps: either pull weight toward the worst-covered point
        # or push it off an over-weighted one, whichever helps more.
        if excess >= deficit:
            j = j_up
            step = (M[j] - d - 1.0) / ((d + 1.0) * (M[j] - 1.0))
        else:
            j = j_dn
            step = max(
                (M[j] - d - 1.0) / ((d + 1.0) * (M[j] - 1.0)),
                -u[j] / (1.0 - u[j]) if u[j] < 1.0 else 0.0,
            )
        u *= 1.0 - step
        u[j] += step

    if ok:
        center = pts.T @ u
        cov = pts.T @ (u[:, None] * pts) - np.outer(center, center)
        try:
            shape = np.linalg.inv(cov) / d
        except np.linalg.LinAlgError:
            ok = False
    if not ok:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = (lo + hi) / 2.0
        half = (hi - lo) / 2.0
        rx = max(half[0] * math.sqrt(2.0), min_radius)
        ry = max(half[1] * math.sqrt(2.0), min_radius)
        if rx >= ry:
            return Ellipse(center[0], center[1], rx, ry, 0.0)
        return Ellipse(center[0], center[1], ry, rx, math.pi / 2)

    eigvals, eigvecs = np.linalg.eigh(shape)
    eigvals = np.maximum(eigvals, 1e-12)
    radii = 1.0 / np.sqrt(eigvals)
    # Major axis is the longitudinal one; eigh sorts eigenvalues ascending,
    # so the first column pairs with the larger radius.
    major, minor = radii[0], radii[1]
    axis = eigvecs[:, 0]
    if radii[1] > radii[0]:
        major, minor = radii[1], radii[0]
        axis = eigvecs[:, 1]
    theta = math.atan2(axis[1], axis[0])
    ell = Ellipse(center[0], center[1], max(major, minor), max(minor, min_radius), theta)
    # Exact containment guarantee: grow radially if any point still pokes out.
    worst = max(ell.contains_value(p) for p in pts)
    if worst > 1.0:
        scale = math.sqrt(worst)
        ell = Ellipse(ell.x, ell.y, ell.rx * scale, ell.ry * scale, ell.theta)
    return ell


def grid_to_ellipses(grid: OccupancyGrid, rad: int = 4, refs=None, tol: float = 1e-3) -> list:
    """One enclosing ellipse per occupied-cell cluster, in world coordinates.

    When a ReferenceSet is given, cells off the drivable surface (failing
    either sidedness test against the boundary splines) are dropped before
    clustering.  A single-cell cluster becomes a circle of radius
    resolution/sqrt(2); short radii are floored likewise.
    """
    work = grid
    if refs is not None:
        work = _filter_to_surface(grid, refs)
    floor = grid.resolution / math.sqrt(2.0)
    visited = np.zeros((grid.height, grid.width), dtype=np.uint8)
    out = []
    for r in range(work.height):
        for c in range(work.width):
            if work.cells[r][c] == 1 and not visited[r][c]:
                cluster = region_grow(work, r, c, rad, visited)
                centers = work.cell_centers(cluster)
                out.append(mvee(centers, tol=tol, min_radius=floor))
    return out


def _filter_to_surface(grid: OccupancyGrid, refs) -> OccupancyGrid:
    from .splines import project_points_to_spline, sidedness

    occupied = np.argwhere(grid.cells == 1)
    if len(occupied) == 0:
        return grid
    centers = grid.cell_centers(occupied)
    la = refs.lookahead
    s_left = np.minimum(project_points_to_spline(refs.left, centers), 1.0 - la)
    s_right = np.minimum(project_points_to_spline(refs.right, centers), 1.0 - la)
    keep = np.zeros(len(centers), dtype=bool)
    for i, p in enumerate(centers):
        lb0 = refs.left.eval(s_left[i])
        lb1 = refs.left.eval(s_left[i] + la)
        rb0 = refs.right.eval(s_right[i])
        rb1 = refs.right.eval(s_right[i] + la)
        keep[i] = sidedness(p, lb0, lb1) > 0.0 and sidedness(p, rb0, rb1) < 0.0
    cells = np.zeros_like(grid.cells)
    kept = occupied[keep]
    cells[kept[:, 0], kept[:, 1]] = 1
    return OccupancyGrid(grid.width, grid.height, grid.resolution, grid.origin, cells)


def interp_point_at_distance(path: np.ndarray, arc: np.ndarray, dist: float) -> np.ndarray:
    """Linear interpolation along a polyline at a given arclength (clamped)."""
    dist = min(max(dist, 0.0), arc[-1])
    j = int(np.clip(np.searchsorted(arc, dist, side="right") - 1, 0, len(arc) - 2))
    seg = arc[j + 1] - arc[j]
    t = 0.0 if seg <= 0.0 else (dist - arc[j]) / seg
    return path[j] + t * (path[j + 1] - path[j])


def locate_on_polyline(path, pos) -> tuple:
    """(arclength, distance) of the closest point on a polyline to pos."""
    pts = np.asarray(path, dtype=float)
    arc = polyline_arclength(pts)
    p = np.asarray(pos, dtype=float)
    a = pts[:-1]
    ab = pts[1:] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(denom == 0.0, 1.0, denom), 0.0, 1.0)
    proj = a + t[:, None] * ab
    d2 = np.sum((proj - p) ** 2, axis=1)
    j = int(np.argmin(d2))
    return float(arc[j] + t[j] * math.sqrt(denom[j])), float(math.sqrt(d2[j]))


def predict_dynamic(
    track: VehicleTrack,
    path,
    step_seconds: float,
    steps: int,
    locate_threshold: float = 3.0,
) -> list:
    """Constant-velocity rollout of a track along its lane polyline.

    Step i sits at (start arclength + i*step_seconds*lon_vel); yaw comes from
    the chord to a point 0.1 m further along.  Raises if the track cannot be
    localized onto the path within `locate_threshold` meters.
    """
    if step_seconds <= 0.0 or steps < 1:
        raise WorldError("prediction needs step_seconds > 0 and steps >= 1")
    pts = np.asarray(path, dtype=float)
    arc = polyline_arclength(pts)
    pos = np.asarray(track.pos, dtype=float)
    start_dist, gap = locate_on_polyline(pts, pos)
    if gap > locate_threshold:
        raise WorldError(
            f"track at {tuple(pos)} is {gap:.2f} m from the path "
            f"(threshold {locate_threshold} m)"
        )
    out = []
    for i in range(steps):
        lon = start_dist + i * step_seconds * track.lon_vel
        p1 = interp_point_at_distance(pts, arc, lon)
        p2 = interp_point_at_distance(pts, arc, lon + 0.1)
        if np.allclose(p1, p2):
            back = interp_point_at_distance(pts, arc, lon - 0.1)
            theta = math.atan2(p1[1] - back[1], p1[0] - back[0])
        else:
            theta = math.atan2(p2[1] - p1[1], p2[0] - p1[0])
        out.append(Ellipse(p1[0], p1[1], track.rx, track.ry, theta))
    return out
