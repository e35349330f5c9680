"""Shipped experiment scenarios and the scenario text-file format.

The paper's maps are not published, so each layout here is a documented
reconstruction: a right turn between two perpendicular 3.5 m lanes, a
straight obstacle course whose first obstacle can only be passed legally on
the left, and a 200 m two-lane overtake.  Files serialize every Scenario
field as structured text; occupancy grids use the plain-text grid format.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .dynamics import VehicleState
from .simulate import Scenario, ScenarioError
from .world import OccupancyGrid, VehicleTrack


def _offset_boundaries(center: np.ndarray, half_width_left: float, half_width_right: float):
    """Parallel curves via central-difference unit normals (left = +normal)."""
    tang = np.gradient(center, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return center + half_width_left * normal, center - half_width_right * normal


def right_turn() -> Scenario:
    """Right turn at an intersection: 52 m in, radius-8 arc, 40 m out."""
    ds = 1.0
    leg1 = np.stack([np.arange(0.0, 52.0 + ds, ds), np.zeros(53)], axis=1)
    radius = 8.0
    arc_len = radius * math.pi / 2
    n_arc = int(arc_len / ds) + 1
    phi = np.linspace(0.0, math.pi / 2, n_arc + 1)[1:]
    arc = np.stack([52.0 + radius * np.sin(phi), radius * (np.cos(phi) - 1.0)], axis=1)
    leg2_y = np.arange(-radius - ds, -radius - 40.0 - ds, -ds)
    leg2 = np.stack([np.full_like(leg2_y, 60.0), leg2_y], axis=1)
    center = np.vstack([leg1, arc, leg2])
    left, right = _offset_boundaries(center, 1.75, 1.75)
    return Scenario(
        name="right_turn",
        centerline=center,
        left_boundary=left,
        right_boundary=right,
        v_max=8.0,
        initial_state=VehicleState(0.0, 0.0, 0.0, 8.0, 8.0, 0.0),
        duration=35.0,
        window=120.0,
        pieces=12,
        note="Right turn at a 4-way intersection, two perpendicular 3.5 m lanes "
             "joined by an 8 m arc (reconstructed layout).",
    )


def _course_grid() -> OccupancyGrid:
    """Three obstacle blocks on the course, plus one block off the surface."""
    width, height, res = 100, 24, 0.5
    origin = (20.0, -4.0)
    cells = np.zeros((height, width), dtype=np.uint8)

    def block(cx_cells, cy_cells, half):
        cells[cy_cells - half : cy_cells + half + 1, cx_cells - half : cx_cells + half + 1] = 1

    # (25.25, +0.25) 5x5: squarely blocks the lane center; legal pass is left.
    block(10, 8, 2)
    # (45.25, -0.75) 3x3 and (65.25, +1.25) 3x3: alternating offsets.
    block(50, 6, 1)
    block(90, 10, 1)
    # Off-surface clutter near y = +7.25 that the drivable filter must drop.
    block(30, 22, 1)
    return OccupancyGrid(width, height, res, origin, cells)


def static_course(no_boundary: bool = False, no_exploration: bool = False,
                  name: str | None = None) -> Scenario:
    """Straight road, 3 obstacles ~20 m apart alternating around the center.

    The drivable surface is asymmetric (right edge -1.9 m, left edge +4.0 m):
    the first obstacle reaches past the right margin, so the only legal pass
    is on the left, while the cheapest unconstrained pass is on the right.
    """
    x = np.arange(0.0, 101.0, 1.0)
    center = np.stack([x, np.zeros_like(x)], axis=1)
    left, right = _offset_boundaries(center, 4.0, 1.9)
    return Scenario(
        name=name or ("course_no_boundary" if no_boundary else
                      "course_no_exploration" if no_exploration else "static_course"),
        centerline=center,
        left_boundary=left,
        right_boundary=right,
        v_max=8.0,
        initial_state=VehicleState(0.0, 0.0, 0.0, 6.0, 6.0, 0.0),
        duration=45.0,
        grid=_course_grid(),
        disable_boundary_constraints=no_boundary,
        disable_exploration_solver=no_exploration,
        window=120.0,
        pieces=6,
        note="Straight obstacle course (reconstructed): blocks at x = 25.25, "
             "45.25, 65.25 m; right edge tight so the first pass must go left.",
    )


def overtake() -> Scenario:
    """Two-lane straight road; a 7.5 m/s target vehicle ahead of the ego."""
    x = np.arange(0.0, 201.0, 2.0)
    center = np.stack([x, np.zeros_like(x)], axis=1)
    left, right = _offset_boundaries(center, 5.25, 1.75)
    return Scenario(
        name="overtake",
        centerline=center,
        left_boundary=left,
        right_boundary=right,
        v_max=15.0,
        initial_state=VehicleState(0.0, 0.0, 0.0, 12.0, 12.0, 0.0),
        duration=30.0,
        tracks=[VehicleTrack((30.0, 0.0), 7.5, 2.4, 1.0)],
        window=210.0,
        pieces=6,
        note="200 m straight two-lane road; target vehicle at 7.5 m/s starting "
             "30 m ahead; speed limit 15 m/s.",
    )


SHIPPED = {
    "right_turn": right_turn,
    "static_course": static_course,
    "course_no_boundary": lambda: static_course(no_boundary=True),
    "course_no_exploration": lambda: static_course(no_exploration=True),
    "overtake": overtake,
}


def build(name: str) -> Scenario:
    if name not in SHIPPED:
        raise ScenarioError(f"unknown scenario '{name}'; shipped: {', '.join(SHIPPED)}")
    return SHIPPED[name]()


def scenario_to_text(sc: Scenario, grid_file: str | None = None) -> str:
    lines = []
    if sc.note:
        for chunk in sc.note.splitlines():
            lines.append(f"# {chunk}")
    lines.append(f"name: {sc.name}")
    lines.append(f"v_max: {sc.v_max!r}")
    lines.append(f"duration: {sc.duration!r}")
    lines.append(f"window: {sc.window!r}")
    lines.append(f"margin: {sc.margin!r}")
    lines.append(f"pieces: {sc.pieces}")
    lines.append(f"metrics_pieces: {sc.metrics_pieces}")
    lines.append(f"noise_std: {sc.noise_std!r}")
    s = sc.initial_state
    lines.append(f"init: {s.x!r} {s.y!r} {s.yaw!r} {s.v!r}")
    flags = []
    if sc.disable_boundary_constraints:
        flags.append("no_boundary")
    if sc.disable_exploration_solver:
        flags.append("no_exploration")
    if flags:
        lines.append("flags: " + " ".join(flags))
    if grid_file:
        lines.append(f"grid: {grid_file}")
    for tr in sc.tracks:
        lines.append(f"track: {tr.pos[0]!r} {tr.pos[1]!r} {tr.lon_vel!r} {tr.rx!r} {tr.ry!r}")
    for label, pts in (("centerline", sc.centerline), ("left", sc.left_boundary),
                       ("right", sc.right_boundary)):
        lines.append(f"{label}:")
        for p in pts:
            lines.append(f"  {float(p[0])!r} {float(p[1])!r}")
    return "\n".join(lines) + "\n"


def scenario_from_text(text: str, base_dir=None) -> Scenario:
    fields = {"tracks": [], "flags": []}
    points = {"centerline": [], "left": [], "right": []}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.endswith(":") and line[:-1] in points:
            current = line[:-1]
            continue
        if current is not None and ":" not in line.split()[0]:
            points[current].append([float(v) for v in line.split()])
            continue
        current = None
        key, _, val = line.partition(":")
        key, val = key.strip(), val.strip()
        if key == "track":
            x, y, vel, rx, ry = (float(v) for v in val.split())
            fields["tracks"].append(VehicleTrack((x, y), vel, rx, ry))
        elif key == "flags":
            fields["flags"] = val.split()
        elif key == "init":
            x, y, yaw, v = (float(t) for t in val.split())
            fields["init"] = VehicleState(x, y, yaw, v, v, 0.0)
        elif key == "grid":
            fields["grid"] = val
        else:
            fields[key] = val
    missing = [k for k in ("name", "v_max", "duration", "init") if k not in fields]
    if missing or not all(points.values()):
        raise ScenarioError(f"scenario file incomplete; missing: {missing or 'point lists'}")
    grid = None
    if "grid" in fields:
        grid_path = Path(base_dir or ".") / fields["grid"]
        grid = OccupancyGrid.from_text(grid_path.read_text())
    return Scenario(
        name=fields["name"],
        centerline=np.array(points["centerline"]),
        left_boundary=np.array(points["left"]),
        right_boundary=np.array(points["right"]),
        v_max=float(fields["v_max"]),
        initial_state=fields["init"],
        duration=float(fields["duration"]),
        grid=grid,
        tracks=fields["tracks"],
        disable_boundary_constraints="no_boundary" in fields["flags"],
        disable_exploration_solver="no_exploration" in fields["flags"],
        window=float(fields.get("window", 60.0)),
        margin=float(fields.get("margin", 5.0)),
        pieces=int(fields.get("pieces", 8)),
        metrics_pieces=int(fields.get("metrics_pieces", 16)),
        noise_std=float(fields.get("noise_std", 0.0)),
    )


def load_scenario(path) -> Scenario:
    p = Path(path)
    return scenario_from_text(p.read_text(), base_dir=p.parent)


def write_scenario_files(out_dir) -> list:
    """Materialize every shipped scenario (and grid assets) as text files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, builder in SHIPPED.items():
        sc = builder()
        grid_file = None
        if sc.grid is not None:
            grid_file = f"{name}.grid"
            (out / grid_file).write_text(sc.grid.to_text())
            paths.append(out / grid_file)
        p = out / f"{name}.txt"
        p.write_text(scenario_to_text(sc, grid_file=grid_file))
        paths.append(p)
    return paths
