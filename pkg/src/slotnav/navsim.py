"""Grid-world navigation over an image-pose memory."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .promptgen import Pose, build_prompt, normalize_angle

Array = np.ndarray

Cell = tuple[int, int]

DEFAULT_HALF_ANGLE = math.pi / 4.0
DEFAULT_MAX_RANGE = 3.0
DEFAULT_CELL_M = 0.25


# ----------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class MemoryEntry:
    """One stored observation: image id, capture pose, unit embedding."""

    image_id: str
    pose: Pose
    embedding: Array

    def __post_init__(self) -> None:
        vec = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
            raise ValueError(f"memory embedding for {self.image_id!r} is not unit norm")
        vec.flags.writeable = False
        object.__setattr__(self, "embedding", vec)


@dataclass(frozen=True)
class WorldObject:
    """Named object instance anchored to a grid cell."""

    object_id: str
    noun: str
    cell: Cell

    @property
    def col(self) -> int:
        return self.cell[0]

    @property
    def row(self) -> int:
        return self.cell[1]


@dataclass(frozen=True)
class GridWorld:
    """Rectangular occupancy grid plus object instances, in map meters."""

    grid: Array
    cell_m: float
    objects: tuple[WorldObject, ...] = ()

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2 or grid.size == 0:
            raise ValueError("occupancy grid must be a nonempty 2-d array")
        if self.cell_m <= 0.0:
            raise ValueError("cell size must be positive")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "objects", tuple(self.objects))
        seen = set()
        for obj in self.objects:
            if obj.object_id in seen:
                raise ValueError(f"duplicate object id {obj.object_id!r}")
            seen.add(obj.object_id)
            if not self.in_bounds(obj.cell):
                raise ValueError(f"object {obj.object_id!r} outside the grid")
            if not self._viewable(obj.cell):
                raise ValueError(f"object {obj.object_id!r} has no adjacent free cell")

    def _viewable(self, cell: Cell) -> bool:
        if not self.occupied(cell):
            return True
        col, row = cell
        return any(self.in_bounds((col + dc, row + dr))
                   and not self.occupied((col + dc, row + dr))
                   for dc, dr in ((-1, 0), (1, 0), (0, -1), (0, 1)))

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    def in_bounds(self, cell: Cell) -> bool:
        col, row = cell
        return 0 <= col < self.cols and 0 <= row < self.rows

    def occupied(self, cell: Cell) -> bool:
        col, row = cell
        return bool(self.grid[row, col])

    def cell_of(self, x: float, y: float) -> Cell:
        return (int(math.floor(x / self.cell_m)), int(math.floor(y / self.cell_m)))

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        col, row = cell
        return ((col + 0.5) * self.cell_m, (row + 0.5) * self.cell_m)

    def object_position(self, obj: WorldObject) -> tuple[float, float]:
        return self.cell_center(obj.cell)

    def objects_named(self, noun: str) -> list[WorldObject]:
        return [o for o in self.objects if o.noun == noun]


@dataclass(frozen=True)
class FovParams:
    """Camera model: angular half-width, range, and occlusion switch."""

    half_angle: float = DEFAULT_HALF_ANGLE
    max_range: float = DEFAULT_MAX_RANGE
    occlusion: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.half_angle < math.pi:
            raise ValueError("half_angle must lie in (0, pi)")
        if self.max_range <= 0.0:
            raise ValueError("max_range must be positive")


@dataclass
class EpisodeResult:
    """Outcome of one navigation episode."""

    query: str
    ranked_ids: list[str]
    visited: list[Pose]
    stop_pose: Pose
    distance: float
    object_in_fov: bool
    path_cells: int
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.distance < 0.0:
            raise ValueError("distance must be nonnegative")
        if not self.visited or self.visited[-1] != self.stop_pose:
            raise ValueError("stop pose must be the last visited pose")


@dataclass(frozen=True)
class SuccessReport:
    """Success rate at a radius plus the FOV-only rate."""

    radius: float
    success_rate: float
    fov_rate: float
    episodes: int


# ----------------------------------------------------------------------
# World file format

def parse_world(text: str, cell_m: float = DEFAULT_CELL_M) -> GridWorld:
    """Parse a grid block (# occupied, . free), a blank line, an object table."""
    lines = text.splitlines()
    grid_rows: list[list[bool]] = []
    i = 0
    while i < len(lines) and lines[i].strip():
        row = lines[i].strip()
        bad = set(row) - {"#", "."}
        if bad:
            raise ValueError(f"line {i + 1}: bad grid characters {sorted(bad)}")
        grid_rows.append([c == "#" for c in row])
        i += 1
    if not grid_rows:
        raise ValueError("world file has no grid")
    if len({len(r) for r in grid_rows}) != 1:
        raise ValueError("grid rows have unequal lengths")
    objects = []
    for lineno in range(i, len(lines)):
        line = lines[lineno].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno + 1}: expected 'id noun cell_x cell_y'")
        try:
            cell = (int(parts[2]), int(parts[3]))
        except ValueError:
            raise ValueError(f"line {lineno + 1}: cell coordinates must be integers")
        objects.append(WorldObject(object_id=parts[0], noun=parts[1], cell=cell))
    return GridWorld(grid=np.array(grid_rows, dtype=bool), cell_m=cell_m,
                     objects=tuple(objects))


def format_world(world: GridWorld) -> str:
    """Inverse of parse_world."""
    rows = ["".join("#" if world.grid[r, c] else "."
                    for c in range(world.cols))
            for r in range(world.rows)]
    table = [f"{o.object_id} {o.noun} {o.col} {o.row}" for o in world.objects]
    return "\n".join(rows) + ("\n\n" + "\n".join(table) + "\n" if table else "\n")


def load_world(path: str, cell_m: float = DEFAULT_CELL_M) -> GridWorld:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return parse_world(fh.read(), cell_m=cell_m)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from exc


def save_world(world: GridWorld, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_world(world))


# ----------------------------------------------------------------------
# Planning

def plan_path(world: GridWorld, start: Pose, goal: Pose) -> list[Cell]:
    """Shortest 4-connected cell path between the poses' cells, inclusive."""
    start_cell = world.cell_of(start.x, start.y)
    goal_cell = world.cell_of(goal.x, goal.y)
    for label, cell in (("start", start_cell), ("goal", goal_cell)):
        if not world.in_bounds(cell):
            raise ValueError(f"{label} cell {cell} is outside the grid")
        if world.occupied(cell):
            raise ValueError(f"{label} cell {cell} is occupied")
    if start_cell == goal_cell:
        return [start_cell]

    def heuristic(cell: Cell) -> int:
        return abs(cell[0] - goal_cell[0]) + abs(cell[1] - goal_cell[1])

    frontier: list[tuple[int, int, int, Cell]] = []
    heapq.heappush(frontier, (heuristic(start_cell), 0, 0, start_cell))
    came_from: dict[Cell, Cell | None] = {start_cell: None}
    cost: dict[Cell, int] = {start_cell: 0}
    tie = 0
    while frontier:
        _, g, _, cell = heapq.heappop(frontier)
        if cell == goal_cell:
            path = []
            node: Cell | None = cell
            while node is not None:
                path.append(node)
                node = came_from[node]
            return path[::-1]
        if g > cost[cell]:
            continue
        col, row = cell
        for dc, dr in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (col + dc, row + dr)
            if not world.in_bounds(nxt) or world.occupied(nxt):
                continue
            if nxt not in cost or g + 1 < cost[nxt]:
                cost[nxt] = g + 1
                came_from[nxt] = cell
                tie += 1
                heapq.heappush(frontier, (g + 1 + heuristic(nxt), g + 1, tie, nxt))
    return []


def path_steps(path: Sequence[Cell]) -> int:
    """Number of cell transitions along a path."""
    return max(len(path) - 1, 0)


# ----------------------------------------------------------------------
# Field of view

def _ray_blocked(world: GridWorld, a: tuple[float, float],
                 b: tuple[float, float]) -> bool:
    """True when an occupied cell lies strictly between the two points.

    The endpoints' own cells never block: the viewer stands in one and the
    target (often an occupied furniture cell) defines the other.
    """
    start_cell = world.cell_of(*a)
    end_cell = world.cell_of(*b)
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    col, row = start_cell
    step_c = 1 if dx > 0 else -1
    step_r = 1 if dy > 0 else -1
    # Parametric distance to the next vertical / horizontal grid line.
    if dx != 0.0:
        next_c = (col + (1 if dx > 0 else 0)) * world.cell_m
        t_max_c = (next_c - a[0]) / dx
        t_delta_c = world.cell_m / abs(dx)
    else:
        t_max_c, t_delta_c = math.inf, math.inf
    if dy != 0.0:
        next_r = (row + (1 if dy > 0 else 0)) * world.cell_m
        t_max_r = (next_r - a[1]) / dy
        t_delta_r = world.cell_m / abs(dy)
    else:
        t_max_r, t_delta_r = math.inf, math.inf
    cell = (col, row)
    while cell != end_cell:
        if t_max_c <= t_max_r:
            col += step_c
            t_max_c += t_delta_c
        else:
            row += step_r
            t_max_r += t_delta_r
        cell = (col, row)
        if cell == end_cell:
            break
        if not world.in_bounds(cell) or world.occupied(cell):
            return True
    return False


def in_fov(pose: Pose, target: tuple[float, float],
           half_angle: float = DEFAULT_HALF_ANGLE,
           max_range: float = DEFAULT_MAX_RANGE,
           world: GridWorld | None = None,
           occlusion: bool = True) -> bool:
    """Range, bearing, and (optionally) line-of-sight visibility test."""
    FovParams(half_angle=half_angle, max_range=max_range)
    dx = target[0] - pose.x
    dy = target[1] - pose.y
    distance = math.hypot(dx, dy)
    if distance > max_range:
        return False
    if distance < 1e-12:
        return True
    bearing = math.atan2(dy, dx)
    if abs(normalize_angle(bearing - pose.theta)) > half_angle:
        return False
    if occlusion and world is not None:
        return not _ray_blocked(world, (pose.x, pose.y), target)
    return True


# ----------------------------------------------------------------------
# Episode execution

def follow_waypoints(world: GridWorld, path: Sequence[Cell],
                     target: Pose) -> list[Pose]:
    """Ideal local executor: face each motion direction, settle on the target."""
    poses = []
    for i in range(1, len(path)):
        x, y = world.cell_center(path[i])
        px, py = world.cell_center(path[i - 1])
        poses.append(Pose(x=x, y=y, theta=math.atan2(y - py, x - px)))
    if poses:
        poses[-1] = target
    else:
        poses = [target]
    return poses


def _fov_hit(world: GridWorld, pose: Pose, instances: Sequence[WorldObject],
             fov: FovParams) -> WorldObject | None:
    for obj in instances:
        if in_fov(pose, world.object_position(obj), half_angle=fov.half_angle,
                  max_range=fov.max_range, world=world, occlusion=fov.occlusion):
            return obj
    return None


def execute_episode(query: str, noun: str, memory: Sequence[MemoryEntry],
                    world: GridWorld, k: int,
                    encode: Callable[[str], Array],
                    start: Pose,
                    fov: FovParams = FovParams()) -> EpisodeResult:
    """Visit the top-k retrieved memory poses until the object is in view.

    The retrieval prompt is the object noun followed by the query sentence.
    Candidates whose pose cannot be reached are skipped with a note; if no
    visited pose sees the object the episode stops at the last one reached.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not memory:
        raise ValueError("memory must be nonempty")
    instances = world.objects_named(noun)
    if not instances:
        raise ValueError(f"world has no object named {noun!r}")
    prompt = build_prompt(noun, query) if query else noun
    vec = np.asarray(encode(prompt), dtype=np.float64).reshape(-1)
    dim = memory[0].embedding.shape[0]
    if vec.shape[0] != dim:
        raise ValueError(f"query embedding has dimension {vec.shape[0]}, "
                         f"memory has {dim}")
    scores = {entry.image_id: float(np.dot(entry.embedding, vec))
              for entry in memory}
    ranked = sorted(memory, key=lambda e: (-scores[e.image_id], e.image_id))[:k]
    ranked_ids = [e.image_id for e in ranked]

    visited: list[Pose] = []
    notes: list[str] = []
    path_cells = 0
    seen: WorldObject | None = None
    current = start
    for entry in ranked:
        try:
            path = plan_path(world, current, entry.pose)
        except ValueError as exc:
            notes.append(f"skipped {entry.image_id}: {exc}")
            continue
        if not path:
            notes.append(f"skipped {entry.image_id}: unreachable")
            continue
        trail = follow_waypoints(world, path, entry.pose)
        path_cells += path_steps(path)
        current = trail[-1]
        visited.append(current)
        seen = _fov_hit(world, current, instances, fov)
        if seen is not None:
            break
    if not visited:
        visited = [start]
        notes.append("all candidates unreachable")
    stop = visited[-1]
    if seen is not None:
        target = world.object_position(seen)
    else:
        target = min((world.object_position(o) for o in instances),
                     key=lambda p: math.hypot(p[0] - stop.x, p[1] - stop.y))
    distance = math.hypot(target[0] - stop.x, target[1] - stop.y)
    return EpisodeResult(query=query, ranked_ids=ranked_ids, visited=visited,
                         stop_pose=stop, distance=distance,
                         object_in_fov=seen is not None,
                         path_cells=path_cells, notes=notes)


# ----------------------------------------------------------------------
# Metrics and logs

def success_rate(episodes: Sequence[EpisodeResult], radius: float) -> SuccessReport:
    """Fraction of episodes stopping within radius with the object in view."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if not episodes:
        raise ValueError("no episodes to score")
    wins = sum(1 for e in episodes if e.distance <= radius and e.object_in_fov)
    fov = sum(1 for e in episodes if e.object_in_fov)
    return SuccessReport(radius=radius, success_rate=wins / len(episodes),
                         fov_rate=fov / len(episodes), episodes=len(episodes))


def episode_to_json(result: EpisodeResult) -> dict:
    return {"query": result.query,
            "ranked_ids": list(result.ranked_ids),
            "stop_pose": {"x": result.stop_pose.x, "y": result.stop_pose.y,
                          "theta": result.stop_pose.theta},
            "distance": result.distance,
            "object_in_fov": result.object_in_fov,
            "path_cells": result.path_cells,
            "notes": list(result.notes)}


def save_episode_log(episodes: Sequence[EpisodeResult], path: str) -> None:
    """Write one JSON record per episode."""
    with open(path, "w", encoding="utf-8") as fh:
        for episode in episodes:
            fh.write(json.dumps(episode_to_json(episode), sort_keys=True) + "\n")
