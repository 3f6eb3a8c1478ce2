"""Deterministic 2-D grid world.

The world holds ground truth (occupancy, landmarks, targets), executes the
four discrete navigation primitives with collision semantics, and renders
the four-direction percept tuples consumed by the observation agent.

Coordinates
-----------
Cells are addressed as ``(col, row)``. A pose lives in meters with
``x = col * cell_size`` and ``y = row * cell_size``. Headings are degrees,
counter-clockwise from +x, so 90 points along +y and a left turn adds 90.
Scenario files address cells as ``[row, col]`` (matrix order).

Cell codes: ``.`` free, ``#`` obstacle, ``g`` glass. Glass blocks motion
like an obstacle but is reported as free when the percept noise channel
is glass-blind.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EpisodeFinished, ScenarioInvalid, Unsatisfiable

FREE, OBSTACLE, GLASS = ".", "#", "g"
CELL_CODES = (FREE, OBSTACLE, GLASS)
CATEGORY = {OBSTACLE: "wall", GLASS: "glass door"}
HEADINGS = (0, 90, 180, 270)
VIEW_NAMES = ("Front", "Right", "Back", "Left")
DEFAULT_MAX_RANGE = 5

Cell = tuple[int, int]


class Action(str, enum.Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_RIGHT = "TurnRight90"
    TURN_LEFT = "TurnLeft90"
    STOP = "Stop"

    def __str__(self) -> str:
        return self.value


class Outcome(str, enum.Enum):
    MOVED = "Moved"
    BLOCKED = "Blocked"
    TURNED = "Turned"
    STOPPED = "Stopped"

    def __str__(self) -> str:
        return self.value


def normalize_bearing(deg: float) -> float:
    """Wrap an angle into [-180, 180), snapping float noise at 1e-9."""
    b = round((deg + 180.0) % 360.0 - 180.0, 9)
    if b >= 180.0:
        b -= 360.0
    return b + 0.0


def heading_vector(heading: int) -> Cell:
    rad = math.radians(heading)
    return int(round(math.cos(rad))), int(round(math.sin(rad)))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int

    def __post_init__(self):
        if self.heading not in HEADINGS:
            raise ValueError(f"heading must be one of {HEADINGS}, got {self.heading}")

    def cell(self, cell_size: float = 1.0) -> Cell:
        return int(round(self.x / cell_size)), int(round(self.y / cell_size))

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), int(d["heading"]))


@dataclass(frozen=True)
class StepResult:
    pose: Pose
    outcome: Outcome
    blocked_by: str | None = None


@dataclass(frozen=True)
class Landmark:
    name: str
    cells: tuple[Cell, ...]  # (col, row)

    def to_dict(self) -> dict:
        return {"name": self.name, "cells": [[r, c] for c, r in self.cells]}


@dataclass(frozen=True)
class Scenario:
    grid: tuple[str, ...]
    cell_size: float
    landmarks: tuple[Landmark, ...]
    start: Pose
    instruction: str
    subtasks: tuple[str, ...]
    key_points: tuple[dict, ...] = ()
    step_budget: int = 0

    def __post_init__(self):
        if not self.grid or any(len(row) != len(self.grid[0]) for row in self.grid):
            raise ScenarioInvalid("grid must be a non-empty rectangle")
        if any(ch not in CELL_CODES for row in self.grid for ch in row):
            raise ScenarioInvalid("grid may only contain '.', '#', 'g'")
        if self.cell_size <= 0:
            raise ScenarioInvalid("cell_size must be positive")
        if not self.is_free(self.start.cell(self.cell_size)):
            raise ScenarioInvalid("start cell must be free")
        names = set()
        for lm in self.landmarks:
            if not lm.cells:
                raise ScenarioInvalid(f"landmark {lm.name!r} occupies no cell")
            if any(not self.in_bounds(c) for c in lm.cells):
                raise ScenarioInvalid(f"landmark {lm.name!r} lies outside the grid")
            names.add(lm.name)
        missing = [s for s in self.subtasks if s not in names]
        if missing:
            raise ScenarioInvalid(f"subtasks reference unknown landmarks: {missing}")
        if self.step_budget < 0:
            raise ScenarioInvalid("step_budget must be >= 0")

    @property
    def width(self) -> int:
        return len(self.grid[0])

    @property
    def height(self) -> int:
        return len(self.grid)

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal in meters."""
        return self.cell_size * math.hypot(self.width, self.height)

    def in_bounds(self, cell: Cell) -> bool:
        c, r = cell
        return 0 <= c < self.width and 0 <= r < self.height

    def code(self, cell: Cell) -> str:
        c, r = cell
        return self.grid[r][c]

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.code(cell) == FREE

    def landmark(self, name: str) -> Landmark:
        for lm in self.landmarks:
            if lm.name == name:
                return lm
        raise KeyError(name)

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        return cell[0] * self.cell_size, cell[1] * self.cell_size

    def has_glass(self) -> bool:
        return any(GLASS in row for row in self.grid)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "cell_size": self.cell_size,
            "landmarks": [lm.to_dict() for lm in self.landmarks],
            "start": self.start.to_dict(),
            "instruction": self.instruction,
            "subtasks": list(self.subtasks),
            "key_points": [dict(kp) for kp in self.key_points],
            "step_budget": self.step_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            landmarks = tuple(
                Landmark(str(lm["name"]), tuple((int(c), int(r)) for r, c in lm["cells"]))
                for lm in d["landmarks"]
            )
            return cls(
                grid=tuple(d["grid"]),
                cell_size=float(d["cell_size"]),
                landmarks=landmarks,
                start=Pose.from_dict(d["start"]),
                instruction=str(d["instruction"]),
                subtasks=tuple(d["subtasks"]),
                key_points=tuple(d.get("key_points", ())),
                step_budget=int(d["step_budget"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioInvalid):
                raise
            raise ScenarioInvalid(f"malformed scenario: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


# -- percepts -----------------------------------------------------------

@dataclass(frozen=True)
class ObstacleSighting:
    category: str
    bearing: float
    distance: float


@dataclass(frozen=True)
class LandmarkSighting:
    name: str
    bearing: float
    distance: float


@dataclass(frozen=True)
class Traversability:
    walkable: bool
    free_range: float


@dataclass(frozen=True)
class PerceptTuple:
    view: str
    obstacles: tuple[ObstacleSighting, ...]
    landmarks: tuple[LandmarkSighting, ...]
    traversability: Traversability
    context: str

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "obstacles": [vars(o) for o in self.obstacles],
            "landmarks": [vars(lm) for lm in self.landmarks],
            "traversability": vars(self.traversability),
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptTuple":
        return cls(
            view=d["view"],
            obstacles=tuple(ObstacleSighting(**o) for o in d["obstacles"]),
            landmarks=tuple(LandmarkSighting(**lm) for lm in d["landmarks"]),
            traversability=Traversability(**d["traversability"]),
            context=d["context"],
        )


@dataclass(frozen=True)
class NoiseConfig:
    """Percept noise channel. All-off by default."""

    glass_blind: bool = False
    distance_noise: float = 0.0
    seed: int = 0
    max_range: int = DEFAULT_MAX_RANGE

    def __post_init__(self):
        if self.distance_noise < 0:
            raise ValueError("distance_noise must be >= 0")
        if self.max_range < 1:
            raise ValueError("max_range must be >= 1")


def bresenham(a: Cell, b: Cell) -> list[Cell]:
    (x0, y0), (x1, y1) = a, b
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if (x0, y0) == (x1, y1):
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def view_index(bearing: float) -> int:
    """Which of the four views (Front, Right, Back, Left) owns a bearing.

    Each view covers the half-open sector (axis - 45, axis + 45].
    """
    for i in range(4):
        rel = normalize_bearing(bearing + 90.0 * i)
        if -45.0 < rel <= 45.0:
            return i
    return 2  # rel == -180 relative to front lands in Back


class World:
    """Mutable episode state over an immutable `Scenario`."""

    def __init__(self, scenario: Scenario, noise: NoiseConfig | None = None):
        self.scenario = scenario
        self.noise = noise or NoiseConfig()
        self.pose = scenario.start
        self.stopped = False
        self.steps = 0
        self._rng = random.Random(self.noise.seed)
        self._landmark_at: dict[Cell, list[str]] = {}
        for lm in scenario.landmarks:
            for cell in lm.cells:
                self._landmark_at.setdefault(cell, []).append(lm.name)

    def copy(self) -> "World":
        other = World(self.scenario, self.noise)
        other.pose, other.stopped, other.steps = self.pose, self.stopped, self.steps
        other._rng.setstate(self._rng.getstate())
        return other

    # -- dynamics ------------------------------------------------------
    def step(self, action: Action) -> StepResult:
        if self.stopped:
            raise EpisodeFinished("step() called after Stop was accepted")
        action = Action(action)
        self.steps += 1
        p = self.pose
        if action is Action.STOP:
            self.stopped = True
            return StepResult(p, Outcome.STOPPED)
        if action is Action.TURN_LEFT:
            self.pose = Pose(p.x, p.y, (p.heading + 90) % 360)
            return StepResult(self.pose, Outcome.TURNED)
        if action is Action.TURN_RIGHT:
            self.pose = Pose(p.x, p.y, (p.heading - 90) % 360)
            return StepResult(self.pose, Outcome.TURNED)
        cs = self.scenario.cell_size
        dx, dy = heading_vector(p.heading)
        c, r = p.cell(cs)
        target = (c + dx, r + dy)
        if not self.scenario.in_bounds(target):
            return StepResult(p, Outcome.BLOCKED, "boundary")
        code = self.scenario.code(target)
        if code != FREE:
            return StepResult(p, Outcome.BLOCKED, CATEGORY[code])
        self.pose = Pose(target[0] * cs, target[1] * cs, p.heading)
        return StepResult(self.pose, Outcome.MOVED)

    # -- perception ----------------------------------------------------
    def _blocks_view(self, cell: Cell) -> bool:
        code = self.scenario.code(cell)
        if code == GLASS and self.noise.glass_blind:
            return False
        return code != FREE

    def _visible(self, origin: Cell, cell: Cell) -> bool:
        return not any(self._blocks_view(c) for c in bresenham(origin, cell)[1:-1])

    def _jitter(self, d: float) -> float:
        a = self.noise.distance_noise
        if a <= 0:
            return d
        return round(max(0.0, d + self._rng.uniform(-a, a)), 9)

    def perceive(self, pose: Pose | None = None) -> tuple[PerceptTuple, ...]:
        """Four percept tuples ordered Front, Right, Back, Left."""
        pose = pose or self.pose
        sc = self.scenario
        cs = sc.cell_size
        origin = pose.cell(cs)
        rng_cells = self.noise.max_range
        obstacles: list[list[tuple]] = [[] for _ in range(4)]
        nearest_lm: list[dict[str, tuple]] = [{} for _ in range(4)]

        for dr in range(-rng_cells, rng_cells + 1):
            for dc in range(-rng_cells, rng_cells + 1):
                if (dc, dr) == (0, 0) or math.hypot(dc, dr) > rng_cells + 1e-9:
                    continue
                cell = (origin[0] + dc, origin[1] + dr)
                if not sc.in_bounds(cell) or not self._visible(origin, cell):
                    continue
                dist = round(cs * math.hypot(dc, dr), 9)
                bearing = normalize_bearing(math.degrees(math.atan2(dr, dc)) - pose.heading)
                v = view_index(bearing)
                if self._blocks_view(cell):
                    obstacles[v].append((dist, bearing, CATEGORY[sc.code(cell)]))
                for name in self._landmark_at.get(cell, ()):
                    best = nearest_lm[v].get(name)
                    if best is None or (dist, bearing) < best:
                        nearest_lm[v][name] = (dist, bearing)

        views = []
        for i in range(4):
            dx, dy = heading_vector((pose.heading - 90 * i) % 360)
            free = 0
            for s in range(1, rng_cells + 1):
                cell = (origin[0] + dx * s, origin[1] + dy * s)
                if not sc.in_bounds(cell) or self._blocks_view(cell):
                    break
                free = s
            obs = tuple(
                ObstacleSighting(cat, b, self._jitter(d)) for d, b, cat in sorted(obstacles[i])
            )
            lms = tuple(
                LandmarkSighting(name, b, self._jitter(d))
                for name, (d, b) in sorted(nearest_lm[i].items(), key=lambda kv: (kv[1], kv[0]))
            )
            if lms:
                context = f"near the {lms[0].name}"
            elif obs and obs[0].distance <= cs + 1e-9:
                context = f"{obs[0].category} close by"
            else:
                context = "open space"
            views.append(
                PerceptTuple(
                    view=VIEW_NAMES[i],
                    obstacles=obs,
                    landmarks=lms,
                    traversability=Traversability(free >= 1, free * cs),
                    context=context,
                )
            )
        return tuple(views)


# -- ground-truth path queries -------------------------------------------

def _neighbors(cell: Cell) -> Iterable[Cell]:
    c, r = cell
    yield (c + 1, r)
    yield (c, r + 1)
    yield (c - 1, r)
    yield (c, r - 1)


def target_region(scenario: Scenario, name: str, radius: float) -> set[Cell]:
    """Free cells whose center lies within `radius` meters of any landmark cell."""
    cs = scenario.cell_size
    reach = int(math.floor(radius / cs + 1e-9))
    out = set()
    for lc, lr in scenario.landmark(name).cells:
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                cell = (lc + dc, lr + dr)
                if cs * math.hypot(dc, dr) <= radius + 1e-9 and scenario.is_free(cell):
                    out.add(cell)
    return out


def shortest_visit_path(
    scenario: Scenario,
    radius: float = 1.0,
    subtasks: Sequence[str] | None = None,
    start: Cell | None = None,
) -> list[Cell] | None:
    """Shortest 4-connected walk from start that enters each target region in order.

    Stage-wise multi-source Dijkstra over the true grid (glass counts as
    blocked). Returns the cell sequence, or None when no such walk exists.
    """
    subtasks = scenario.subtasks if subtasks is None else subtasks
    start = scenario.start.cell(scenario.cell_size) if start is None else start
    parents: list[dict[Cell, Cell | None]] = []
    stage_sources: dict[Cell, int] = {start: 0}
    for name in subtasks:
        region = target_region(scenario, name, radius)
        best: dict[Cell, int] = dict(stage_sources)
        parent: dict[Cell, Cell | None] = {c: None for c in stage_sources}
        heap = [(d, c) for c, d in stage_sources.items()]
        heapq.heapify(heap)
        while heap:
            d, cell = heapq.heappop(heap)
            if d > best[cell]:
                continue
            for nb in _neighbors(cell):
                if not scenario.is_free(nb):
                    continue
                nd = d + 1
                if nd < best.get(nb, 1 << 30):
                    best[nb] = nd
                    parent[nb] = cell
                    heapq.heappush(heap, (nd, nb))
        reached = {c: d for c, d in best.items() if c in region}
        if not reached:
            return None
        parents.append(parent)
        stage_sources = reached
    if not subtasks:
        return [start]
    # Walk back through the stages.
    end = min(stage_sources, key=lambda c: (stage_sources[c], c))
    path = [end]
    cell = end
    for k in range(len(subtasks) - 1, -1, -1):
        parent = parents[k]
        while parent.get(cell) is not None:
            cell = parent[cell]
            path.append(cell)
        # `cell` is now a source of stage k (a reached cell of stage k-1).
    path.reverse()
    return path


def shortest_visit_length(scenario: Scenario, radius: float = 1.0) -> float | None:
    path = shortest_visit_path(scenario, radius)
    if path is None:
        return None
    return (len(path) - 1) * scenario.cell_size


# -- scenario generation -------------------------------------------------

COLORS = ("black", "red", "blue", "green", "white", "grey", "yellow", "brown", "orange", "purple")
OBJECTS = (
    "swivel chair", "printer", "desk", "sofa", "fridge", "microwave", "plant",
    "bookshelf", "cabinet", "whiteboard", "lamp", "coffee machine", "bin", "armchair",
)


def instruction_for(targets: Sequence[str]) -> str:
    if len(targets) == 1:
        return f"Find the {targets[0]}."
    if len(targets) == 2:
        return f"First walk to the {targets[0]}, then find the {targets[1]}."
    middle = ", ".join(f"then go to the {t}" for t in targets[1:-1])
    return f"First walk to the {targets[0]}, {middle}, and finally find the {targets[-1]}."


def _key_points(scenario: Scenario, path: list[Cell], radius: float) -> tuple[dict, ...]:
    """One 'locate' point per sub-task plus a passage point on long legs."""
    points = []
    i = 0
    for k, name in enumerate(scenario.subtasks, start=1):
        region = target_region(scenario, name, radius)
        j = i
        while path[j] not in region:
            j += 1
        if j - i >= 4:
            c, r = path[(i + j) // 2]
            points.append({"condition": {"subtask": k}, "expected": {"visit": [r, c]},
                           "label": f"pass through the passage toward the {name}"})
        lm = scenario.landmark(name)
        c, r = min(lm.cells)
        points.append({"condition": {"subtask": k}, "expected": {"visit": [r, c]},
                       "label": f"locate the {name}"})
        i = j
    return tuple(points)


def generate_scenario(
    seed: int,
    grid_size: int | tuple[int, int] = (8, 8),
    landmark_count: int = 3,
    subtask_count: int = 2,
    *,
    obstacle_density: float = 0.15,
    glass_count: int = 0,
    cell_size: float = 1.0,
    budget_multiplier: float = 4.0,
    radius: float = 1.0,
    max_attempts: int = 200,
) -> Scenario:
    """Random scenario with a guaranteed in-order visiting walk."""
    w, h = (grid_size, grid_size) if isinstance(grid_size, int) else grid_size
    if w < 4 or h < 4:
        raise ScenarioInvalid("grid must be at least 4x4")
    if not 1 <= subtask_count <= landmark_count:
        raise ScenarioInvalid("need 1 <= subtask_count <= landmark_count")
    if landmark_count > min(len(COLORS), len(OBJECTS)):
        raise ScenarioInvalid("too many landmarks for the name vocabulary")

    rng = random.Random(seed)
    for _ in range(max_attempts):
        rows = [[FREE] * w for _ in range(h)]
        cells = [(c, r) for r in range(h) for c in range(w)]
        for c, r in cells:
            if rng.random() < obstacle_density:
                rows[r][c] = OBSTACLE
        free = [cell for cell in cells if rows[cell[1]][cell[0]] == FREE]
        for c, r in rng.sample(free, min(glass_count, len(free))):
            rows[r][c] = GLASS
        free = [cell for cell in cells if rows[cell[1]][cell[0]] == FREE]
        if len(free) < landmark_count * 2 + 1:
            continue
        names = [
            f"{color} {obj}"
            for color, obj in zip(rng.sample(COLORS, landmark_count), rng.sample(OBJECTS, landmark_count))
        ]
        rng.shuffle(free)
        taken: set[Cell] = set()
        landmarks = []
        for name in names:
            cell = next(c for c in free if c not in taken)
            group = [cell]
            extra = (cell[0] + 1, cell[1])
            if rng.random() < 0.3 and extra in free and extra not in taken:
                group.append(extra)
            taken.update(group)
            landmarks.append(Landmark(name, tuple(group)))
        start_cell = next((c for c in free if c not in taken), None)
        if start_cell is None:
            continue
        heading = rng.choice(HEADINGS)
        targets = rng.sample(names, subtask_count)
        grid = tuple("".join(row) for row in rows)
        start = Pose(start_cell[0] * cell_size, start_cell[1] * cell_size, heading)
        draft = Scenario(grid, cell_size, tuple(landmarks), start, instruction_for(targets), tuple(targets))
        if any(start_cell in target_region(draft, t, radius) for t in targets):
            continue
        path = shortest_visit_path(draft, radius)
        if path is None or len(path) < 2:
            continue
        l_star = (len(path) - 1) * cell_size
        budget = int(math.ceil(budget_multiplier * l_star / cell_size - 1e-9))
        return Scenario(
            grid, cell_size, tuple(landmarks), start, draft.instruction, tuple(targets),
            _key_points(draft, path, radius), budget,
        )
    raise Unsatisfiable(f"no valid scenario after {max_attempts} attempts (seed={seed})")


def render_ascii(scenario: Scenario, pose: Pose | None = None) -> str:
    """Grid picture with +y up; landmarks as letters, agent as an arrow."""
    glyph = {0: ">", 90: "^", 180: "<", 270: "v"}
    letters = {}
    for i, lm in enumerate(scenario.landmarks):
        for cell in lm.cells:
            letters[cell] = chr(ord("A") + i % 26)
    agent = pose.cell(scenario.cell_size) if pose else None
    lines = []
    for r in range(scenario.height - 1, -1, -1):
        row = []
        for c in range(scenario.width):
            if agent == (c, r):
                row.append(glyph[pose.heading])
            elif (c, r) in letters:
                row.append(letters[(c, r)])
            else:
                row.append(scenario.grid[r][c])
        lines.append("".join(row))
    return "\n".join(lines)
