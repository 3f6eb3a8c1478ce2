"""Sub-agent role contracts and their deterministic scripted implementations.

Three model-facing roles are driven by the master:

* planner  -- ``plan(instruction)`` and ``verify(...)`` (verification mode)
* observer -- ``observe(views, subtask)``
* controller -- ``decide(subtask, env, world_map, history)``

Any backend that satisfies these method signatures can be plugged in; the
scripted classes below are the reference (oracle) implementations and the
remote classes in :mod:`conav.llm` speak the same contract over HTTP.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

from .errors import Deadlock, PlanEmpty
from .mapper import DIRECTIONS, WorldMap
from .simworld import Action, PerceptTuple, Pose, Scenario, bresenham, heading_vector

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric tokens."""
    return _TOKEN_RE.findall(text.lower())


def token_overlap(a: str, b: str) -> bool:
    return bool(set(tokenize(a)) & set(tokenize(b)))


# -- data types ------------------------------------------------------------

PENDING, ACTIVE, DONE = "Pending", "Active", "Done"


@dataclass(frozen=True)
class SubTask:
    index: int
    description: str
    target: str
    status: str = PENDING

    def to_dict(self) -> dict:
        return {"index": self.index, "description": self.description,
                "target": self.target, "status": self.status}


@dataclass
class SubTaskPlan:
    instruction: str
    subtasks: list[SubTask]

    def __post_init__(self):
        for i, st in enumerate(self.subtasks, start=1):
            if st.index != i:
                raise ValueError("sub-task indices must be contiguous from 1")
        if self.subtasks and all(st.status == PENDING for st in self.subtasks):
            self.subtasks[0] = replace(self.subtasks[0], status=ACTIVE)

    @classmethod
    def from_targets(cls, instruction: str, targets: Sequence[str]) -> "SubTaskPlan":
        return cls(instruction, [
            SubTask(i, f"reach the {t}", t) for i, t in enumerate(targets, start=1)
        ])

    def __len__(self) -> int:
        return len(self.subtasks)

    @property
    def active(self) -> SubTask | None:
        return next((st for st in self.subtasks if st.status == ACTIVE), None)

    @property
    def complete(self) -> bool:
        return bool(self.subtasks) and all(st.status == DONE for st in self.subtasks)

    def advance(self) -> SubTask | None:
        """Mark the active sub-task Done and activate the next one."""
        cur = self.active
        if cur is None:
            return None
        i = cur.index - 1
        self.subtasks[i] = replace(cur, status=DONE)
        if i + 1 < len(self.subtasks):
            self.subtasks[i + 1] = replace(self.subtasks[i + 1], status=ACTIVE)
            return self.subtasks[i + 1]
        return None

    def to_dict(self) -> dict:
        return {"instruction": self.instruction, "subtasks": [st.to_dict() for st in self.subtasks]}

    @classmethod
    def from_dict(cls, d: dict) -> "SubTaskPlan":
        return cls(d["instruction"], [
            SubTask(int(st["index"]), st["description"], st["target"], st.get("status", PENDING))
            for st in d["subtasks"]
        ])


@dataclass(frozen=True)
class SalientEntry:
    name: str
    kind: str  # "landmark" | "obstacle"
    bearing: float
    distance: float
    task_relevant: bool
    view: str

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class EnvDescription:
    summaries: dict[str, str]
    salient: tuple[SalientEntry, ...]
    traversable_dirs: tuple[str, ...]
    raw_views: tuple[PerceptTuple, ...]

    def free_range(self, direction: str = "Front") -> float:
        return self.raw_views[DIRECTIONS.index(direction)].traversability.free_range

    def scene_tokens(self, target: str = "", view: str | None = None) -> list[str]:
        """Sub-task target plus salient names (optionally of one view only), as tokens."""
        words = tokenize(target)
        for e in self.salient:
            if view is None or e.view == view:
                words.extend(tokenize(e.name))
        return words

    def digest(self) -> dict:
        return {
            "salient": sorted({e.name for e in self.salient}),
            "front": sorted({e.name for e in self.salient if e.view == "Front"}),
            "relevant": sorted({e.name for e in self.salient if e.task_relevant}),
            "traversable": list(self.traversable_dirs),
        }

    @classmethod
    def from_dict(cls, d: dict, views: Sequence[PerceptTuple] = ()) -> "EnvDescription":
        return cls(
            dict(d["summaries"]),
            tuple(SalientEntry(**e) for e in d["salient"]),
            tuple(d["traversable_dirs"]),
            tuple(views),
        )

    def to_dict(self) -> dict:
        return {
            "summaries": dict(self.summaries),
            "salient": [e.to_dict() for e in self.salient],
            "traversable_dirs": list(self.traversable_dirs),
        }


@dataclass(frozen=True)
class Decision:
    action: Action
    justification: str = ""
    candidate_refs: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"action": self.action.value, "justification": self.justification,
                "candidate_refs": list(self.candidate_refs)}


@dataclass(frozen=True)
class Verification:
    done: bool
    progress: float


# -- role protocols ----------------------------------------------------------

class Planner(Protocol):
    def plan(self, instruction: str) -> SubTaskPlan: ...

    def verify(self, subtask: SubTask, env: EnvDescription | None, history: Sequence,
               pose: Pose, tau: float) -> Verification: ...


class Observer(Protocol):
    def observe(self, views: Sequence[PerceptTuple], subtask: SubTask) -> EnvDescription: ...


class Controller(Protocol):
    def decide(self, subtask: SubTask | None, env: EnvDescription, world_map: WorldMap | None,
               history: Sequence) -> Decision: ...


@dataclass
class Team:
    planner: Planner
    observer: Observer
    controller: Controller

    def begin_episode(self, hook=None) -> None:
        for agent in (self.planner, self.observer, self.controller):
            start = getattr(agent, "begin_episode", None)
            if start is not None:
                start(hook)


# -- helpers -----------------------------------------------------------------

def bearing_action(bearing: float) -> Action:
    """Quadrant rule: which primitive turns the agent toward a bearing."""
    if -45.0 < bearing <= 45.0:
        return Action.MOVE_FORWARD
    if 45.0 < bearing <= 135.0:
        return Action.TURN_LEFT
    if -135.0 < bearing <= -45.0:
        return Action.TURN_RIGHT
    return Action.TURN_RIGHT  # about-face, first of two turns


_DIR_ACTION = {
    "Front": Action.MOVE_FORWARD,
    "Left": Action.TURN_LEFT,
    "Right": Action.TURN_RIGHT,
    "Back": Action.TURN_RIGHT,
}


def direction_of(pose: Pose, cell: tuple[int, int], cell_size: float) -> str | None:
    """Relative direction of a 4-neighbour cell, or None if not adjacent."""
    here = pose.cell(cell_size)
    for i, name in enumerate(DIRECTIONS):
        dx, dy = heading_vector((pose.heading - 90 * i) % 360)
        if (here[0] + dx, here[1] + dy) == cell:
            return name
    return None


def _find_phrases(text: str, phrases: Sequence[str]) -> list[tuple[int, str]]:
    """Non-overlapping, longest-first, word-bounded phrase occurrences."""
    low = text.lower()
    taken: list[tuple[int, int]] = []
    hits = []
    for phrase in sorted(phrases, key=lambda p: (-len(p), p)):
        pat = re.compile(r"(?<![a-z0-9])" + re.escape(phrase.lower()) + r"(?![a-z0-9])")
        for m in pat.finditer(low):
            if any(m.start() < e and s < m.end() for s, e in taken):
                continue
            taken.append((m.start(), m.end()))
            hits.append((m.start(), phrase))
    hits.sort()
    return hits


# -- scripted planner ----------------------------------------------------------

class ScriptedPlanner:
    """Landmark-matching decomposer plus distance-based oracle verifier.

    The verifier is given the landmark table (never the occupancy grid) and
    scores progress as ``1 - dist / d_norm`` clamped to [0, 1].
    """

    def __init__(self, landmarks: dict[str, Sequence[tuple[float, float]]], d_norm: float):
        if d_norm <= 0:
            raise ValueError("d_norm must be positive")
        self.landmarks = {name: [tuple(p) for p in pts] for name, pts in landmarks.items()}
        self.d_norm = d_norm

    @classmethod
    def for_scenario(cls, scenario: Scenario) -> "ScriptedPlanner":
        table = {lm.name: [scenario.cell_center(c) for c in lm.cells] for lm in scenario.landmarks}
        return cls(table, scenario.diameter)

    def plan(self, instruction: str) -> SubTaskPlan:
        if not instruction.strip():
            raise PlanEmpty("empty instruction")
        seen: list[str] = []
        for _, name in _find_phrases(instruction, list(self.landmarks)):
            if name not in seen:
                seen.append(name)
        if not seen:
            raise PlanEmpty("no known landmark mentioned in the instruction")
        return SubTaskPlan.from_targets(instruction, seen)

    def resolve(self, target: str) -> list[str]:
        """Landmarks a sub-task target refers to: exact name, else names contained in it."""
        key = " ".join(tokenize(target))
        exact = [n for n in self.landmarks if " ".join(tokenize(n)) == key]
        if exact:
            return exact
        words = set(tokenize(target))
        return sorted(n for n in self.landmarks if set(tokenize(n)) <= words)

    def distance(self, target: str, pose: Pose) -> float:
        pts = [p for n in self.resolve(target) for p in self.landmarks[n]]
        if not pts:
            return math.inf
        return min(math.hypot(pose.x - x, pose.y - y) for x, y in pts)

    def progress(self, target: str, pose: Pose) -> float:
        d = self.distance(target, pose)
        return min(1.0, max(0.0, 1.0 - d / self.d_norm))

    def verify(self, subtask, env, history, pose, tau):
        phi = self.progress(subtask.target, pose)
        return Verification(phi >= tau, phi)


# -- scripted observer ------------------------------------------------------------

class ScriptedObserver:
    """Token-overlap salience, traversability from free ranges, terse summaries."""

    def __init__(self, delta: float = 1.0):
        self.delta = delta

    def observe(self, views, subtask) -> EnvDescription:
        target = subtask.target if subtask is not None else ""
        salient = []
        summaries = {}
        for view in views:
            entries = [
                SalientEntry(lm.name, "landmark", lm.bearing, lm.distance,
                             token_overlap(lm.name, target), view.view)
                for lm in view.landmarks
            ]
            if view.obstacles:
                ob = view.obstacles[0]
                entries.append(SalientEntry(ob.category, "obstacle", ob.bearing, ob.distance,
                                            token_overlap(ob.category, target), view.view))
            entries.sort(key=lambda e: (e.distance, e.name))
            salient.extend(entries)
            if entries:
                summaries[view.view] = "; ".join(f"{e.name} at {e.distance:.1f} m" for e in entries[:3])
            else:
                summaries[view.view] = "open space"
        traversable = tuple(
            v.view for v in views
            if v.traversability.walkable and v.traversability.free_range >= self.delta - 1e-9
        )
        return EnvDescription(summaries, tuple(salient), traversable, tuple(views))


def raw_description(views: Sequence[PerceptTuple], delta: float = 1.0) -> EnvDescription:
    """Observer bypass: percepts passed through with no salience filtering."""
    salient = tuple(
        SalientEntry(lm.name, "landmark", lm.bearing, lm.distance, False, v.view)
        for v in views for lm in v.landmarks
    )
    traversable = tuple(
        v.view for v in views
        if v.traversability.walkable and v.traversability.free_range >= delta - 1e-9
    )
    return EnvDescription({v.view: v.context for v in views}, salient, traversable, tuple(views))


# -- scripted controller -------------------------------------------------------------

FULL, NO_TOPO, NO_GEO = "full", "no_topo", "no_geo"


@dataclass
class _EpisodeMemory:
    sightings: dict[str, set] = field(default_factory=dict)
    blocked: set = field(default_factory=set)
    seen_t: set = field(default_factory=set)
    readings: dict[int, list] = field(default_factory=dict)  # sub-task index -> [(x, y, dist)]
    free: set = field(default_factory=set)
    obstacles: set = field(default_factory=set)
    looked_from: set = field(default_factory=set)
    last_mismatch: bool = False


class ScriptedController:
    """Goal-directed frontier exploration over the topological map.

    With a sighted target the controller heads for the reachable node that
    minimises hops-so-far plus Manhattan distance to the target; otherwise it
    goes to the nearest unvisited node. Cells learnt to be blocked from
    reflection events in the history are excluded from planning.

    Before the target is sighted, the verifier's progress feedback stored in
    the history (``outcome["progress"]``) is turned into range readings
    ``(1 - progress) * d_norm``; cells consistent with every reading become
    provisional goals.

    ``mode`` selects the ablated variants: ``no_topo`` drops graph planning
    for a greedy reactive rule, ``no_geo`` additionally loses pose and
    sighting memory and reacts to the current description only.
    """

    def __init__(self, delta: float = 1.0, mode: str = FULL, d_norm: float | None = None,
                 extent: tuple[int, int] | None = None, view_range: int = 5):
        if mode not in (FULL, NO_TOPO, NO_GEO):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.delta = delta
        self.mode = mode
        self.d_norm = d_norm
        self.extent = extent  # arena size in cells (cols, rows); occupancy stays unknown
        self.view_range = view_range
        self._sighted = False
        self._mem = _EpisodeMemory()

    def begin_episode(self, hook=None) -> None:
        self._mem = _EpisodeMemory()

    # -- context upkeep --------------------------------------------------
    def _digest_history(self, history: Sequence) -> None:
        mem = self._mem
        mem.last_mismatch = False
        for rec in history:
            if rec.t in mem.seen_t:
                continue
            mem.seen_t.add(rec.t)
            for ev in rec.reflection_events:
                if ev.get("flag") == "mismatch" and ev.get("action") == Action.MOVE_FORWARD.value:
                    dx, dy = heading_vector(rec.pose.heading)
                    c, r = rec.pose.cell(self.delta)
                    mem.blocked.add((c + dx, r + dy))
            progress = rec.outcome.get("progress")
            if self.d_norm and progress is not None and progress > 0:
                after = rec.outcome["pose"]
                mem.readings.setdefault(rec.subtask_index, []).append(
                    (after["x"], after["y"], (1.0 - progress) * self.d_norm))
        if history and any(ev.get("flag") == "mismatch" for ev in history[-1].reflection_events):
            mem.last_mismatch = True

    def _locate(self, pose: Pose, bearing: float, distance: float) -> tuple[int, int]:
        a = math.radians(pose.heading + bearing)
        return (int(round((pose.x + distance * math.cos(a)) / self.delta)),
                int(round((pose.y + distance * math.sin(a)) / self.delta)))

    def _goal_cells(self, subtask: SubTask) -> set:
        target = subtask.target
        key = " ".join(tokenize(target))
        sightings = self._mem.sightings
        goal = {c for n, cells in sightings.items() if " ".join(tokenize(n)) == key for c in cells}
        if not goal:
            words = set(tokenize(target))
            goal = {c for n, cells in sightings.items() if set(tokenize(n)) <= words for c in cells}
        self._sighted = bool(goal)
        return goal or self._ranged_cells(subtask.index)

    def _h(self, cell, goal: set) -> float:
        """Distance-to-go: nearest sighted cell, or mean over provisional cells."""
        dists = [abs(cell[0] - g[0]) + abs(cell[1] - g[1]) for g in goal]
        return min(dists) if self._sighted else sum(dists) / len(dists)

    def _ranged_cells(self, index: int) -> set:
        """Cells at the latest range reading that no earlier reading rules out."""
        readings = self._mem.readings.get(index)
        if not readings:
            return set()
        cs, tol = self.delta, 1e-6
        x0, y0, d0 = readings[-1]
        reach = int(math.ceil(d0 / cs)) + 1
        c0, r0 = int(round(x0 / cs)), int(round(y0 / cs))
        out = set()
        for dc in range(-reach, reach + 1):
            for dr in range(-reach, reach + 1):
                c, r = c0 + dc, r0 + dr
                if self.extent and not (0 <= c < self.extent[0] and 0 <= r < self.extent[1]):
                    continue
                if abs(math.hypot(c * cs - x0, r * cs - y0) - d0) > tol:
                    continue
                if all(math.hypot(c * cs - x, r * cs - y) >= d - tol for x, y, d in readings):
                    out.add((c, r))
        return out

    # -- policy ------------------------------------------------------------
    def decide(self, subtask, env, world_map, history=()) -> Decision:
        self._digest_history(history)
        if subtask is None:
            return Decision(Action.STOP, "all sub-tasks verified; stopping")
        if not env.traversable_dirs:
            raise Deadlock("no traversable direction")
        pose = world_map.pose if world_map is not None and world_map.geometric else None
        if self.mode == NO_GEO or pose is None:
            return self._react(subtask, env)
        for e in env.salient:
            if e.kind == "landmark":
                self._mem.sightings.setdefault(e.name, set()).add(self._locate(pose, e.bearing, e.distance))
        goal = self._goal_cells(subtask)
        if self.mode == FULL and world_map.topological:
            self._update_belief(env, pose)
            decision = self._plan(subtask, env, world_map, pose, goal)
            if decision is not None:
                return decision
        return self._greedy(subtask, env, pose, goal)

    def _open(self, env: EnvDescription, pose: Pose | None) -> list[str]:
        dirs = []
        for d in DIRECTIONS:
            if d not in env.traversable_dirs:
                continue
            if pose is not None:
                i = DIRECTIONS.index(d)
                dx, dy = heading_vector((pose.heading - 90 * i) % 360)
                c, r = pose.cell(self.delta)
                if (c + dx, r + dy) in self._mem.blocked:
                    continue
            dirs.append(d)
        return dirs

    def _explore(self, env: EnvDescription, pose: Pose | None, why: str) -> Decision:
        dirs = self._open(env, pose)
        if pose is None and self._mem.last_mismatch and "Front" in dirs:
            dirs.remove("Front")
        for d in ("Front", "Right", "Left", "Back"):
            if d in dirs:
                return Decision(_DIR_ACTION[d], f"{why}; {d.lower()} is open")
        return Decision(Action.TURN_RIGHT, f"{why}; every open direction is known blocked")

    def _react(self, subtask: SubTask, env: EnvDescription) -> Decision:
        relevant = [e for e in env.salient if e.task_relevant and e.kind == "landmark"]
        if relevant:
            e = min(relevant, key=lambda e: (e.distance, e.name))
            act = bearing_action(e.bearing)
            if act is not Action.MOVE_FORWARD:
                return Decision(act, f"turning toward {e.name} at bearing {e.bearing:g}")
            if "Front" in env.traversable_dirs and not self._mem.last_mismatch:
                return Decision(act, f"{e.name} ahead at {e.distance:.1f} m")
            return self._explore(env, None, f"{e.name} ahead but front is blocked")
        return self._explore(env, None, f"searching for {subtask.target}")

    def _greedy(self, subtask, env, pose: Pose, goal: set) -> Decision:
        if not goal:
            return self._explore(env, pose, f"searching for {subtask.target}")
        here = pose.cell(self.delta)
        best = None
        for rank, d in enumerate(("Front", "Left", "Right", "Back")):
            if d not in self._open(env, pose):
                continue
            i = DIRECTIONS.index(d)
            dx, dy = heading_vector((pose.heading - 90 * i) % 360)
            nxt = (here[0] + dx, here[1] + dy)
            h = self._h(nxt, goal)
            if best is None or (h, rank) < best[0]:
                best = ((h, rank), d)
        if best is None:
            return self._explore(env, pose, f"heading for {subtask.target}")
        d = best[1]
        return Decision(_DIR_ACTION[d], f"greedy step {d.lower()} toward {subtask.target}")

    def _update_belief(self, env: EnvDescription, pose: Pose) -> None:
        """Fold one set of percepts into the occupancy belief (cells seen free or occupied)."""
        mem = self._mem
        here = pose.cell(self.delta)
        if here in mem.looked_from:
            return
        mem.looked_from.add(here)
        seen_obstacles = set()
        for view in env.raw_views:
            for ob in view.obstacles:
                seen_obstacles.add(self._locate(pose, ob.bearing, ob.distance))
        mem.obstacles |= seen_obstacles
        reach = self.view_range
        for dc in range(-reach, reach + 1):
            for dr in range(-reach, reach + 1):
                cell = (here[0] + dc, here[1] + dr)
                if math.hypot(dc, dr) > reach + 1e-9 or not self._inside(cell):
                    continue
                if cell in seen_obstacles or cell in mem.free:
                    continue
                if not any(c in seen_obstacles for c in bresenham(here, cell)[1:-1]):
                    mem.free.add(cell)
        mem.free.add(here)

    def _inside(self, cell) -> bool:
        if self.extent is None:
            return True
        return 0 <= cell[0] < self.extent[0] and 0 <= cell[1] < self.extent[1]

    def _passable(self, cell) -> bool:
        mem = self._mem
        return self._inside(cell) and cell not in mem.obstacles and cell not in mem.blocked

    def _plan(self, subtask, env, world_map: WorldMap, pose: Pose, goal: set) -> Decision | None:
        """Cheapest action sequence (moves and turns both cost one step) to the goal region.

        Known map edges are trusted, cells never observed are assumed open.
        Without a goal the nearest unobserved cell is the target.
        """
        mem = self._mem
        if goal:
            region = set()
            for g in goal:
                region.add(g)
                region.update((g[0] + dx, g[1] + dy) for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)))
            is_goal = region.__contains__
            why = "toward " + subtask.target
        else:
            known = mem.free | mem.obstacles
            is_goal = lambda c: c not in known
            why = "exploring for " + subtask.target
        bound = None
        if self.extent is None:
            cells = mem.free | mem.obstacles
            xs = [c for c, _ in cells]
            ys = [r for _, r in cells]
            bound = (min(xs) - 3, max(xs) + 3, min(ys) - 3, max(ys) + 3)

        start = (pose.cell(self.delta), pose.heading)
        first = {start: None}
        best = {start: 0}
        heap = [(0, 0, start)]
        order = 0
        while heap:
            cost, _, state = heapq.heappop(heap)
            if cost > best[state]:
                continue
            cell, heading = state
            if is_goal(cell) and state != start:
                act = first[state]
                if act is Action.MOVE_FORWARD and "Front" not in env.traversable_dirs:
                    return None
                refs = tuple(sorted(world_map.topo.adjacency.get(world_map.node_at(pose) or "", [])))
                return Decision(act, f"{why}; {cost} steps to {cell}", refs)
            dx, dy = heading_vector(heading)
            moves = [
                (Action.MOVE_FORWARD, ((cell[0] + dx, cell[1] + dy), heading)),
                (Action.TURN_LEFT, (cell, (heading + 90) % 360)),
                (Action.TURN_RIGHT, (cell, (heading - 90) % 360)),
            ]
            for act, nxt in moves:
                ncell = nxt[0]
                if act is Action.MOVE_FORWARD:
                    if not self._passable(ncell):
                        continue
                    if bound and not (bound[0] <= ncell[0] <= bound[1] and bound[2] <= ncell[1] <= bound[3]):
                        continue
                nc = cost + 1
                if nc < best.get(nxt, 1 << 30):
                    best[nxt] = nc
                    first[nxt] = act if state == start else first[state]
                    order += 1
                    heapq.heappush(heap, (nc, order, nxt))
        return None
