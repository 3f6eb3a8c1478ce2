"""Internal map of the control-execution agent.

A geometric record (trajectory plus a registry of waypoint coordinates)
coupled with a topological graph over the registered waypoints.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .errors import SelfLoop, Unreachable
from .simworld import Pose

NODE_TOLERANCE = 1e-6
DIRECTIONS = ("Front", "Right", "Back", "Left")

Point = tuple[float, float]


def _snap(v: float) -> float:
    r = round(v)
    if abs(v - r) < 1e-9:
        return float(r)
    return round(v, 9) + 0.0


def candidates(pose: Pose, delta: float) -> list[Point]:
    """Quadrature waypoints [Front, Right, Back, Left] at distance `delta`."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    out = []
    for i in range(4):
        a = math.radians(pose.heading - 90 * i)
        out.append((_snap(pose.x + delta * math.cos(a)), _snap(pose.y + delta * math.sin(a))))
    return out


@dataclass
class GeometricMap:
    trajectory: list[Pose] = field(default_factory=list)
    nodes: dict[str, Point] = field(default_factory=dict)
    _counter: int = 0

    @property
    def origin(self) -> Point | None:
        if not self.trajectory:
            return None
        return self.trajectory[0].x, self.trajectory[0].y

    def find(self, xy: Point, tol: float = NODE_TOLERANCE) -> str | None:
        for nid, (x, y) in self.nodes.items():
            if abs(x - xy[0]) <= tol and abs(y - xy[1]) <= tol:
                return nid
        return None

    def resolve(self, xy: Point) -> str:
        """Existing node id at `xy`, or a freshly minted one."""
        nid = self.find(xy)
        if nid is None:
            self._counter += 1
            nid = f"v{self._counter}"
            self.nodes[nid] = (float(xy[0]), float(xy[1]))
        return nid


class TopoGraph:
    """Undirected graph with insertion-ordered adjacency lists."""

    def __init__(self):
        self.nodes: set[str] = set()
        self.edges: set[frozenset[str]] = set()
        self.adjacency: dict[str, list[str]] = {}

    def add_node(self, v: str) -> None:
        if v not in self.nodes:
            self.nodes.add(v)
            self.adjacency[v] = []

    def connect(self, v_c: str, v_i: str) -> "TopoGraph":
        if v_c == v_i:
            raise SelfLoop(f"cannot connect {v_c} to itself")
        if v_c not in self.nodes:
            raise KeyError(f"unknown node {v_c}")
        self.add_node(v_i)
        edge = frozenset((v_c, v_i))
        if edge not in self.edges:
            self.edges.add(edge)
            self.adjacency[v_c].append(v_i)
            self.adjacency[v_i].append(v_c)
        return self

    def hop_distances(self, source: str, excluded: frozenset[str] = frozenset()) -> dict[str, int]:
        dist = {source: 0}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for w in self.adjacency[u]:
                if w not in dist and w not in excluded:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist

    def shortest_path(self, start: str, goal: str, excluded: frozenset[str] = frozenset()) -> list[str]:
        """Minimum-hop path; ties resolved toward the lexicographically smallest id sequence."""
        for v in (start, goal):
            if v not in self.nodes:
                raise KeyError(f"unknown node {v}")
        to_goal = self.hop_distances(goal, excluded)
        if start not in to_goal:
            raise Unreachable(f"no path from {start} to {goal}")
        path = [start]
        while path[-1] != goal:
            here = path[-1]
            path.append(min(w for w in self.adjacency[here] if to_goal.get(w) == to_goal[here] - 1))
        return path

    def copy(self) -> "TopoGraph":
        other = TopoGraph()
        other.nodes = set(self.nodes)
        other.edges = set(self.edges)
        other.adjacency = {k: list(v) for k, v in self.adjacency.items()}
        return other


class WorldMap:
    """Coupled geometric map and topological graph.

    Either half can be disabled for ablations: without the geometric map
    nothing is recorded; without the topological map nodes are still
    registered but no edges are kept.
    """

    def __init__(self, delta: float = 1.0, geometric: bool = True, topological: bool = True):
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.delta = delta
        self.geometric = geometric
        self.topological = topological and geometric
        self.geo = GeometricMap()
        self.topo = TopoGraph()
        self.visited: set[str] = set()

    @property
    def pose(self) -> Pose | None:
        return self.geo.trajectory[-1] if self.geo.trajectory else None

    def node_at(self, pose: Pose) -> str | None:
        return self.geo.find((pose.x, pose.y))

    def record_pose(self, pose: Pose) -> str | None:
        if not self.geometric:
            return None
        self.geo.trajectory.append(pose)
        nid = self.geo.resolve((pose.x, pose.y))
        self.visited.add(nid)
        if self.topological:
            self.topo.add_node(nid)
        return nid

    def register_candidates(self, pose: Pose, delta: float | None = None) -> list[str]:
        """Node ids for the four quadrature candidates, minting new ones as needed."""
        return [self.geo.resolve(xy) for xy in candidates(pose, delta or self.delta)]

    def connect(self, v_c: str, v_i: str) -> None:
        if self.topological:
            self.topo.add_node(v_c)
            self.topo.connect(v_c, v_i)

    def observe(self, pose: Pose, walkable: list[bool]) -> list[str]:
        """Register candidates and link the ones the percepts confirm walkable."""
        if not self.geometric:
            return []
        here = self.geo.resolve((pose.x, pose.y))
        ids = self.register_candidates(pose)
        for nid, ok in zip(ids, walkable):
            if ok:
                self.connect(here, nid)
        return ids

    def after_step(self, before: Pose, after: Pose) -> None:
        """Append the post-step pose; a change of position adds the traversed edge."""
        if not self.geometric:
            return
        a = self.geo.resolve((before.x, before.y))
        b = self.record_pose(after)
        if b is not None and a != b:
            self.connect(a, b)

    def to_dict(self) -> dict:
        return {
            "trajectory": [p.to_dict() for p in self.geo.trajectory],
            "nodes": {k: list(v) for k, v in sorted(self.geo.nodes.items(), key=lambda kv: int(kv[0][1:]))},
            "edges": sorted(sorted(e) for e in self.topo.edges),
        }
