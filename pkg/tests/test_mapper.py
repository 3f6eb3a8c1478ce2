import itertools
import math
from collections import deque

import pytest
from hypothesis import given, settings, strategies as st

from conav.errors import SelfLoop, Unreachable
from conav.mapper import TopoGraph, WorldMap, candidates
from conav.simworld import Pose


def test_candidates_worked_example():
    assert candidates(Pose(2, 1, 90), 1) == [(2, 2), (3, 1), (2, 0), (1, 1)]


def test_candidates_identity_heading():
    assert candidates(Pose(0, 0, 0), 1) == [(1, 0), (0, -1), (-1, 0), (0, 1)]


def test_candidates_heading_180_delta_2():
    # independent evaluation of x + d cos(h - 90 i), y + d sin(h - 90 i)
    want = []
    for i in range(4):
        a = math.radians(180 - 90 * i)
        want.append((round(5 + 2 * math.cos(a)), round(5 + 2 * math.sin(a))))
    assert want == [(3, 5), (5, 7), (7, 5), (5, 3)]
    assert candidates(Pose(5, 5, 180), 2) == want


@given(st.integers(-20, 20), st.integers(-20, 20), st.sampled_from([0, 90, 180, 270]),
       st.integers(1, 4))
def test_candidates_are_exact_axis_neighbours(x, y, h, d):
    pts = candidates(Pose(x, y, h), d)
    assert sorted(pts) == sorted([(x + d, y), (x - d, y), (x, y + d), (x, y - d)])
    assert all(float(c).is_integer() for p in pts for c in p)


def test_candidates_reject_bad_delta():
    with pytest.raises(ValueError):
        candidates(Pose(0, 0, 0), 0)


def test_register_candidates_creates_then_reuses():
    m = WorldMap()
    ids = m.register_candidates(Pose(2, 1, 90), 1)
    assert ids == ["v1", "v2", "v3", "v4"]
    assert [m.geo.nodes[i] for i in ids] == [(2, 2), (3, 1), (2, 0), (1, 1)]
    assert m.register_candidates(Pose(2, 1, 90), 1) == ids
    assert len(m.geo.nodes) == 4 and not m.topo.edges


def test_shared_candidate_coordinates_share_ids():
    m = WorldMap()
    poses = [Pose(0, 0, 0), Pose(2, 0, 90)]
    for p in poses:
        m.register_candidates(p, 1)
    coords = {xy for p in poses for xy in candidates(p, 1)}
    assert len(m.geo.nodes) == len(coords) == 7


def test_connect_first_edge_and_idempotence():
    g = TopoGraph()
    g.add_node("A")
    g.connect("A", "B")
    snapshot = (set(g.nodes), set(g.edges), {k: list(v) for k, v in g.adjacency.items()})
    assert g.nodes == {"A", "B"} and g.adjacency["A"] == ["B"]
    g.connect("A", "B")
    assert (g.nodes, g.edges, g.adjacency) == snapshot


def test_chain_adjacency():
    g = TopoGraph()
    g.add_node("A")
    g.connect("A", "B").connect("B", "C")
    assert g.adjacency["B"] == ["A", "C"]


def test_self_loop_rejected():
    g = TopoGraph()
    g.add_node("A")
    with pytest.raises(SelfLoop):
        g.connect("A", "A")


def test_shortest_path_examples():
    g = TopoGraph()
    g.add_node("A")
    g.connect("A", "B").connect("B", "C")
    assert g.shortest_path("A", "C") == ["A", "B", "C"]
    assert g.shortest_path("A", "A") == ["A"]
    d = TopoGraph()
    d.add_node("A")
    d.connect("A", "C").connect("A", "B").connect("B", "D").connect("C", "D")
    assert d.shortest_path("A", "D") == ["A", "B", "D"]


def test_unreachable():
    g = TopoGraph()
    g.add_node("A")
    g.add_node("Z")
    with pytest.raises(Unreachable):
        g.shortest_path("A", "Z")


def _all_shortest(adj, s, t):
    """Oracle: enumerate every minimum-hop path by layered BFS."""
    dist = {s: 0}
    q = deque([s])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    if t not in dist:
        return []
    paths = [[s]]
    for _ in range(dist[t]):
        paths = [p + [w] for p in paths for w in adj[p[-1]] if dist.get(w) == len(p)]
    return [p for p in paths if p[-1] == t]


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 50), st.data())
def test_shortest_path_matches_bfs_oracle(n, data):
    ids = [f"n{i:02d}" for i in range(n)]
    pairs = list(itertools.combinations(ids, 2))
    edges = data.draw(st.lists(st.sampled_from(pairs), max_size=3 * n, unique=True))
    g = TopoGraph()
    for v in ids:
        g.add_node(v)
    for a, b in edges:
        g.connect(a, b)
    s, t = data.draw(st.sampled_from(ids)), data.draw(st.sampled_from(ids))
    adj = {v: sorted(g.adjacency[v]) for v in ids}
    best = _all_shortest(adj, s, t)
    if not best:
        with pytest.raises(Unreachable):
            g.shortest_path(s, t)
        return
    path = g.shortest_path(s, t)
    assert path == min(best)
    assert all(frozenset(e) in g.edges for e in zip(path, path[1:]))
    # adjacency is exactly the incidence view of the edge set
    for v in ids:
        assert sorted(g.adjacency[v]) == sorted(w for e in g.edges if v in e for w in e if w != v)


def test_world_map_growth_and_consistency():
    m = WorldMap()
    p0 = Pose(0, 0, 0)
    m.record_pose(p0)
    m.observe(p0, [True, False, False, True])
    before = (len(m.topo.nodes), len(m.topo.edges))
    m.after_step(p0, Pose(1, 0, 0))
    assert len(m.topo.nodes) >= before[0] and len(m.topo.edges) >= before[1]
    assert m.geo.origin == (0, 0)
    assert all(v in m.geo.nodes for v in m.topo.nodes)


def test_no_topo_map_keeps_nodes_but_no_edges():
    m = WorldMap(topological=False)
    p0 = Pose(0, 0, 0)
    m.record_pose(p0)
    m.observe(p0, [True] * 4)
    assert len(m.geo.nodes) == 5 and not m.topo.edges


def test_map_snapshot_shape():
    m = WorldMap()
    m.record_pose(Pose(0, 0, 0))
    m.observe(Pose(0, 0, 0), [True, False, False, False])
    snap = m.to_dict()
    assert set(snap) == {"trajectory", "nodes", "edges"}
    assert snap["edges"] == [["v1", "v2"]]
