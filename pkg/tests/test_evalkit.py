import math

import pytest
from hypothesis import given, settings, strategies as st

from conav.agents import Decision, Team
from conav.errors import EmptyInput
from conav.evalkit import (
    COUNTERS, aggregate, glass_corridor_suite, oracle_suite, reflection_metrics, revisit_suite, run_bench,
    score_episode, spl,
)
from conav.orchestrator import DONE, EpisodeConfig, run_episode, scripted_team
from conav.simworld import Action, Outcome, World, generate_scenario, shortest_visit_length

from conftest import make_scenario


def spl_oracle(rows):
    return sum(s * ls / max(l, ls) for s, l, ls in rows) / len(rows)


# -- spl ------------------------------------------------------------------------

def test_spl_examples():
    assert spl([(1, 10.0, 8.0), (0, None, None)]) == pytest.approx(0.4, abs=1e-12)
    assert spl([(1, 3.0, 3.0), (1, 7.0, 7.0)]) == 1.0
    assert spl([{"S": 1, "L": 5.0, "L_star": 8.0}]) == 1.0


def test_spl_empty():
    with pytest.raises(EmptyInput):
        spl([])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 100), st.floats(0.1, 100)), min_size=1, max_size=30))
def test_spl_matches_formula(rows):
    got = spl(rows)
    assert got == pytest.approx(spl_oracle(rows), abs=1e-12)
    assert 0.0 <= got <= sum(s for s, _, _ in rows) / len(rows) + 1e-12


# -- reflection metrics ----------------------------------------------------------

def counts(**kw):
    c = dict.fromkeys(COUNTERS, 0)
    c.update(kw)
    return {"reflect_counts": c}


def test_reflection_metrics_arithmetic():
    m = reflection_metrics([counts(checks=60, flagged=4, confirmed=4), counts(checks=40, flagged=6, confirmed=5)])
    assert m["EDR"] == pytest.approx(10.0) and m["RA"] == pytest.approx(90.0)


def test_reflection_metrics_no_flags():
    m = reflection_metrics([counts(checks=12)])
    assert m["EDR"] == 0.0 and m["RA"] is None and m["RSR"] is None and m["MRA"] is None


def test_reflection_metrics_all_relevant():
    assert reflection_metrics([counts(retrievals=7, retrievals_relevant=7)])["MRA"] == 100.0


# -- score_episode ---------------------------------------------------------------

class Script:
    """Controller replaying a fixed action list, then turning in place."""

    def __init__(self, actions):
        self.actions = list(actions)

    def decide(self, subtask, env, world_map, history=()):
        if subtask is None:
            return Decision(Action.STOP, "done")
        a = self.actions.pop(0) if self.actions else Action.TURN_LEFT
        return Decision(a, "scripted")


def scripted(sc, actions, **cfg):
    base = scripted_team(sc)
    config = EpisodeConfig(**cfg)
    return run_episode(sc, Team(base.planner, base.observer, Script(actions)), config)


def test_exact_arrival_scores_zero_error(corridor):
    res = scripted(corridor, [Action.MOVE_FORWARD] * 4, tau=0.999)
    m = score_episode(res.trace, corridor)
    assert res.status == DONE and m.NE == 0.0 and m.S == m.oracle_S == 1
    assert m.NL == 5 and m.L == 4.0  # four moves plus the accepted Stop


def test_out_of_order_visit_is_not_success():
    sc = make_scenario(["....."], {"printer": [(4, 0)], "sofa": [(2, 0)]}, targets=["printer", "sofa"], budget=2)
    res = scripted(sc, [Action.MOVE_FORWARD] * 2, tau=0.999)
    m = score_episode(res.trace, sc)
    assert m.oracle_S == 1 and m.S == 0


def test_detour_halves_spl_contribution():
    sc = make_scenario(["...", "...", "..."], {"printer": [(2, 1)]}, start=(0, 1, 0), budget=12)
    detour = [Action.TURN_LEFT, Action.MOVE_FORWARD, Action.TURN_RIGHT, Action.MOVE_FORWARD,
              Action.MOVE_FORWARD, Action.TURN_RIGHT, Action.MOVE_FORWARD]
    res = scripted(sc, detour, tau=0.999)
    m = score_episode(res.trace, sc, radius=0.5)
    assert m.S == 1 and m.L_star == 2.0 and m.L == 4.0
    assert spl([(m.S, m.L, m.L_star)]) == pytest.approx(0.5)


def brute_force(records, sc, radius=1.0):
    """Replay the trace's actions on a fresh world and recompute the geometric metrics."""
    world = World(sc)
    poses = [world.pose]
    moved = 0
    for r in records:
        if r["kind"] != "history":
            continue
        out = world.step(Action(r["action"]))
        moved += out.outcome is Outcome.MOVED
        poses.append(world.pose)
    def near(name, p):
        return min(math.hypot(p.x - x, p.y - y) for x, y in (sc.cell_center(c) for c in sc.landmark(name).cells))
    oracle = int(any(near(t, p) <= radius + 1e-9 for t in sc.subtasks for p in poses))
    return len(poses) - 1, moved * sc.cell_size, near(sc.subtasks[-1], poses[-1]), oracle


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.5))
def test_score_matches_resimulation(seed, mult):
    sc = generate_scenario(seed, (7, 7), budget_multiplier=mult)
    res = run_episode(sc)
    m = score_episode(res.trace, sc)
    nl, length, ne, oracle = brute_force(res.trace.records, sc)
    assert (m.NL, m.oracle_S) == (nl, oracle)
    assert m.L == pytest.approx(length) and m.NE == pytest.approx(ne)
    assert m.L_star == pytest.approx(shortest_visit_length(sc))
    assert m.S <= m.oracle_S


# -- bench -----------------------------------------------------------------------

def test_trivial_bench_repeats_identically(corridor):
    rep = run_bench([("corridor", corridor)], repeats=5)
    assert rep.aggregate["SR"] == 100.0 and len(rep.rows) == 5
    assert len({str(r["metrics"]) for r in rep.rows}) == 1
    assert [r["seed"] for r in rep.rows] == [0, 1, 2, 3, 4]


def test_bench_report_bytes_are_deterministic(tmp_path):
    suite = oracle_suite(6)
    a = run_bench(suite, repeats=2)
    b = run_bench(suite, repeats=2, jobs=2)
    assert a.to_json() == b.to_json() and a.to_text() == b.to_text()
    a.write(tmp_path)
    assert (tmp_path / "report.json").read_text() == a.to_json()
    assert "repeats: 2" in (tmp_path / "report.txt").read_text()


def test_bench_rejects_bad_input(corridor):
    with pytest.raises(EmptyInput):
        run_bench([])
    with pytest.raises(ValueError):
        run_bench([corridor], repeats=0)


def test_failures_become_rows():
    sc = generate_scenario(4, 8, budget_multiplier=0.5)
    rep = run_bench([("short", sc)], repeats=1)
    row = rep.rows[0]
    assert row["metrics"]["S"] == 0 and row["cause"] == "budget"


def test_aggregate_is_recomputable_from_rows():
    rep = run_bench(oracle_suite(5, 20), repeats=1)
    assert aggregate(rep.rows) == rep.aggregate
    assert rep.aggregate["SPL"] <= rep.aggregate["SR"] and rep.aggregate["OSR"] >= rep.aggregate["SR"]


def test_suites_are_deterministic_and_sized():
    g = glass_corridor_suite(5)
    assert [n for n, _ in g] == [n for n, _ in glass_corridor_suite(5)]
    assert all(sc.has_glass() for _, sc in g)
    t = revisit_suite(4)
    assert len(t) == 4 and all(sc.digest() == u.digest() for (_, sc), (_, u) in zip(t, revisit_suite(4)))
