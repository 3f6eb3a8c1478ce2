import pytest
from hypothesis import given, settings, strategies as st

from conav.agents import ACTIVE, EnvDescription, SalientEntry, SubTask, SubTaskPlan
from conav.errors import NoAlternative
from conav.memory import ExperienceBank, ExperienceEntry, HistoryRecord, ReflectiveTuple, encode
from conav.reflection import (
    CONFLICT, FAILURE, MISMATCH, OSCILLATION, PASS, PROGRESS, RISK, STAGNATION, LocalVerdict,
    expected_outcome, global_reflect, local_check, micro_plan, post_check, segment_history,
)
from conav.simworld import Action, Outcome, PerceptTuple, Pose, Traversability

VIEWS = ("Front", "Right", "Back", "Left")


def env(open_dirs=VIEWS, front_names=(), front_free=None):
    views = []
    for v in VIEWS:
        free = 3.0 if v in open_dirs else 0.0
        if v == "Front" and front_free is not None:
            free = front_free
        views.append(PerceptTuple(v, (), (), Traversability(free >= 1, free), ""))
    salient = tuple(SalientEntry(n, "obstacle", 0.0, 2.0, False, "Front") for n in front_names)
    trav = tuple(v.view for v in views if v.traversability.free_range >= 1)
    return EnvDescription({}, salient, trav, tuple(views))


def glass_bank(a_corr="TurnLeft90"):
    e = ExperienceEntry("g1", dict(encode("glass door corridor")),
                        {"poses": [], "actions": [], "observations": []},
                        ReflectiveTuple(("glass", "door", "corridor"), "MoveForward", "misperception", "", a_corr))
    k = ExperienceEntry("k1", dict(encode("kitchen table")), {"poses": [], "actions": [], "observations": []},
                        ReflectiveTuple(("kitchen",), "TurnLeft90", "stagnation", "", "MoveForward"))
    return ExperienceBank([e, k])


# -- local check -------------------------------------------------------------------

def test_forward_into_obstacle_one_meter_ahead_conflicts():
    v = local_check(Action.MOVE_FORWARD, env(("Right", "Left"), front_free=0.0))
    assert v.flag == CONFLICT


def test_rotation_always_passes():
    assert local_check(Action.TURN_LEFT, env(())).flag == PASS
    assert local_check(Action.STOP, env(())).flag == PASS


def test_glass_door_scene_triggers_risk():
    v = local_check(Action.MOVE_FORWARD, env(front_names=["glass door"]), None,
                    SubTask(1, "", "", ACTIVE), glass_bank(), 0.75)
    assert v.flag == RISK and v.matched_id == "g1"
    assert v.similarity == pytest.approx(0.8165, abs=1e-4)


def test_empty_bank_skips_risk():
    v = local_check(Action.MOVE_FORWARD, env(front_names=["glass door"]), None, None, ExperienceBank())
    assert v.flag == PASS


def test_risk_needs_match():
    with pytest.raises(ValueError):
        LocalVerdict(RISK, "no match")


# -- micro plan ------------------------------------------------------------------------

def test_conflict_turns_right_when_right_open():
    e = env(("Right", "Left"), front_free=0.0)
    assert micro_plan(LocalVerdict(CONFLICT, ""), e, Action.MOVE_FORWARD) is Action.TURN_RIGHT


def test_risk_uses_stored_correction():
    verdict = LocalVerdict(RISK, "", "g1", 0.9, "MoveForward", "TurnLeft90")
    assert micro_plan(verdict, env(), Action.MOVE_FORWARD) is Action.TURN_LEFT


def test_dead_end_starts_about_face():
    # corridor dead end: only Back is open; two right turns face the way out
    e = env(("Back",), front_free=0.0)
    first = micro_plan(LocalVerdict(CONFLICT, ""), e, Action.MOVE_FORWARD)
    assert first is Action.TURN_RIGHT
    # after the first turn the old Back is on the Right
    e2 = env(("Right",), front_free=0.0)
    assert micro_plan(LocalVerdict(CONFLICT, ""), e2, Action.MOVE_FORWARD) is Action.TURN_RIGHT


def test_boxed_in_has_no_alternative():
    with pytest.raises(NoAlternative):
        micro_plan(LocalVerdict(CONFLICT, ""), env((), front_free=0.0), Action.MOVE_FORWARD)


@given(st.sets(st.sampled_from(VIEWS)), st.sampled_from(list(Action)))
def test_micro_plan_never_returns_vetoed_action(open_dirs, original):
    e = env(tuple(open_dirs))
    try:
        alt = micro_plan(LocalVerdict(CONFLICT, ""), e, original)
    except NoAlternative:
        return
    assert alt is not original
    if alt is Action.MOVE_FORWARD:
        assert local_check(alt, e).flag == PASS


# -- post check ---------------------------------------------------------------------

def test_post_check_cases():
    assert post_check(Outcome.MOVED, Outcome.MOVED) == "ok"
    assert post_check(Outcome.MOVED, Outcome.BLOCKED) == MISMATCH
    assert post_check(Outcome.STOPPED, Outcome.STOPPED) == "ok"


def test_expected_outcome_reads_front():
    assert expected_outcome(Action.MOVE_FORWARD, env()) is Outcome.MOVED
    assert expected_outcome(Action.MOVE_FORWARD, env(front_free=0.0)) is Outcome.BLOCKED


# -- global reflection ----------------------------------------------------------------

def rec(t, action, x=0.0, y=0.0, sub=1, blocked_by=None, events=(), front=()):
    result = "Blocked" if blocked_by else ("Turned" if action.startswith("Turn") else "Moved")
    return HistoryRecord(
        t, Pose(x, y, 0), Action(action), {"target": "red printer", "front": list(front)}, {"ref": t},
        {"result": result, "blocked_by": blocked_by, "pose": {"x": x, "y": y, "heading": 0}, "progress": None},
        list(events), sub)


def test_clean_run_two_progress_segments():
    hist = [rec(t, "MoveForward", x=float(t), sub=1 if t <= 5 else 2) for t in range(9)]
    ep, entries = global_reflect(hist, None, "", failed=False, episode_id="ep")
    assert [(s.start_t, s.end_t, s.label) for s in ep.segments] == [(0, 5, PROGRESS), (6, 8, PROGRESS)]
    assert entries == []


def test_repeated_glass_collisions_distil_misperception():
    mismatch = [{"flag": MISMATCH, "action": "MoveForward"}]
    hist = [rec(t, "MoveForward", x=2.0, blocked_by="glass door", events=mismatch, front=["glass door"])
            for t in range(6)]
    ep, entries = global_reflect(hist, None, "", failed=True, episode_id="ep")
    assert [s.label for s in ep.segments] == [STAGNATION]
    assert len(entries) == 1
    tup = entries[0].reflective
    assert tup.cause_category == "misperception" and tup.a_err == "MoveForward"
    assert "glass" in tup.f_err_tokens


def test_alternating_turns_are_oscillation():
    hist = [rec(t, "MoveForward", x=float(t)) for t in range(10)]
    hist += [rec(10 + i, a, x=10.0) for i, a in enumerate(["TurnLeft90", "TurnRight90"] * 2)]
    hist += [rec(14, "MoveForward", x=11.0)]
    ep, entries = global_reflect(hist, None, "", failed=False, episode_id="ep")
    assert any((s.start_t, s.end_t, s.label) == (10, 13, OSCILLATION) for s in ep.segments)
    assert entries[0].reflective.cause_category == "oscillation"


def test_failed_run_ends_in_failure_segment():
    hist = [rec(t, "MoveForward", x=float(t)) for t in range(4)]
    ep, entries = global_reflect(hist, SubTaskPlan.from_targets("", ["red printer"]), "", failed=True,
                                 episode_id="ep")
    assert ep.segments[-1].label == FAILURE and len(entries) == 1


ACTS = ["MoveForward", "TurnLeft90", "TurnRight90"]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(ACTS), st.booleans(), st.booleans()), min_size=1, max_size=40),
       st.booleans())
def test_segments_partition_history(steps, failed):
    hist, x, sub = [], 0.0, 1
    for t, (a, blocked, advance) in enumerate(steps):
        if a == "MoveForward" and not blocked:
            x += 1
        hist.append(rec(t, a, x=x, sub=sub, blocked_by="wall" if blocked and a == "MoveForward" else None))
        sub += int(advance)
    segs = segment_history(hist, failed)
    assert segs == segment_history(hist, failed)
    assert sum(len(s) for s in segs) == len(hist)
    assert segs[0].start_t == 0 and segs[-1].end_t == len(hist) - 1
    assert all(a.end_t + 1 == b.start_t for a, b in zip(segs, segs[1:]))
    _, entries = global_reflect(hist, None, "", failed=failed, episode_id="p")
    bank = ExperienceBank()
    for e in entries:
        bank.store(e)
        assert bank.retrieve(e.tokens)[0][1] == pytest.approx(1.0)
