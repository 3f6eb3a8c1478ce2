import pytest
from hypothesis import given, strategies as st

from conav.agents import (
    ACTIVE, DONE, NO_GEO, Decision, EnvDescription, ScriptedController,
    ScriptedObserver, ScriptedPlanner, SubTask, SubTaskPlan, bearing_action, raw_description,
    tokenize,
)
from conav.errors import Deadlock, PlanEmpty
from conav.simworld import (
    Action, LandmarkSighting, ObstacleSighting, PerceptTuple, Pose, Traversability,
    World, generate_scenario,
)

VIEWS = ("Front", "Right", "Back", "Left")


def view(name, free=3.0, landmarks=(), obstacles=()):
    return PerceptTuple(name, tuple(obstacles), tuple(landmarks), Traversability(free >= 1, free), "")


def four(**over):
    return [over.get(v, view(v)) for v in VIEWS]


# -- plan ----------------------------------------------------------------------

def test_plan_office_route():
    planner = ScriptedPlanner({"black swivel chair": [(1, 1)], "aisle": [(3, 1)], "printer": [(6, 1)]}, 10)
    plan = planner.plan("Leave the office, walk to the black swivel chair, follow the aisle "
                        "and find the printer against the wall")
    assert [st.target for st in plan.subtasks] == ["black swivel chair", "aisle", "printer"]
    assert plan.subtasks[0].status == ACTIVE


def test_plan_single_landmark():
    planner = ScriptedPlanner({"printer": [(1, 1)], "sofa": [(2, 2)]}, 10)
    assert len(planner.plan("go to the printer")) == 1


def test_plan_inverts_generated_instruction():
    sc = generate_scenario(1, 8, 3, 2)
    plan = ScriptedPlanner.for_scenario(sc).plan(sc.instruction)
    assert tuple(st.target for st in plan.subtasks) == sc.subtasks


def test_plan_empty_cases():
    planner = ScriptedPlanner({"printer": [(1, 1)]}, 10)
    with pytest.raises(PlanEmpty):
        planner.plan("   ")
    with pytest.raises(PlanEmpty):
        planner.plan("walk to the kitchen")


def test_plan_status_bookkeeping():
    plan = SubTaskPlan.from_targets("x", ["a", "b"])
    assert plan.active.index == 1
    plan.advance()
    assert [s.status for s in plan.subtasks] == [DONE, ACTIVE]
    plan.advance()
    assert plan.complete and plan.active is None
    assert SubTaskPlan.from_dict(plan.to_dict()).to_dict() == plan.to_dict()


def test_plan_indices_must_be_contiguous():
    with pytest.raises(ValueError):
        SubTaskPlan("x", [SubTask(2, "d", "t")])


# -- verify --------------------------------------------------------------------

def test_verify_adjacent_target():
    planner = ScriptedPlanner({"printer": [(1, 0)]}, 10.0)
    v = planner.verify(SubTask(1, "", "printer", ACTIVE), None, [], Pose(0, 0, 0), 0.8)
    assert v.progress == pytest.approx(0.9, abs=1e-12) and v.done


def test_verify_on_target_and_threshold_miss():
    planner = ScriptedPlanner({"printer": [(5, 0)]}, 10.0)
    st_ = SubTask(1, "", "printer", ACTIVE)
    assert planner.verify(st_, None, [], Pose(5, 0, 0), 0.8).progress == 1.0
    assert not planner.verify(st_, None, [], Pose(0, 0, 0), 0.8).done


@given(st.floats(0, 30), st.floats(0, 30))
def test_verify_monotone_in_distance(a, b):
    planner = ScriptedPlanner({"printer": [(0, 0)]}, 12.0)
    near, far = sorted((a, b))
    assert planner.progress("printer", Pose(near, 0, 0)) >= planner.progress("printer", Pose(far, 0, 0))


# -- observe -------------------------------------------------------------------

def test_observe_marks_relevant_printer():
    views = four(Front=view("Front", landmarks=[LandmarkSighting("printer", 0.0, 1.5)]))
    env = ScriptedObserver().observe(views, SubTask(1, "", "printer", ACTIVE))
    e = env.salient[0]
    assert (e.name, e.bearing, e.distance, e.task_relevant) == ("printer", 0.0, 1.5, True)


def test_observe_vacuous_scene():
    env = ScriptedObserver().observe(four(), SubTask(1, "", "printer", ACTIVE))
    assert env.salient == () and set(env.summaries.values()) == {"open space"}
    assert env.traversable_dirs == VIEWS


def test_observe_close_obstacle_removes_front():
    front = view("Front", free=0.0, obstacles=[ObstacleSighting("wall", 0.0, 1.0)])
    env = ScriptedObserver(delta=1.0).observe(four(Front=front), SubTask(1, "", "printer", ACTIVE))
    assert "Front" not in env.traversable_dirs


def test_observe_salient_subset_of_raw():
    sc = generate_scenario(5, 8)
    views = World(sc).perceive()
    env = ScriptedObserver().observe(views, SubTask(1, "", sc.subtasks[0], ACTIVE))
    raw = {(lm.name, v.view) for v in views for lm in v.landmarks} | {
        (o.category, v.view) for v in views for o in v.obstacles}
    assert {(e.name, e.view) for e in env.salient} <= raw
    assert EnvDescription.from_dict(env.to_dict(), views) == env


def test_raw_description_has_no_relevance():
    views = four(Front=view("Front", landmarks=[LandmarkSighting("printer", 0.0, 1.5)]))
    assert not any(e.task_relevant for e in raw_description(views).salient)


# -- decide --------------------------------------------------------------------

@pytest.mark.parametrize("bearing,action", [
    (0.0, Action.MOVE_FORWARD), (90.0, Action.TURN_LEFT), (-90.0, Action.TURN_RIGHT),
    (45.0, Action.MOVE_FORWARD), (46.0, Action.TURN_LEFT), (-45.0, Action.TURN_RIGHT),
    (135.0, Action.TURN_LEFT), (-135.0, Action.TURN_RIGHT),
])
def test_bearing_quadrants(bearing, action):
    assert bearing_action(bearing) is action


def test_bearing_behind_turns():
    assert bearing_action(180.0) in (Action.TURN_LEFT, Action.TURN_RIGHT)


def _env_with(bearing, free_front=3.0):
    lm = LandmarkSighting("printer", bearing, 2.0)
    views = [view(v, free=free_front if v == "Front" else 3.0,
                  landmarks=[lm] if i == 0 else []) for i, v in enumerate(VIEWS)]
    return ScriptedObserver().observe(views, SubTask(1, "", "printer", ACTIVE))


def test_decide_aligned_target_moves_forward():
    d = ScriptedController(mode=NO_GEO).decide(SubTask(1, "", "printer", ACTIVE), _env_with(0.0), None)
    assert d.action is Action.MOVE_FORWARD


def test_decide_target_left_turns_left():
    d = ScriptedController(mode=NO_GEO).decide(SubTask(1, "", "printer", ACTIVE), _env_with(90.0), None)
    assert d.action is Action.TURN_LEFT


def test_decide_boxed_in_raises_deadlock():
    views = [view(v, free=0.0) for v in VIEWS]
    env = ScriptedObserver().observe(views, SubTask(1, "", "printer", ACTIVE))
    with pytest.raises(Deadlock):
        ScriptedController().decide(SubTask(1, "", "printer", ACTIVE), env, None)


def test_decide_stop_when_nothing_left():
    d = ScriptedController().decide(None, _env_with(0.0), None)
    assert d.action is Action.STOP


def test_decide_is_deterministic():
    sc = generate_scenario(9, 8)
    env = ScriptedObserver().observe(World(sc).perceive(), SubTask(1, "", sc.subtasks[0], ACTIVE))
    a = ScriptedController().decide(SubTask(1, "", sc.subtasks[0], ACTIVE), env, None)
    b = ScriptedController().decide(SubTask(1, "", sc.subtasks[0], ACTIVE), env, None)
    assert a == b and isinstance(a, Decision)


def test_tokenize():
    assert tokenize("Glass-Door, glass!") == ["glass", "door", "glass"]
