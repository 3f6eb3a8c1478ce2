import pytest

from conav.simworld import Landmark, Pose, Scenario


def make_scenario(rows, landmarks, start=(0, 0, 0), targets=None, budget=40, cell_size=1.0):
    """Scenario from rows listed bottom (y=0) first; landmarks as {name: [(col, row), ...]}."""
    lms = tuple(Landmark(n, tuple(cells)) for n, cells in landmarks.items())
    targets = tuple(targets if targets is not None else landmarks)
    x, y, h = start
    instruction = "go to the " + " and then the ".join(targets) if targets else ""
    return Scenario(tuple(rows), cell_size, lms, Pose(x * cell_size, y * cell_size, h),
                    instruction, targets, (), budget)


@pytest.fixture
def corridor():
    # 5 x 1 corridor, printer at the far end.
    return make_scenario(["....."], {"printer": [(4, 0)]}, start=(0, 0, 0), budget=16)


@pytest.fixture
def glass_door():
    # The direct row is shut by a glass door; the detour goes through row 2.
    rows = [
        ".....",
        "..#..",
        "..g..",
        "..#..",
        ".....",
    ]
    return make_scenario(rows, {"red printer": [(4, 2)]}, start=(0, 2, 0), budget=40)
