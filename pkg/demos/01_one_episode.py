"""
One episode on a generated room
===============================

Generate a small scenario, run the scripted team through it and look at
what came out: the map, the step log and the scores.
"""

from conav.evalkit import score_episode
from conav.orchestrator import run_episode
from conav.simworld import generate_scenario, render_ascii

# A seeded 8x8 room with three landmarks, two of them targets
sc = generate_scenario(seed=7, grid_size=8)
print(sc.instruction)
print(render_ascii(sc, sc.start))

# Run it. With no team given the scripted reference agents are used
res = run_episode(sc)
print("status:", res.status, "after", res.steps, "steps")

# Every step is in the history, in order
for rec in res.history:
    print(rec.t, rec.action.value, rec.outcome["result"], "sub-task", rec.subtask_index)

# Scores come from the trace alone, not from the live objects
m = score_episode(res.trace, sc)
print(m.to_dict())

# Final pose drawn on the grid
print(render_ascii(sc, res.trajectory[-1]))
