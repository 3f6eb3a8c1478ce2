"""
Talking to a chat endpoint
==========================

The agents can run behind any chat-completions style endpoint. Here a local
stub answers with the scripted agents, so the remote run should retrace the
scripted one exactly. Point RemoteConfig at a real server to try a model.
"""

from conav.llm import RemoteConfig, ScriptedResponder, StubServer, remote_team
from conav.orchestrator import EpisodeConfig, run_episode
from conav.simworld import generate_scenario

sc = generate_scenario(seed=3, grid_size=7)
cfg = EpisodeConfig()
ref = run_episode(sc, config=cfg)

with StubServer(ScriptedResponder(sc, cfg)) as stub:
    print("stub at", stub.url)
    team = remote_team(RemoteConfig(stub.url), delta=cfg.delta_for(sc))
    res = run_episode(sc, team, cfg)
    print(len(stub.requests), "requests served")

print("same path:", res.trajectory == ref.trajectory)

# The trace keeps every prompt and reply
llm = [r for r in res.trace.records if r["kind"] == "llm"]
print(llm[0]["prompt"][0]["content"][:200])
print(llm[0]["reply"][:200])
