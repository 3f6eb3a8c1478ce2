"""
Glass doors and local reflection
================================

The agents here cannot see glass. A wall with a glass panel splits the room,
so the straight route looks open but is not. We run the same scenarios with
and without the reflection loop and compare.
"""

from conav.evalkit import glass_corridor_suite, glass_noise, run_bench
from conav.orchestrator import EpisodeConfig, run_episode
from conav.simworld import render_ascii

suite = glass_corridor_suite(n=10)
name, sc = suite[0]
print(name)
print(render_ascii(sc, sc.start))  # 'g' marks the glass

cfg = EpisodeConfig(noise=glass_noise())

# One run, watching the reflection events
res = run_episode(sc, config=cfg)
for rec in res.history:
    for ev in rec.reflection_events:
        print(f"t={rec.t:2d} {ev['flag']:<9} {ev.get('action')}")
print(res.status)

# Same suite, same noise seeds, reflection on and off
full = run_bench(suite, repeats=2, config=cfg)
off = run_bench(suite, repeats=2, config=cfg, ablations=["no_reflection"])
print("SR with reflection   ", full.aggregate["SR"])
print("SR without reflection", off.aggregate["SR"])
print(full.to_text())
