"""
Learning from failures
======================

Let episodes fail on glass, distil what went wrong into an experience bank,
then reuse the bank on the same kind of room.
"""

import tempfile
from pathlib import Path

from conav.evalkit import glass_corridor_suite, glass_noise, planted_bank, run_bench
from conav.memory import ExperienceBank, encode
from conav.orchestrator import EpisodeConfig

suite = glass_corridor_suite(n=8)

# planted_bank runs learning episodes and keeps the glass failures
bank = planted_bank(suite)
print(len(bank), "entries")
entry = next(iter(bank))
print(entry.id, entry.reflective)

# Retrieval is a cosine match over bag-of-token counts
for e, score in bank.retrieve(encode("glass door"), top_k=3):
    print(f"{score:.4f}", e.id, sorted(e.tokens))

# Banks are plain JSON on disk
path = Path(tempfile.mkdtemp()) / "bank.json"
bank.persist(path)
assert ExperienceBank.load(path) == bank

# With the bank, the risk check can step in before the first collision
rep = run_bench(suite, repeats=1, config=EpisodeConfig(noise=glass_noise()), bank=bank)
print("MRA", rep.aggregate["MRA"], "SR", rep.aggregate["SR"])
