import json

import pytest

from conav.cli import main
from conav.evalkit import glass_corridor_suite, glass_noise
from conav.memory import ExperienceBank, ExperienceEntry, ReflectiveTuple, encode
from conav.orchestrator import EpisodeConfig, read_trace, run_episode
from conav.simworld import generate_scenario


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "s.json"
    assert main(["gen", "--seed", "7", "--size", "7", "--out", str(path)]) == 0
    return path


def test_run_writes_trace_and_metrics(scenario_file, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    capsys.readouterr()
    assert main(["run", "--scenario", str(scenario_file), "--seed", "3", "--trace", str(trace)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "DONE" and out["metrics"]["S"] == 1 and out["seed"] == 3
    first = trace.read_bytes()
    assert main(["run", "--scenario", str(scenario_file), "--seed", "3", "--trace", str(trace)]) == 0
    assert trace.read_bytes() == first


def test_usage_errors_exit_one(scenario_file, tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--scenario", str(scenario_file), "--warp-speed"]) == 1
    assert main(["bench", "--scenarios", str(scenario_file), "--repeat", "0"]) == 1
    assert main(["run", "--scenario", str(scenario_file), "--tau", "2"]) == 1
    assert main([]) == 1
    assert "error" in capsys.readouterr().err.lower()


def test_failed_task_exits_two(scenario_file, capsys):
    assert main(["run", "--scenario", str(scenario_file), "--budget-mult", "0.5"]) == 2
    assert json.loads(capsys.readouterr().out)["metrics"]["S"] == 0


def test_replay_ok_and_tampered(scenario_file, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    main(["run", "--scenario", str(scenario_file), "--trace", str(trace)])
    assert main(["replay", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    i = next(k for k, r in enumerate(recs) if r["kind"] == "history")
    recs[i]["outcome"]["pose"]["y"] += 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("".join(json.dumps(r) + "\n" for r in recs))
    assert main(["replay", str(bad)]) == 3
    gap = tmp_path / "gap.jsonl"
    gap.write_text("".join(x + "\n" for k, x in enumerate(lines) if k != i))
    assert main(["replay", str(gap)]) == 3
    assert "not contiguous" in capsys.readouterr().err


def test_replay_ascii_prints_one_frame_per_step(scenario_file, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    main(["run", "--scenario", str(scenario_file), "--trace", str(trace)])
    capsys.readouterr()
    assert main(["replay", str(trace), "--render", "ascii"]) == 0
    out = capsys.readouterr().out
    steps = sum(1 for r in read_trace(trace) if r["kind"] == "history")
    assert out.count("step ") == steps


def test_bench_report_files(scenario_file, tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["bench", "--scenarios", str(scenario_file), "--repeat", "2", "--report", str(out),
                 "--ablate", "no_memory,no_topo_map"]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["repeats"] == 2 and doc["ablations"] == ["no_memory", "no_topo_map"]
    assert "repeats: 2" in capsys.readouterr().out


def two_entry_bank(path):
    def entry(eid, text, cause):
        return ExperienceEntry(eid, dict(encode(text)), {"poses": [], "actions": [], "observations": []},
                               ReflectiveTuple(tuple(encode(text)), "MoveForward", cause, "", "TurnLeft90"))
    ExperienceBank([entry("glass-1", "glass door corridor", "misperception"),
                    entry("kitchen-1", "kitchen table", "stagnation")]).persist(path)


def test_memory_inspect_ranks_glass_first(tmp_path, capsys):
    bank = tmp_path / "bank.json"
    two_entry_bank(bank)
    assert main(["memory", "inspect", "--bank", str(bank), "--query", "glass door"]) == 0
    head = capsys.readouterr().out.splitlines()[0].split()
    assert head[1] == "0.8165" and head[2] == "glass-1"


def test_memory_inspect_empty_bank(tmp_path):
    bank = tmp_path / "bank.json"
    ExperienceBank().persist(bank)
    assert main(["memory", "inspect", "--bank", str(bank), "--query", "glass"]) == 1
    assert main(["memory", "inspect", "--bank", str(tmp_path / "nope.json"), "--query", "glass"]) == 1


def test_memory_distill_from_glass_failure(tmp_path, capsys):
    _, sc = glass_corridor_suite(1)[0]
    res = run_episode(sc, config=EpisodeConfig(noise=glass_noise(), ablations={"no_reflection"}))
    trace, bank = tmp_path / "t.jsonl", tmp_path / "bank.json"
    res.trace.write(trace)
    assert main(["memory", "distill", "--trace", str(trace), "--bank", str(bank)]) == 0
    n = int(capsys.readouterr().out.split()[0])
    stored = ExperienceBank.load(bank)
    assert n >= 1 and len(stored) == n
    assert any(e.reflective.cause_category == "misperception" for e in stored)


def test_gen_is_seeded(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["gen", "--seed", "4", "--out", str(a)])
    main(["gen", "--seed", "4", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text()) == json.loads(generate_scenario(4).to_json())
