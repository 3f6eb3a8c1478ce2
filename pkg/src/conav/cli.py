"""``conav`` command line: run, bench, gen, replay, memory.

Exit codes: 0 success, 1 usage or config error, 2 task failed, 3 replay divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .agents import SubTaskPlan
from .config import RunConfig
from .errors import ConavError, EmptyBank, IllegalTransition
from .evalkit import glass_corridor_suite, oracle_suite, revisit_suite, run_bench, score_episode
from .llm import ROLES
from .memory import ExperienceBank, encode
from .orchestrator import (
    ABLATIONS, DONE, FAILED, read_trace, replay_transitions, resimulate, run_episode,
    trace_history, trace_scenario,
)
from .reflection import global_reflect
from .simworld import Pose, Scenario, generate_scenario, render_ascii

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_DIVERGED = 0, 1, 2, 3
SUITES = {"oracle": oracle_suite, "glass": glass_corridor_suite, "revisit": revisit_suite}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for a failed task here.
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


# -- shared option groups ------------------------------------------------------------

def _episode_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("episode")
    g.add_argument("--config", help="JSON config file (keys as in RunConfig)")
    g.add_argument("--agents", choices=("scripted", "remote"), help="backend for every role")
    g.add_argument("--role", action="append", metavar="ROLE=BACKEND",
                   help=f"per-role backend override, ROLE in {', '.join(ROLES)}")
    g.add_argument("--remote-url", help="chat endpoint base URL")
    g.add_argument("--remote-model", help="model name sent to the endpoint")
    g.add_argument("--remote-timeout", type=float, help="request timeout in seconds")
    g.add_argument("--remote-retries", type=int, help="retries on 5xx/timeouts")
    g.add_argument("--tau", type=float, help="verification threshold in (0, 1]; default from radius")
    g.add_argument("--tau-risk", type=float, help="risk-retrieval threshold in [0, 1]")
    g.add_argument("--delta", type=float, help="candidate waypoint distance (m)")
    g.add_argument("--radius", type=float, dest="success_radius", help="success radius (m)")
    g.add_argument("--budget-mult", type=float, dest="budget_multiplier",
                   help="step budget as a multiple of the optimal path length")
    g.add_argument("--ablate", action="append", metavar="FLAG",
                   help=f"ablation flag, repeatable: {', '.join(ABLATIONS)}")
    g.add_argument("--glass-blind", action="store_const", const=True, help="glass invisible to percepts")
    g.add_argument("--distance-noise", type=float, help="std-dev of range noise (m)")
    g.add_argument("--full-maps", action="store_const", const=True, help="inline map snapshots in history")
    g.add_argument("--bank", help="experience bank JSON file")
    g.add_argument("--learn", action="store_const", const=True,
                   help="distil failures into --bank after each episode")


def _run_config(args, **extra) -> RunConfig:
    over = {k: getattr(args, k, None) for k in (
        "agents", "tau", "tau_risk", "delta", "success_radius", "budget_multiplier",
        "glass_blind", "distance_noise", "full_maps", "bank", "learn")}
    if args.ablate:
        over["ablations"] = [a for item in args.ablate for a in item.split(",") if a]
    if args.role:
        roles = {}
        for item in args.role:
            role, sep, backend = item.partition("=")
            if not sep:
                raise UsageError(f"--role expects ROLE=BACKEND, got {item!r}")
            roles[role] = backend
        over["roles"] = roles
    remote = {k: v for k, v in (("base_url", args.remote_url), ("model", args.remote_model),
                                ("timeout_s", args.remote_timeout),
                                ("max_retries", args.remote_retries)) if v is not None}
    over.update(extra)
    cfg = RunConfig.load(args.config, over)
    if remote:
        cfg.remote = {**cfg.remote, **remote}
        cfg.validate()
    return cfg


def _load_bank(path: str | None, must_exist: bool = False) -> ExperienceBank | None:
    if path is None:
        return None
    if not Path(path).exists():
        if must_exist:
            raise ConavError(f"bank {path} does not exist")
        return ExperienceBank()
    return ExperienceBank.load(path)


# -- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _run_config(args, seeds=[args.seed] if args.seed is not None else None,
                      trace=args.trace)
    try:
        scenario = Scenario.load(args.scenario)
    except OSError as exc:
        raise ConavError(f"cannot read scenario {args.scenario}: {exc}") from exc
    ep_cfg = cfg.episode_config(scenario)
    bank = _load_bank(cfg.bank)
    result = run_episode(scenario, cfg.team(scenario, ep_cfg), ep_cfg, bank)
    if cfg.trace:
        result.trace.write(cfg.trace)
    if bank is not None and cfg.learn:
        bank.persist(cfg.bank)
    metrics = score_episode(result.trace, scenario, ep_cfg.success_radius)
    _emit({"scenario": Path(args.scenario).name, "seed": ep_cfg.noise.seed, "status": result.status,
           "cause": result.cause, "metrics": metrics.to_dict()})
    return EXIT_OK if result.status == DONE else EXIT_FAILED


def _collect_scenarios(paths, suite) -> list[tuple[str, Scenario]]:
    named = []
    for raw in paths or ():
        p = Path(raw)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            try:
                named.append((f.stem, Scenario.load(f)))
            except OSError as exc:
                raise ConavError(f"cannot read scenario {f}: {exc}") from exc
    if suite:
        name, _, n = suite.partition(":")
        if name not in SUITES:
            raise UsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
        named.extend(SUITES[name](int(n)) if n else SUITES[name]())
    if not named:
        raise UsageError("no scenarios given (use --scenarios or --suite)")
    return named


def cmd_bench(args) -> int:
    if args.repeat is not None and args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    cfg = _run_config(args, repeat=args.repeat, jobs=args.jobs, report=args.report,
                      traces_dir=args.traces, seeds=[args.seed] if args.seed is not None else None)
    named = _collect_scenarios(args.scenarios or cfg.scenarios, args.suite)
    bank = _load_bank(cfg.bank)
    base = cfg.episode_config()
    scripted_only = set(cfg.backends().values()) == {"scripted"}
    factory = None
    if not scripted_only:
        factory = cfg.team
    if cfg.budget_multiplier is not None:
        # Budgets depend on the scenario; rebuild each one's budget before the run.
        named = [(n, _with_budget(sc, cfg)) for n, sc in named]
    report = run_bench(named, cfg.repeat, (), base, team_factory=factory, bank=bank,
                       jobs=cfg.jobs, trace_dir=cfg.traces_dir)
    if cfg.report:
        report.write(cfg.report)
    if bank is not None and cfg.learn:
        bank.persist(cfg.bank)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _with_budget(sc: Scenario, cfg: RunConfig) -> Scenario:
    budget = cfg.episode_config(sc).budget
    return replace(sc, step_budget=budget)


def cmd_gen(args) -> int:
    if args.suite:
        named = _collect_scenarios((), args.suite)
        out = Path(args.out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        for name, sc in named:
            sc.save(out / f"{name}.json")
        print(f"{len(named)} scenarios written to {out}")
        return EXIT_OK
    size = tuple(args.size) if len(args.size) == 2 else (args.size[0], args.size[0])
    seeds = range(args.seed, args.seed + args.count)
    scenarios = [
        generate_scenario(s, size, args.landmarks, args.subtasks, obstacle_density=args.density,
                          glass_count=args.glass, budget_multiplier=args.budget_mult)
        for s in seeds
    ]
    if args.out and args.count == 1:
        scenarios[0].save(args.out)
        print(f"scenario written to {args.out}")
    elif args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, sc in zip(seeds, scenarios):
            sc.save(out / f"seed{s:04d}.json")
        print(f"{len(scenarios)} scenarios written to {out}")
    else:
        for sc in scenarios:
            print(sc.to_json())
    return EXIT_OK


def cmd_replay(args) -> int:
    records = read_trace(args.trace)
    try:
        state = replay_transitions(records)
    except IllegalTransition as exc:
        _err(f"transition replay diverged: {exc}")
        return EXIT_DIVERGED
    diverged = resimulate(records)
    if diverged:
        t, want, got = diverged[0]
        if t < 0:
            _err("history steps are not contiguous (a step was removed or reordered)")
            return EXIT_DIVERGED
        _err(f"pose drift at step {t}: recorded {want.to_dict()}, simulated {got.to_dict()}")
        return EXIT_DIVERGED
    if args.render == "ascii":
        scenario = trace_scenario(records)
        for rec in trace_history(records):
            pose = Pose.from_dict(rec.outcome["pose"])
            print(f"step {rec.t}: {rec.action.value} -> {rec.outcome['result']}")
            print(render_ascii(scenario, pose))
            print()
    print(f"replay ok: {state.phase} after {state.step} steps")
    return EXIT_OK


def cmd_memory(args) -> int:
    if args.memory_cmd == "inspect":
        bank = _load_bank(args.bank, must_exist=True)
        try:
            ranked = bank.retrieve(encode(args.query), top_k=args.top_k)
        except EmptyBank as exc:
            _err(f"EmptyBank: {exc}")
            return EXIT_USAGE
        for rank, (entry, score) in enumerate(ranked, start=1):
            r = entry.reflective
            print(f"{rank:>3}  {score:.4f}  {entry.id}  {r.cause_category}  "
                  f"{r.a_err} -> {r.a_corr}  [{' '.join(sorted(entry.tokens))}]")
        return EXIT_OK

    records = read_trace(args.trace)
    bank = _load_bank(args.bank) or ExperienceBank()
    header, result = records[0], records[-1]
    plan = SubTaskPlan.from_dict(result["plan"]) if result.get("plan") else None
    cfg = header.get("config", {})
    seed = cfg.get("noise", {}).get("seed", 0)
    _, entries = global_reflect(
        trace_history(records), plan, header["scenario"]["instruction"],
        failed=result["phase"] == FAILED, episode_id=f"{header['scenario_hash'][:8]}-s{seed}",
    )
    for e in entries:
        bank.store(e)
    bank.persist(args.bank)
    print(f"{len(entries)} entries added")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="conav", description="Multi-agent grid-world navigation: episodes, benchmarks, replay.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("--scenario", required=True, help="scenario JSON file")
    r.add_argument("--seed", type=int, help="noise seed")
    r.add_argument("--trace", help="write the JSONL trace here")
    _episode_options(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a benchmark over scenarios x repeats")
    b.add_argument("--scenarios", nargs="+", help="scenario files or directories of *.json")
    b.add_argument("--suite", help="built-in suite: oracle, glass or revisit, optionally NAME:N")
    b.add_argument("--repeat", type=int, default=None, help="repeats per scenario (default 5)")
    b.add_argument("--seed", type=int, help="noise seed of repeat 0; repeat r uses seed + r")
    b.add_argument("--jobs", type=int, help="parallel worker processes")
    b.add_argument("--report", help="directory for report.json and report.txt")
    b.add_argument("--traces", help="directory for per-episode traces")
    _episode_options(b)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen", help="generate scenarios")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--count", type=int, default=1, help="number of consecutive seeds")
    g.add_argument("--size", type=int, nargs="+", default=[8], help="grid size W [H]")
    g.add_argument("--landmarks", type=int, default=3)
    g.add_argument("--subtasks", type=int, default=2)
    g.add_argument("--density", type=float, default=0.15, help="obstacle density")
    g.add_argument("--glass", type=int, default=0, help="number of glass cells")
    g.add_argument("--budget-mult", type=float, default=4.0, help="budget as multiple of L*")
    g.add_argument("--suite", help="write a built-in suite instead (oracle, glass, revisit[:N])")
    g.add_argument("--out", help="output file (single scenario)")
    g.add_argument("--out-dir", help="output directory")
    g.set_defaults(func=cmd_gen)

    rp = sub.add_parser("replay", help="re-simulate a trace and check for drift")
    rp.add_argument("trace", help="JSONL trace file")
    rp.add_argument("--render", choices=("none", "ascii"), default="none", help="print one grid frame per step")
    rp.set_defaults(func=cmd_replay)

    m = sub.add_parser("memory", help="inspect or grow an experience bank")
    msub = m.add_subparsers(dest="memory_cmd", required=True, parser_class=_Parser)
    mi = msub.add_parser("inspect", help="rank bank entries against a text query")
    mi.add_argument("--bank", required=True)
    mi.add_argument("--query", required=True)
    mi.add_argument("--top-k", type=int, default=5)
    md = msub.add_parser("distill", help="run global reflection on a trace and append entries")
    md.add_argument("--trace", required=True)
    md.add_argument("--bank", required=True)
    m.set_defaults(func=cmd_memory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "size", None) is not None and len(args.size) > 2:
            raise UsageError("--size takes one or two integers")
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (ConavError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
