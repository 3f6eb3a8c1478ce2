"""Metrics, scenario suites and the batch benchmark runner."""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import EmptyInput, TraceCorrupt
from .memory import ExperienceBank
from .orchestrator import (
    DONE, EpisodeConfig, check_trace_shape, run_episode, trace_history, trace_scenario,
)
from .reflection import CONFLICT, MISMATCH, RISK
from .simworld import (
    COLORS, FREE, GLASS, OBJECTS, OBSTACLE, Action, Landmark, NoiseConfig, Outcome, Pose,
    Scenario, World, generate_scenario, instruction_for, shortest_visit_length,
)
from .simworld import _key_points, shortest_visit_path  # noqa: F401  (re-used for suite annotations)

COUNTERS = ("checks", "flagged", "confirmed", "rollbacks", "rollback_success", "retrievals", "retrievals_relevant")
FAILURE_TOKENS = {"glass"}


# -- formulas --------------------------------------------------------------------

def spl(rows: Sequence) -> float:
    """Success weighted by path length. Rows are mappings or (S, L, L_star) triples."""
    if not rows:
        raise EmptyInput("spl needs at least one row")
    total = 0.0
    for row in rows:
        s, l, ls = (row["S"], row.get("L"), row.get("L_star")) if isinstance(row, dict) else row
        if s:
            if ls is None or ls <= 0:
                raise ValueError("L_star must be positive for successful rows")
            total += ls / max(l, ls)
    return total / len(rows)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def reflection_metrics(rows: Iterable) -> dict:
    """EDR, RA, RSR, MRA in percent, pooled over rows; None marks N/A."""
    c = dict.fromkeys(COUNTERS, 0)
    for row in rows:
        counts = row["reflect_counts"] if isinstance(row, dict) else row.reflect_counts
        for k in COUNTERS:
            c[k] += counts.get(k, 0)
    return {
        "EDR": _ratio(c["flagged"], c["checks"]),
        "RA": _ratio(c["confirmed"], c["flagged"]),
        "RSR": _ratio(c["rollback_success"], c["rollbacks"]),
        "MRA": _ratio(c["retrievals_relevant"], c["retrievals"]),
    }


# -- per-episode scoring -----------------------------------------------------------

@dataclass
class EpisodeMetrics:
    NL: int
    NE: float
    S: int
    oracle_S: int
    L: float
    L_star: float
    key_decisions: list[dict] = field(default_factory=list)
    reflect_counts: dict = field(default_factory=lambda: dict.fromkeys(COUNTERS, 0))

    def __post_init__(self):
        if self.S and not self.oracle_S:
            raise ValueError("S=1 requires oracle_S=1")

    def to_dict(self) -> dict:
        return {
            "NL": self.NL, "NE": self.NE, "S": self.S, "oracle_S": self.oracle_S,
            "L": self.L, "L_star": self.L_star, "key_decisions": self.key_decisions,
            "reflect_counts": dict(self.reflect_counts),
        }


def _dist_to(scenario: Scenario, name: str, pose: Pose) -> float:
    return min(math.hypot(pose.x - x, pose.y - y)
               for x, y in (scenario.cell_center(c) for c in scenario.landmark(name).cells))


def _vetoed_blocked(scenario: Scenario, pose: Pose, action: str) -> bool:
    """Counterfactual: would the vetoed action have collided on the true grid?"""
    if action != Action.MOVE_FORWARD.value:
        return False
    world = World(scenario)
    world.pose = pose
    return world.step(Action.MOVE_FORWARD).outcome is Outcome.BLOCKED


def score_episode(trace, scenario: Scenario | None = None, radius: float = 1.0,
                  match_threshold: float | None = None) -> EpisodeMetrics:
    """Metrics of one finished episode, computed from its trace records alone."""
    if isinstance(trace, (str, Path)):
        from .orchestrator import read_trace
        records = read_trace(trace)
    else:
        records = list(getattr(trace, "records", trace))
        check_trace_shape(records)
    scenario = scenario or trace_scenario(records)
    history = trace_history(records)
    header, result = records[0], records[-1]
    config = header.get("config", {})
    if match_threshold is None:
        match_threshold = config.get("match_threshold", 0.5)
    ablations = set(config.get("ablations", ()))
    eps = 1e-9

    poses = [scenario.start]
    for rec in history:
        if rec.t != len(poses) - 1:
            raise TraceCorrupt(f"history step {rec.t} out of order")
        poses.append(Pose.from_dict(rec.outcome["pose"]))

    # In-order satisfaction pointer, recorded per pose for key-point grading.
    targets = list(scenario.subtasks)
    k = 0
    pointer = []
    oracle = 0
    for p in poses:
        while k < len(targets) and _dist_to(scenario, targets[k], p) <= radius + eps:
            k += 1
        pointer.append(k)
        if any(_dist_to(scenario, t, p) <= radius + eps for t in targets):
            oracle = 1
    success = int(k == len(targets) and result.get("phase") == DONE)

    final = poses[-1]
    ne = _dist_to(scenario, targets[-1], final) if targets else 0.0
    moves = sum(1 for rec in history if rec.outcome["result"] == Outcome.MOVED.value)
    l_star = shortest_visit_length(scenario, radius) or 0.0

    key_decisions = []
    for kp in scenario.key_points:
        sub = int(kp["condition"]["subtask"])
        r, c = kp["expected"]["visit"]
        x, y = scenario.cell_center((c, r))
        # Counts only while sub-task `sub` was still open on arrival at the pose.
        hit = any((pointer[i - 1] if i else 0) <= sub - 1
                  for i, p in enumerate(poses) if math.hypot(p.x - x, p.y - y) <= radius + eps)
        key_decisions.append({"label": kp.get("label", ""), "correct": bool(hit)})

    counts = dict.fromkeys(COUNTERS, 0)
    done_at = {}
    for i, rec in enumerate(history):
        if i + 1 < len(history) and history[i + 1].subtask_index > rec.subtask_index:
            done_at.setdefault(rec.subtask_index, rec.t)
    if result.get("phase") == DONE and history:
        done_at.setdefault(history[-1].subtask_index, history[-1].t)
    reflecting = "no_reflection" not in ablations
    has_glass = scenario.has_glass()
    for rec in history:
        if reflecting and rec.action is not Action.STOP:
            counts["checks"] += 1
        for ev in rec.reflection_events:
            flag = ev.get("flag")
            if flag not in (CONFLICT, RISK, MISMATCH):
                continue
            counts["flagged"] += 1
            if flag == MISMATCH or _vetoed_blocked(scenario, rec.pose, ev.get("action")):
                counts["confirmed"] += 1
            counts["rollbacks"] += 1
            if rec.subtask_index in done_at:
                counts["rollback_success"] += 1
        ret = rec.retrieval
        if ret is not None and ret.get("similarity", 0.0) >= match_threshold:
            counts["retrievals"] += 1
            if has_glass and FAILURE_TOKENS & set(ret.get("tokens", ())):
                counts["retrievals_relevant"] += 1

    return EpisodeMetrics(
        NL=len(history), NE=ne, S=success, oracle_S=oracle or success,
        L=moves * scenario.cell_size, L_star=l_star,
        key_decisions=key_decisions, reflect_counts=counts,
    )


# -- reports ----------------------------------------------------------------------

def _mean(xs: Sequence[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def aggregate(rows: Sequence[dict]) -> dict:
    """Aggregates derivable from rows; checks SPL <= SR and OSR >= SR."""
    if not rows:
        raise EmptyInput("no rows to aggregate")
    ms = [r["metrics"] for r in rows]
    sr = 100.0 * sum(m["S"] for m in ms) / len(ms)
    osr = 100.0 * sum(m["oracle_S"] for m in ms) / len(ms)
    spl_rows = [m for m in ms if m["L_star"] > 0]
    spl_pct = 100.0 * spl(spl_rows) if spl_rows else None
    kp = [d["correct"] for m in ms for d in m["key_decisions"]]
    agg = {
        "NL": _mean([m["NL"] for m in ms]),
        "NE": _mean([m["NE"] for m in ms]),
        "SR": sr,
        "OSR": osr,
        "SPL": spl_pct,
        "KPA": _ratio(sum(kp), len(kp)),
        **reflection_metrics(ms),
        "episodes": len(ms),
    }
    if spl_pct is not None and spl_pct > sr + 1e-9:
        raise AssertionError("SPL exceeds SR")
    if osr + 1e-9 < sr:
        raise AssertionError("OSR below SR")
    return agg


@dataclass
class BenchReport:
    rows: list[dict]
    aggregate: dict
    config: dict
    ablations: list[str]
    repeats: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "aggregate": self.aggregate, "config": self.config,
                "ablations": self.ablations, "repeats": self.repeats}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_text(self) -> str:
        def fmt(v, spec=".2f"):
            return "N/A" if v is None else format(v, spec)

        head = f"{'scenario':<24}{'rep':>4}{'NL':>6}{'NE':>8}{'S':>3}{'OS':>4}{'L':>7}{'L*':>7}  status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            m = r["metrics"]
            lines.append(
                f"{r['scenario'][:23]:<24}{r['repeat']:>4}{m['NL']:>6}{m['NE']:>8.2f}{m['S']:>3}"
                f"{m['oracle_S']:>4}{m['L']:>7.1f}{m['L_star']:>7.1f}  {r['status']}"
                + (f" ({r['cause']})" if r.get("cause") else "")
            )
        a = self.aggregate
        lines += [
            "",
            f"{'NL':>8}{'NE':>8}{'SR%':>8}{'OSR%':>8}{'SPL%':>8}{'KPA%':>8}",
            f"{fmt(a['NL']):>8}{fmt(a['NE']):>8}{fmt(a['SR']):>8}{fmt(a['OSR']):>8}"
            f"{fmt(a['SPL']):>8}{fmt(a['KPA']):>8}",
            f"{'EDR%':>8}{'RA%':>8}{'RSR%':>8}{'MRA%':>8}",
            f"{fmt(a['EDR']):>8}{fmt(a['RA']):>8}{fmt(a['RSR']):>8}{fmt(a['MRA']):>8}",
            "",
            f"repeats: {self.repeats}  ablations: {', '.join(self.ablations) or 'none'}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")


# -- batch runner ---------------------------------------------------------------------

def _named(scenarios) -> list[tuple[str, Scenario]]:
    out = []
    for i, item in enumerate(scenarios):
        if isinstance(item, Scenario):
            out.append((f"s{i:03d}-{item.digest()[:8]}", item))
        else:
            out.append((str(item[0]), item[1]))
    return out


def _episode_job(job: tuple) -> tuple[dict, str | None]:
    name, scenario_doc, config_doc, repeat, radius, trace_path = job
    scenario = Scenario.from_dict(scenario_doc)
    config = EpisodeConfig.from_dict(config_doc)
    result = run_episode(scenario, config=config)
    if trace_path:
        result.trace.write(trace_path)
    metrics = score_episode(result.trace, scenario, radius)
    return _row(name, repeat, config, result, metrics), None


def _row(name, repeat, config, result, metrics) -> dict:
    return {
        "scenario": name,
        "repeat": repeat,
        "seed": config.noise.seed,
        "status": result.status,
        "cause": result.cause,
        "metrics": metrics.to_dict(),
    }


def run_bench(
    scenarios,
    repeats: int = 5,
    ablations: Iterable[str] = (),
    config: EpisodeConfig | None = None,
    *,
    team_factory: Callable | None = None,
    bank: ExperienceBank | None = None,
    jobs: int = 1,
    trace_dir: str | Path | None = None,
    base_seed: int | None = None,
) -> BenchReport:
    """Run repeats x scenarios episodes and aggregate them.

    Repeat r uses noise seed ``base_seed + r`` so paired comparisons across
    ablations see identical noise. A bank is read by every episode and, if
    ``config.learn`` is set, grown sequentially in scenario order.
    """
    named = _named(scenarios)
    if not named:
        raise EmptyInput("run_bench needs at least one scenario")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    config = config or EpisodeConfig()
    config = replace(config, ablations=frozenset(config.ablations) | frozenset(ablations))
    base = config.noise.seed if base_seed is None else base_seed
    radius = config.success_radius
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)

    jobs_list = []
    for repeat in range(repeats):
        cfg = replace(config, noise=replace(config.noise, seed=base + repeat))
        for name, sc in named:
            trace_path = str(Path(trace_dir) / f"{name}-r{repeat}.jsonl") if trace_dir is not None else None
            jobs_list.append((name, sc, cfg, repeat, trace_path))

    rows: list[dict] = []
    parallel = jobs > 1 and team_factory is None and bank is None
    if parallel:
        payload = [(n, sc.to_dict(), cfg.to_dict(), rep, radius, tp) for n, sc, cfg, rep, tp in jobs_list]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = [row for row, _ in pool.map(_episode_job, payload)]
    else:
        for name, sc, cfg, repeat, trace_path in jobs_list:
            team = team_factory(sc, cfg) if team_factory is not None else None
            result = run_episode(sc, team, cfg, bank, episode_id=f"{name}-r{repeat}")
            if trace_path:
                result.trace.write(trace_path)
            rows.append(_row(name, repeat, cfg, result, score_episode(result.trace, sc, radius)))
    return BenchReport(rows, aggregate(rows), config.to_dict(), sorted(config.ablations), repeats)


# -- suites ---------------------------------------------------------------------------

def oracle_suite(n: int = 100, start_seed: int = 0, **kwargs) -> list[tuple[str, Scenario]]:
    """Generated scenarios, seeds start_seed .. start_seed + n - 1, default 8x8."""
    return [(f"seed{s:03d}", generate_scenario(s, **kwargs)) for s in range(start_seed, start_seed + n)]


def _unique_names(rng: random.Random, count: int, used: set) -> list[str]:
    pool = [f"{c} {o}" for c in COLORS for o in OBJECTS if f"{c} {o}" not in used]
    names = rng.sample(pool, count)
    used.update(names)
    return names


def _finish(grid_rows, cell_size, landmarks, start, targets, multiplier) -> Scenario | None:
    grid = tuple("".join(r) for r in grid_rows)
    draft = Scenario(grid, cell_size, tuple(landmarks), start, instruction_for(targets), tuple(targets))
    path = shortest_visit_path(draft, 1.0)
    if path is None or len(path) < 2:
        return None
    budget = int(math.ceil(multiplier * (len(path) - 1) - 1e-9))
    return Scenario(grid, cell_size, tuple(landmarks), start, draft.instruction, tuple(targets),
                    _key_points(draft, path, 1.0), budget)


def glass_corridor_suite(n: int = 30, seed: int = 0, multiplier: float = 4.0) -> list[tuple[str, Scenario]]:
    """A wall splits the room; the straight line to the target crosses a glass door
    and the only real opening is a detour further along the wall."""
    rng = random.Random(seed)
    used: set = set()
    out = []
    i = 0
    while len(out) < n:
        w, h = rng.randint(8, 10), rng.randint(6, 8)
        wall_c = rng.randint(3, w - 4)
        door_r = rng.randint(1, h - 2)
        gap_choices = [r for r in range(h) if abs(r - door_r) >= 2]
        gap_r = rng.choice(gap_choices)
        rows = [[FREE] * w for _ in range(h)]
        for r in range(h):
            rows[r][wall_c] = OBSTACLE
        rows[door_r][wall_c] = GLASS
        rows[gap_r][wall_c] = FREE
        target_cell = (rng.randint(wall_c + 2, w - 1), door_r)
        start_cell = (rng.randint(0, wall_c - 2), door_r)
        other_cell = (rng.randint(0, wall_c - 1), rng.choice([r for r in range(h) if r != door_r]))
        names = _unique_names(rng, 2, used)
        landmarks = [Landmark(names[0], (target_cell,)), Landmark(names[1], (other_cell,))]
        sc = _finish(rows, 1.0, landmarks, Pose(float(start_cell[0]), float(start_cell[1]), 0),
                     [names[0]], multiplier)
        i += 1
        if sc is not None:
            out.append((f"glass{len(out):02d}", sc))
    return out


def revisit_suite(n: int = 20, seed: int = 0, multiplier: float = 4.0) -> list[tuple[str, Scenario]]:
    """U-shaped traps opening toward the start with the target hidden behind them."""
    rng = random.Random(seed)
    used: set = set()
    out = []
    while len(out) < n:
        w, h = rng.randint(9, 11), rng.randint(9, 11)
        depth = rng.randint(2, 3)
        half = rng.randint(1, 2)
        mid = rng.randint(half + 2, h - half - 3)
        back_c = rng.randint(depth + 2, w - 4)
        rows = [[FREE] * w for _ in range(h)]
        for r in range(mid - half - 1, mid + half + 2):
            rows[r][back_c] = OBSTACLE
        for c in range(back_c - depth, back_c + 1):
            rows[mid - half - 1][c] = OBSTACLE
            rows[mid + half + 1][c] = OBSTACLE
        target_cell = (rng.randint(back_c + 2, w - 1), mid)
        start_cell = (rng.randint(0, back_c - depth - 2), mid)
        names = _unique_names(rng, 2, used)
        other_cell = (rng.randint(0, w - 1), rng.choice([0, h - 1]))
        if rows[other_cell[1]][other_cell[0]] != FREE or other_cell == start_cell:
            continue
        landmarks = [Landmark(names[0], (target_cell,)), Landmark(names[1], (other_cell,))]
        sc = _finish(rows, 1.0, landmarks, Pose(float(start_cell[0]), float(start_cell[1]), 0),
                     [names[0]], multiplier)
        if sc is not None:
            out.append((f"trap{len(out):02d}", sc))
    return out


def glass_noise(seed: int = 0) -> NoiseConfig:
    return NoiseConfig(glass_blind=True, seed=seed)


def planted_bank(suite, config: EpisodeConfig | None = None) -> ExperienceBank:
    """Distil a bank from learning runs over `suite`, keeping only glass failures.

    Every entry in the result is relevant to a glass scenario, so any
    retrieval above threshold on the same suite should count as relevant.
    """
    config = config or EpisodeConfig(noise=glass_noise())
    config = replace(config, learn=True, ablations=frozenset())
    learnt = ExperienceBank()
    for name, sc in _named(suite):
        run_episode(sc, config=config, bank=learnt, episode_id=name)
    return ExperienceBank(e for e in learnt if e.reflective.cause_category == "misperception")
