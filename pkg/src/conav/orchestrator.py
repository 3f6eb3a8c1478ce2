"""Master agent: the phase state machine and the episode loop.

The master is plain deterministic code. ``transition`` is the whole
scheduling policy; ``run_episode`` drives sub-agents through it and writes
every message and history record to a JSON Lines trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .agents import (
    FULL, NO_GEO, NO_TOPO, EnvDescription, ScriptedController, ScriptedObserver,
    ScriptedPlanner, SubTask, SubTaskPlan, Team, raw_description,
)
from .errors import (
    BackendUnavailable, ConfigInvalid, Deadlock, IllegalTransition, MalformedReply,
    NoAlternative, PlanEmpty, TraceCorrupt,
)
from .mapper import WorldMap
from .memory import ExperienceBank, History, HistoryRecord
from .reflection import (
    LocalVerdict, PASS, RISK, expected_outcome, global_reflect, local_check, micro_plan,
    mismatch_event, post_check, MISMATCH, DEFAULT_TAU_RISK,
    DEFAULT_STAGNATION_WINDOW, DEFAULT_OSCILLATION_LENGTH,
)
from .simworld import Action, NoiseConfig, Pose, Scenario, World

PLANNING, PERCEPTION, ACTION, EVALUATION, REFLECTION, DONE, FAILED = (
    "PLANNING", "PERCEPTION", "ACTION", "EVALUATION", "REFLECTION", "DONE", "FAILED",
)
PHASES = (PLANNING, PERCEPTION, ACTION, EVALUATION, REFLECTION, DONE, FAILED)
TERMINAL = (DONE, FAILED)

# Which role a phase's request envelopes go to.
PHASE_ROLE = {
    PLANNING: "planner",
    PERCEPTION: "observer",
    ACTION: "controller",
    EVALUATION: "planner",
    REFLECTION: "memory",
    DONE: "controller",  # terminal Stop request
}

ABLATIONS = ("no_planner", "no_observer", "no_memory", "no_reflection", "no_geo_map", "no_topo_map")


# -- state machine -------------------------------------------------------------

@dataclass(frozen=True)
class MasterState:
    phase: str = PLANNING
    current_index: int = 0
    plan_length: int = 0
    step: int = 0
    budget: int = 0
    deadlocks: int = 0
    cause: str | None = None

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class Event:
    kind: str
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.data}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        d = dict(d)
        return cls(d.pop("kind"), d)


def transition(state: MasterState, event: Event) -> MasterState:
    """Pure transition table. Raises IllegalTransition for any unlisted pair."""
    ph, k = state.phase, event.kind
    if k == "abort" and ph != FAILED:
        return replace(state, phase=FAILED, cause=event.data.get("cause", "aborted"))
    if ph == PLANNING:
        if k == "plan_ok":
            n = int(event.data["length"])
            if n < 1:
                raise IllegalTransition("plan_ok with an empty plan")
            return replace(state, phase=PERCEPTION, plan_length=n, current_index=1)
        if k == "plan_empty":
            return replace(state, phase=FAILED, cause="PlanEmpty")
    elif ph == PERCEPTION:
        if k == "observed":
            return replace(state, phase=ACTION)
    elif ph == ACTION:
        stepped = 1 if event.data.get("executed", True) else 0
        if k == "action_ok":
            return replace(state, phase=EVALUATION, step=state.step + stepped, deadlocks=0)
        if k == "action_failed":
            deadlock = event.data.get("reason") == "deadlock"
            return replace(state, phase=REFLECTION, step=state.step + stepped,
                           deadlocks=state.deadlocks + 1 if deadlock else 0)
    elif ph == REFLECTION:
        if k == "reflected":
            return replace(state, phase=PERCEPTION)
    elif ph == EVALUATION:
        if k == "verified":
            if not event.data.get("done"):
                return replace(state, phase=PERCEPTION)
            if state.current_index >= state.plan_length:
                return replace(state, phase=DONE)
            return replace(state, phase=PERCEPTION, current_index=state.current_index + 1)
    elif ph == DONE:
        if k == "stopped":
            return replace(state, step=state.step + 1)
    raise IllegalTransition(f"event {k!r} is not legal in phase {ph}")


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    tau: float | None = None  # None: derived from success_radius and the scenario diameter
    tau_risk: float = DEFAULT_TAU_RISK
    delta: float | None = None  # None: the scenario cell size
    success_radius: float = 1.0
    evaluate_every_n: int = 1
    history_window: int = 10
    budget: int | None = None  # None: the scenario's step_budget
    ablations: frozenset = frozenset()
    noise: NoiseConfig = NoiseConfig()
    full_maps: bool = False
    learn: bool = False
    match_threshold: float = 0.5
    stagnation_window: int = DEFAULT_STAGNATION_WINDOW
    oscillation_length: int = DEFAULT_OSCILLATION_LENGTH

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        bad = sorted(self.ablations - set(ABLATIONS))
        if bad:
            raise ConfigInvalid(f"unknown ablation flags: {bad}")
        if self.tau is not None and not 0.0 < self.tau <= 1.0:
            raise ConfigInvalid("tau must lie in (0, 1]")
        if not 0.0 <= self.tau_risk <= 1.0:
            raise ConfigInvalid("tau_risk must lie in [0, 1]")
        if self.delta is not None and self.delta <= 0:
            raise ConfigInvalid("delta must be positive")
        if self.success_radius <= 0:
            raise ConfigInvalid("success_radius must be positive")
        if self.evaluate_every_n < 1:
            raise ConfigInvalid("evaluate_every_n must be >= 1")
        if self.history_window < 0:
            raise ConfigInvalid("history_window must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ConfigInvalid("budget must be >= 0")
        if not 0.0 <= self.match_threshold <= 1.0:
            raise ConfigInvalid("match_threshold must lie in [0, 1]")
        if self.stagnation_window < 2 or self.oscillation_length < 2:
            raise ConfigInvalid("segmentation windows must be >= 2")

    def tau_for(self, scenario: Scenario) -> float:
        if self.tau is not None:
            return self.tau
        return max(0.0, 1.0 - self.success_radius / scenario.diameter)

    def delta_for(self, scenario: Scenario) -> float:
        return self.delta if self.delta is not None else scenario.cell_size

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items() if k not in ("ablations", "noise")}
        d["ablations"] = sorted(self.ablations)
        d["noise"] = dict(vars(self.noise))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        if "noise" in d and isinstance(d["noise"], dict):
            try:
                d["noise"] = NoiseConfig(**d["noise"])
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid(f"bad noise section: {exc}") from exc
        if "ablations" in d:
            d["ablations"] = frozenset(d["ablations"])
        return cls(**d)


def scripted_team(scenario: Scenario, config: EpisodeConfig | None = None) -> Team:
    """Reference backends. The planner sees the landmark table, never the grid."""
    config = config or EpisodeConfig()
    delta = config.delta_for(scenario)
    mode = FULL
    if "no_geo_map" in config.ablations:
        mode = NO_GEO
    elif "no_topo_map" in config.ablations:
        mode = NO_TOPO
    return Team(ScriptedPlanner.for_scenario(scenario), ScriptedObserver(delta),
                ScriptedController(delta, mode, scenario.diameter,
                                   (scenario.width, scenario.height)))


# -- trace -------------------------------------------------------------------

def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class Trace:
    """In-memory JSON Lines trace; `write` emits it byte-deterministically."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, rec: dict) -> None:
        self.records.append(rec)

    def text(self) -> str:
        return "".join(dumps_record(r) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")


def read_trace(path: str | Path) -> list[dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise TraceCorrupt(f"cannot read trace {path}: {exc}") from exc
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise TraceCorrupt(f"bad JSON in trace {path}: {exc}") from exc
    check_trace_shape(records)
    return records


def check_trace_shape(records: Sequence[dict]) -> None:
    if not records or records[0].get("kind") != "header":
        raise TraceCorrupt("trace has no header line")
    if records[-1].get("kind") != "result":
        raise TraceCorrupt("trace has no result line (incomplete episode)")


def trace_history(records: Iterable[dict]) -> list[HistoryRecord]:
    try:
        return [HistoryRecord.from_dict(r) for r in records if r.get("kind") == "history"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceCorrupt(f"bad history record: {exc}") from exc


def trace_scenario(records: Sequence[dict]) -> Scenario:
    try:
        return Scenario.from_dict(records[0]["scenario"])
    except (KeyError, IndexError, ValueError) as exc:
        raise TraceCorrupt(f"trace header has no usable scenario: {exc}") from exc


# -- episode -------------------------------------------------------------------

@dataclass
class EpisodeResult:
    scenario: Scenario
    state: MasterState
    history: list[HistoryRecord]
    trajectory: list[Pose]  # start pose plus the pose after every step
    plan: SubTaskPlan | None
    trace: Trace
    distilled: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return self.state.phase

    @property
    def cause(self) -> str | None:
        return self.state.cause

    @property
    def steps(self) -> int:
        return len(self.history)


class _Episode:
    """Mutable bookkeeping for one run of the loop."""

    def __init__(self, scenario, team, config, bank, trace):
        self.sc = scenario
        self.team = team
        self.cfg = config
        self.bank = bank
        self.trace = trace
        self.world = World(scenario, config.noise)
        self.delta = config.delta_for(scenario)
        self.tau = config.tau_for(scenario)
        ab = config.ablations
        self.map = None if "no_geo_map" in ab else WorldMap(
            self.delta, geometric=True, topological="no_topo_map" not in ab)
        self.history = History(sink=self._log_record)
        self.state = MasterState(budget=config.budget if config.budget is not None else scenario.step_budget)
        self.seq = 0
        self.trajectory = [self.world.pose]
        self.plan: SubTaskPlan | None = None
        self.env: EnvDescription | None = None
        self.pending_events: list[dict] = []
        self.pending_record: HistoryRecord | None = None
        self.heeded: set = set()
        self.evaluations = 0

    # -- plumbing ------------------------------------------------------------
    def _log_record(self, rec: HistoryRecord) -> None:
        d = rec.to_dict()
        d["kind"] = "history"
        self.trace.add(d)

    def llm_hook(self, rec: dict) -> None:
        self.trace.add({"kind": "llm", **rec})

    def send(self, sender: str, to: str, payload: dict, event: Event | None = None) -> None:
        self.seq += 1
        rec = {
            "kind": "envelope",
            "seq": self.seq,
            "from": sender,
            "to": to,
            "phase": self.state.phase,
            "payload": payload,
            "timestamp": self.world.steps,
        }
        if event is not None:
            rec["event"] = event.to_dict()
        self.trace.add(rec)
        if event is not None:
            self.state = transition(self.state, event)

    def request(self, payload: dict) -> None:
        self.send("master", PHASE_ROLE[self.state.phase], payload)

    def reply(self, payload: dict, event: Event) -> None:
        self.send(PHASE_ROLE[self.state.phase], "master", payload, event)

    def abort(self, cause: str) -> None:
        self.send("master", "master", {"type": "Abort", "cause": cause}, Event("abort", {"cause": cause}))

    @property
    def subtask(self) -> SubTask | None:
        return self.plan.active if self.plan is not None else None

    def window(self) -> list[HistoryRecord]:
        if "no_memory" in self.cfg.ablations:
            return []
        return self.history.window(self.cfg.history_window)

    def budget_left(self) -> bool:
        return self.world.steps < self.state.budget

    # -- phases ----------------------------------------------------------------
    def planning(self) -> None:
        instruction = self.sc.instruction
        self.request({"type": "PlanRequest", "instruction": instruction})
        try:
            if "no_planner" in self.cfg.ablations:
                if not instruction.strip():
                    raise PlanEmpty("empty instruction")
                self.plan = SubTaskPlan(instruction, [SubTask(1, instruction, instruction)])
            else:
                self.plan = self.team.planner.plan(instruction)
            if not self.plan.subtasks:
                raise PlanEmpty("planner returned no sub-tasks")
        except PlanEmpty as exc:
            self.reply({"type": "PlanReply", "error": str(exc)}, Event("plan_empty"))
            return
        self.reply({"type": "PlanReply", "plan": self.plan.to_dict()},
                   Event("plan_ok", {"length": len(self.plan)}))

    def perception(self) -> None:
        pose = self.world.pose
        views = self.world.perceive()
        st = self.subtask
        self.request({"type": "ObserveRequest", "subtask": st.to_dict(), "views": [v.to_dict() for v in views]})
        if "no_observer" in self.cfg.ablations:
            env = raw_description(views, self.delta)
        else:
            env = self.team.observer.observe(views, st)
        self.env = env
        if self.map is not None:
            if not self.map.geo.trajectory:
                self.map.record_pose(pose)
            walkable = [v.view in env.traversable_dirs for v in views]
            self.map.observe(pose, walkable)
        self.reply({"type": "ObserveReply", "env": env.to_dict()}, Event("observed"))

    def _observation_digest(self, st: SubTask | None) -> dict:
        d = self.env.digest() if self.env is not None else {}
        d["target"] = st.target if st is not None else ""
        return d

    def action(self) -> None:
        st, env = self.subtask, self.env
        pose = self.world.pose
        self.request({"type": "ActRequest", "subtask": st.to_dict(), "pose": pose.to_dict()})
        try:
            decision = self.team.controller.decide(st, env, self.map, self.window())
        except Deadlock as exc:
            self._deadlock(str(exc))
            return
        proposed = decision.action
        if proposed is Action.STOP:
            # Stop before verification would end the episode unverified; treat as a no-op turn request.
            proposed = Action.TURN_RIGHT
        events: list[dict] = []
        retrieval = None
        action = proposed
        reflect = "no_reflection" not in self.cfg.ablations
        if reflect:
            bank = None if "no_memory" in self.cfg.ablations else self.bank
            verdict = local_check(proposed, env, self.map, st, bank, self.cfg.tau_risk, self.delta)
            retrieval = verdict.retrieval
            if verdict.flag == RISK:
                # A stored risk is heeded once per pose; re-proposing the move means the
                # controller has re-planned with the warning on record.
                key = (pose.x, pose.y, pose.heading)
                if key in self.heeded:
                    verdict = LocalVerdict(PASS, f"risk {verdict.matched_id} already heeded here",
                                           retrieval=verdict.retrieval)
                else:
                    self.heeded.add(key)
            if verdict.flag != PASS:
                try:
                    action = micro_plan(verdict, env, proposed)
                except NoAlternative as exc:
                    events.append(verdict.event(proposed))
                    self._deadlock(str(exc), events)
                    return
                events.append(verdict.event(proposed, action))
        if not self.budget_left():
            self.abort("budget")
            return
        result = self.world.step(action)
        self.trajectory.append(result.pose)
        if self.map is not None:
            self.map.after_step(pose, result.pose)
        mismatch = False
        if reflect and post_check(expected_outcome(action, env, self.delta), result.outcome) == MISMATCH:
            mismatch = True
            events.append(mismatch_event(action, result.blocked_by))
        t = len(self.history)
        map_ref = self.map.to_dict() if (self.cfg.full_maps and self.map is not None) else {"ref": t}
        # Logged after EVALUATION/REFLECTION so the record carries the verifier's feedback.
        self.pending_record = HistoryRecord(
            t=t, pose=pose, action=action, observation=self._observation_digest(st),
            map_ref=map_ref,
            outcome={"result": result.outcome.value, "blocked_by": result.blocked_by,
                     "pose": result.pose.to_dict(), "progress": None},
            reflection_events=events, subtask_index=st.index, retrieval=retrieval,
        )
        payload = {"type": "ActReply", "decision": decision.to_dict(), "executed": action.value,
                   "outcome": result.outcome.value, "pose": result.pose.to_dict()}
        if mismatch:
            self.pending_events = events
            self.reply(payload, Event("action_failed", {"reason": "mismatch"}))
        else:
            self.reply(payload, Event("action_ok"))

    def _deadlock(self, why: str, events: list[dict] | None = None) -> None:
        self.pending_events = list(events or [])
        payload = {"type": "ActReply", "error": "Deadlock", "detail": why}
        self.reply(payload, Event("action_failed", {"reason": "deadlock", "executed": False}))
        if self.state.deadlocks >= 2 or "no_reflection" in self.cfg.ablations:
            self.abort("deadlock")

    def flush(self, progress: float | None = None) -> None:
        rec, self.pending_record = self.pending_record, None
        if rec is not None:
            rec.outcome["progress"] = progress
            self.history.log(rec)

    def reflection(self) -> None:
        self.flush()
        events, self.pending_events = self.pending_events, []
        self.send("master", "memory", {"type": "ReflectNotice", "events": events}, Event("reflected"))

    def evaluation(self) -> None:
        st = self.subtask
        self.evaluations += 1
        if self.evaluations % self.cfg.evaluate_every_n != 0:
            self.flush()
            self.send("master", "master", {"type": "VerifySkipped"}, Event("verified", {"done": False}))
            return
        pose = self.world.pose
        self.request({"type": "VerifyRequest", "subtask": st.to_dict(), "pose": pose.to_dict(), "tau": self.tau})
        v = self.team.planner.verify(st, self.env, self.window(), pose, self.tau)
        self.flush(v.progress)
        if v.done:
            self.plan.advance()
        self.reply({"type": "VerifyReply", "done": bool(v.done), "progress": v.progress},
                   Event("verified", {"done": bool(v.done)}))

    def stop(self) -> None:
        if not self.budget_left():
            self.abort("budget")
            return
        pose = self.world.pose
        self.request({"type": "ActRequest", "subtask": None, "pose": pose.to_dict()})
        decision = self.team.controller.decide(None, self.env, self.map, self.window())
        if decision.action is not Action.STOP:
            raise IllegalTransition("controller must Stop once every sub-task is verified")
        result = self.world.step(Action.STOP)
        self.trajectory.append(result.pose)
        t = len(self.history)
        self.history.log(HistoryRecord(
            t=t, pose=pose, action=Action.STOP, observation=self._observation_digest(None),
            map_ref={"ref": t}, outcome={"result": result.outcome.value, "blocked_by": None,
                                         "pose": result.pose.to_dict(), "progress": None},
            reflection_events=[], subtask_index=len(self.plan),
        ))
        self.reply({"type": "ActReply", "decision": decision.to_dict(), "executed": Action.STOP.value,
                    "outcome": result.outcome.value, "pose": result.pose.to_dict()}, Event("stopped"))

    def loop(self) -> None:
        if self.state.budget == 0:
            self.abort("budget")
            return
        try:
            self.planning()
            while self.state.phase not in TERMINAL:
                ph = self.state.phase
                if ph == PERCEPTION:
                    self.perception()
                elif ph == ACTION:
                    self.action()
                elif ph == REFLECTION:
                    self.reflection()
                elif ph == EVALUATION:
                    self.evaluation()
            if self.state.phase == DONE:
                self.stop()
        except (BackendUnavailable, MalformedReply) as exc:
            self.flush()
            if self.state.phase not in TERMINAL:
                self.abort(f"{type(exc).__name__}: {exc}")
            else:
                self.state = replace(self.state, phase=FAILED, cause=f"{type(exc).__name__}: {exc}")


def run_episode(
    scenario: Scenario,
    team: Team | None = None,
    config: EpisodeConfig | None = None,
    bank: ExperienceBank | None = None,
    episode_id: str | None = None,
) -> EpisodeResult:
    """Run one episode to DONE or FAILED and return its trace and final state.

    With ``config.learn`` set (and neither memory nor reflection ablated),
    global reflection distils the episode into ``bank`` at the end.
    """
    config = config or EpisodeConfig()
    team = team or scripted_team(scenario, config)
    trace = Trace()
    trace.add({
        "kind": "header",
        "scenario_hash": scenario.digest(),
        "scenario": scenario.to_dict(),
        "config": config.to_dict(),
        "code_version": __version__,
    })
    ep = _Episode(scenario, team, config, bank, trace)
    team.begin_episode(ep.llm_hook)
    ep.loop()

    distilled = []
    learn = config.learn and bank is not None and not ({"no_memory", "no_reflection"} & config.ablations)
    if learn and len(ep.history):
        eid = episode_id or f"{scenario.digest()[:8]}-s{config.noise.seed}"
        _, distilled = global_reflect(
            ep.history.records, ep.plan, scenario.instruction,
            failed=ep.state.phase == FAILED, episode_id=eid,
            stagnation_window=config.stagnation_window, oscillation_length=config.oscillation_length,
        )
        for entry in distilled:
            bank.store(entry)
        trace.add({"kind": "reflect", "stage": "global", "entries": [e.id for e in distilled]})

    trace.add({
        "kind": "result",
        "phase": ep.state.phase,
        "cause": ep.state.cause,
        "steps": ep.world.steps,
        "state": ep.state.to_dict(),
        "final_pose": ep.world.pose.to_dict(),
        "plan": ep.plan.to_dict() if ep.plan is not None else None,
    })
    return EpisodeResult(scenario, ep.state, list(ep.history.records), ep.trajectory, ep.plan, trace, distilled)


# -- replay -----------------------------------------------------------------------

def replay_transitions(records: Sequence[dict]) -> MasterState:
    """Re-drive the transition table from a trace's envelope events.

    Checks phase agreement and role binding on every envelope; raises
    IllegalTransition or TraceCorrupt on the first inconsistency.
    """
    check_trace_shape(records)
    header = records[0]
    budget = header["config"].get("budget")
    if budget is None:
        budget = header["scenario"]["step_budget"]
    state = MasterState(budget=budget)
    last_seq = 0
    for rec in records:
        if rec.get("kind") != "envelope":
            continue
        if rec["seq"] <= last_seq:
            raise TraceCorrupt(f"envelope seq not increasing at {rec['seq']}")
        last_seq = rec["seq"]
        if rec["phase"] != state.phase:
            raise IllegalTransition(f"envelope {rec['seq']} in phase {rec['phase']}, expected {state.phase}")
        if rec["from"] == "master" and rec["to"] != "master" and rec["to"] != PHASE_ROLE.get(state.phase):
            raise IllegalTransition(f"envelope {rec['seq']} targets {rec['to']} in phase {state.phase}")
        if "event" in rec:
            state = transition(state, Event.from_dict(rec["event"]))
    result = records[-1]
    if state.phase != result["phase"]:
        raise IllegalTransition(f"replay ends in {state.phase}, trace says {result['phase']}")
    if state.step != result["steps"]:
        raise IllegalTransition(f"replay counts {state.step} steps, trace says {result['steps']}")
    return state


def resimulate(records: Sequence[dict]) -> list[tuple[int, Pose, Pose]]:
    """Re-execute recorded actions on a fresh world; return (t, recorded, simulated) divergences."""
    scenario = trace_scenario(records)
    history = trace_history(records)
    noise = NoiseConfig(**records[0]["config"].get("noise", {}))
    world = World(scenario, noise)
    diverged = []
    if any(rec.t != i for i, rec in enumerate(history)):
        return [(-1, scenario.start, scenario.start)]
    for rec in history:
        if rec.pose != world.pose:
            diverged.append((rec.t, rec.pose, world.pose))
            break
        try:
            result = world.step(rec.action)
        except Exception:  # stepping after Stop counts as divergence
            diverged.append((rec.t, rec.pose, world.pose))
            break
        recorded = Pose.from_dict(rec.outcome["pose"])
        if result.pose != recorded or result.outcome.value != rec.outcome["result"]:
            diverged.append((rec.t, recorded, result.pose))
            break
    final = records[-1].get("final_pose")
    if not diverged and final is not None and Pose.from_dict(final) != world.pose:
        diverged.append((len(history), Pose.from_dict(final), world.pose))
    return diverged
