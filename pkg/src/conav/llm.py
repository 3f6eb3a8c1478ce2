"""Remote text-model backend for the planner, observer, verifier and controller roles.

Requests go to a chat-completions style endpoint as
``{model, messages:[{role, content}], temperature}``. Replies must carry one
fenced ``json`` block; it is validated against the role's schema before it
is turned into a contract object, so a reply can never smuggle in an action
outside the four primitives or a sub-task without a target.

Every prompt carries a machine-readable context block (a fenced ``json``
block in the user message) next to the human-readable rendering. The stub
responder at the bottom of this module reads that block and answers with the
scripted agents, which is how the remote path is checked against the
scripted one.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from string import Template
from typing import Callable, Sequence

import jsonschema
import requests

from .agents import (
    Decision, EnvDescription, SubTask, SubTaskPlan, Team, Verification,
)
from .errors import (
    AuthError, BackendUnavailable, ConfigInvalid, Deadlock, MalformedReply, PlanEmpty,
    SchemaViolation,
)
from .mapper import DIRECTIONS
from .memory import HistoryRecord
from .simworld import Action, PerceptTuple, Pose, Scenario

log = logging.getLogger(__name__)

PLAN, OBSERVE, VERIFY, DECIDE = "plan", "observe", "verify", "decide"
ROLES = (PLAN, OBSERVE, VERIFY, DECIDE)


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    model_name: str = "default"
    api_key_env: str = "CONAV_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.0
    backoff_base: float = 1.0

    def __post_init__(self):
        if not self.base_url:
            raise ConfigInvalid("remote.base_url is required")
        if self.timeout <= 0:
            raise ConfigInvalid("remote.timeout_s must be > 0")
        if self.max_retries < 0:
            raise ConfigInvalid("remote.max_retries must be >= 0")
        if self.backoff_base < 0:
            raise ConfigInvalid("backoff base must be >= 0")

    @property
    def api_key(self) -> str | None:
        # Read from the environment only, never from a config file.
        return os.environ.get(self.api_key_env)

    @classmethod
    def from_dict(cls, d: dict) -> "RemoteConfig":
        keys = {"base_url": "base_url", "model": "model_name", "api_key_env": "api_key_env",
                "timeout_s": "timeout", "max_retries": "max_retries",
                "temperature": "temperature", "backoff_s": "backoff_base"}
        unknown = set(d) - set(keys)
        if unknown:
            raise ConfigInvalid(f"unknown remote keys: {sorted(unknown)}")
        return cls(**{keys[k]: v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {"base_url": self.base_url, "model": self.model_name, "api_key_env": self.api_key_env,
                "timeout_s": self.timeout, "max_retries": self.max_retries,
                "temperature": self.temperature, "backoff_s": self.backoff_base}


# -- transport ---------------------------------------------------------------

def complete(config: RemoteConfig, messages: Sequence[dict], *, session=None,
             sleep: Callable[[float], None] = time.sleep, rng: random.Random | None = None) -> str:
    """POST one chat request and return the first reply text.

    5xx answers, timeouts and connection errors are retried with exponential
    backoff (base, x2, plus up to 10% jitter). 401/403 fail at once.
    """
    http = session or requests
    rng = rng or random.Random(0)
    url = config.base_url.rstrip("/") + "/chat/completions"
    body = {"model": config.model_name, "messages": list(messages), "temperature": config.temperature}
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    last = "no attempt made"
    for attempt in range(config.max_retries + 1):
        if attempt:
            delay = config.backoff_base * 2 ** (attempt - 1)
            delay += rng.uniform(0, 0.1 * delay)
            log.warning("retry %d/%d after %s (sleep %.2fs)", attempt, config.max_retries, last, delay)
            sleep(delay)
        try:
            resp = http.post(url, json=body, headers=headers, timeout=config.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            last = type(exc).__name__
            continue
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint refused credentials ({resp.status_code})")
        if resp.status_code >= 500:
            last = f"HTTP {resp.status_code}"
            continue
        if resp.status_code >= 400:
            raise BackendUnavailable(f"endpoint rejected request ({resp.status_code}): {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedReply(f"unexpected response envelope: {exc}") from exc
    raise BackendUnavailable(f"{config.max_retries + 1} attempts failed; last error: {last}")


# -- schemas -----------------------------------------------------------------

_TEXT = {"type": "string", "pattern": r"\S"}

SCHEMAS = {
    PLAN: {
        "type": "object",
        "required": ["subtasks"],
        "additionalProperties": False,
        "properties": {"subtasks": {"type": "array", "items": {
            "type": "object",
            "required": ["index", "target", "description"],
            "additionalProperties": False,
            "properties": {"index": {"type": "integer", "minimum": 1},
                           "target": _TEXT, "description": {"type": "string"}},
        }}},
    },
    OBSERVE: {
        "type": "object",
        "required": ["summaries", "salient", "traversable_dirs"],
        "additionalProperties": False,
        "properties": {
            "summaries": {"type": "object", "additionalProperties": {"type": "string"}},
            "salient": {"type": "array", "items": {
                "type": "object",
                "required": ["name", "kind", "bearing", "distance", "task_relevant", "view"],
                "additionalProperties": False,
                "properties": {
                    "name": _TEXT,
                    "kind": {"enum": ["landmark", "obstacle"]},
                    "bearing": {"type": "number", "minimum": -180, "maximum": 180},
                    "distance": {"type": "number", "minimum": 0},
                    "task_relevant": {"type": "boolean"},
                    "view": {"enum": list(DIRECTIONS)},
                },
            }},
            "traversable_dirs": {"type": "array", "uniqueItems": True,
                                 "items": {"enum": list(DIRECTIONS)}},
        },
    },
    VERIFY: {
        "type": "object",
        "required": ["done", "progress"],
        "additionalProperties": False,
        "properties": {"done": {"type": "boolean"},
                       "progress": {"type": "number", "minimum": 0, "maximum": 1}},
    },
    DECIDE: {
        "type": "object",
        "required": ["action", "justification", "candidate_refs"],
        "additionalProperties": False,
        "properties": {
            "action": {"enum": [a.value for a in Action]},
            "justification": {"type": "string"},
            "candidate_refs": {"type": "array", "items": {"type": "string"}},
        },
    },
}

_FENCE = re.compile(r"```(?:json)?\s*\n?(.*?)```", re.DOTALL)


def extract_json(raw: str) -> dict:
    """First fenced JSON block of a reply."""
    m = _FENCE.search(raw or "")
    if m is None:
        raise MalformedReply("reply contains no fenced JSON block")
    try:
        data = json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        raise MalformedReply(f"JSON block does not parse: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaViolation("JSON block must be an object")
    return data


def parse_structured(raw: str, role: str, views: Sequence[PerceptTuple] = (), instruction: str = ""):
    """Validate a reply against the role schema and map it to the contract type."""
    if role not in SCHEMAS:
        raise ValueError(f"unknown role {role!r}")
    data = extract_json(raw)
    try:
        jsonschema.validate(data, SCHEMAS[role])
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"{path}: {exc.message}") from exc
    if role == PLAN:
        subtasks = [SubTask(st["index"], st["description"], st["target"]) for st in data["subtasks"]]
        try:
            return SubTaskPlan(instruction, subtasks)
        except ValueError as exc:
            raise SchemaViolation(str(exc)) from exc
    if role == OBSERVE:
        return EnvDescription.from_dict(data, views)
    if role == VERIFY:
        return Verification(data["done"], float(data["progress"]))
    return Decision(Action(data["action"]), data["justification"], tuple(data["candidate_refs"]))


# -- prompts -----------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    role: str
    system_text: str
    schema: dict
    max_history: int = 10

    def render(self, context: dict, **bindings) -> list[dict]:
        # substitute() raises on any unbound placeholder.
        system = Template(self.system_text).substitute(bindings)
        fields = ", ".join(self.schema["properties"])
        user = (
            f"{bindings.get('body', '')}\n\n"
            f"Context:\n```json\n{json.dumps(context, sort_keys=True)}\n```\n\n"
            f"Answer with exactly one fenced json block with the fields: {fields}."
        )
        return [{"role": "system", "content": system}, {"role": "user", "content": user.lstrip()}]


TEMPLATES = {
    PLAN: PromptTemplate(PLAN, (
        "You split navigation instructions into ordered landmark-centric steps. "
        "Each step names one target landmark and says in a few words how to reach it. "
        "Instruction: $instruction"), SCHEMAS[PLAN]),
    OBSERVE: PromptTemplate(OBSERVE, (
        "You describe what a ground robot sees in its four views (Front, Right, Back, Left). "
        "Keep landmarks and obstacles that matter for reaching '$target'; mark a view "
        "traversable only if its free range is at least $delta m."), SCHEMAS[OBSERVE]),
    VERIFY: PromptTemplate(VERIFY, (
        "You judge whether the robot has reached '$target'. Give progress in [0, 1] "
        "and set done when progress is at least $tau."), SCHEMAS[VERIFY]),
    DECIDE: PromptTemplate(DECIDE, (
        "You pick the next primitive for a ground robot heading for '$target'. "
        "Allowed actions: MoveForward, TurnLeft90, TurnRight90, Stop. Cite the map "
        "nodes you relied on in candidate_refs."), SCHEMAS[DECIDE]),
}


def percept_table(views: Sequence[PerceptTuple]) -> str:
    """Text rendering of the four views for the observe prompt."""
    lines = ["view  | walkable | free m | obstacles | landmarks"]
    for v in views:
        obs = ", ".join(f"{o.category}@{o.distance:g}m/{o.bearing:g}deg" for o in v.obstacles) or "-"
        lms = ", ".join(f"{lm.name}@{lm.distance:g}m/{lm.bearing:g}deg" for lm in v.landmarks) or "-"
        lines.append(f"{v.view:<5} | {str(v.traversability.walkable):<8} | "
                     f"{v.traversability.free_range:<6g} | {obs} | {lms}")
    return "\n".join(lines)


def _map_context(world_map) -> dict | None:
    if world_map is None:
        return None
    pose = world_map.pose if world_map.geometric else None
    node = world_map.node_at(pose) if pose is not None else None
    return {
        "geometric": world_map.geometric,
        "topological": world_map.topological,
        "pose": pose.to_dict() if pose is not None else None,
        "node": node,
        "neighbors": sorted(world_map.topo.adjacency.get(node or "", [])),
    }


# -- remote agents -------------------------------------------------------------

class _RemoteRole:
    """Shared call path: render, complete, parse, one reprompt on a bad reply."""

    role = ""

    def __init__(self, config: RemoteConfig, template: PromptTemplate | None = None, session=None):
        self.config = config
        self.template = template or TEMPLATES[self.role]
        self.session = session
        self.hook = None
        self.calls = 0

    def begin_episode(self, hook=None) -> None:
        self.hook = hook
        self.calls = 0

    def _emit(self, rec: dict) -> None:
        if self.hook is not None:
            self.hook(rec)

    def call(self, context: dict, bindings: dict, **parse_kw):
        messages = self.template.render(context, **bindings)
        for attempt in (1, 2):
            self.calls += 1
            raw = complete(self.config, messages, session=self.session)
            try:
                out = parse_structured(raw, self.role, **parse_kw)
            except MalformedReply as exc:
                self._emit({"role": self.role, "attempt": attempt, "prompt": messages,
                            "reply": raw, "error": f"{type(exc).__name__}: {exc}"})
                if attempt == 2:
                    raise
                messages = messages + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": f"Your reply was rejected ({exc}). "
                                                "Answer again with one valid fenced json block."},
                ]
                continue
            self._emit({"role": self.role, "attempt": attempt, "prompt": messages,
                        "reply": raw, "error": None})
            return out
        raise AssertionError("unreachable")


class RemotePlanner(_RemoteRole):
    role = PLAN

    def __init__(self, config: RemoteConfig, verify_config: RemoteConfig | None = None, session=None):
        super().__init__(config, session=session)
        self.verifier = _RemoteVerifier(verify_config or config, session=session)

    def begin_episode(self, hook=None) -> None:
        super().begin_episode(hook)
        self.verifier.begin_episode(hook)

    def plan(self, instruction: str) -> SubTaskPlan:
        if not instruction.strip():
            raise PlanEmpty("empty instruction")
        plan = self.call({"role": PLAN, "instruction": instruction},
                         {"instruction": instruction, "body": instruction}, instruction=instruction)
        if not plan.subtasks:
            raise PlanEmpty("remote planner returned no sub-tasks")
        return plan

    def verify(self, subtask, env, history, pose, tau) -> Verification:
        return self.verifier.verify(subtask, env, history, pose, tau)


class _RemoteVerifier(_RemoteRole):
    role = VERIFY

    def verify(self, subtask, env, history, pose, tau) -> Verification:
        recent = list(history)[-self.template.max_history:] if self.template.max_history else []
        context = {
            "role": VERIFY,
            "subtask": subtask.to_dict(),
            "pose": pose.to_dict(),
            "tau": tau,
            "env": env.digest() if env is not None else None,
            "history": [r.to_dict() for r in recent],
        }
        return self.call(context, {"target": subtask.target, "tau": tau,
                                   "body": f"Robot pose: {pose.to_dict()}"})


class RemoteObserver(_RemoteRole):
    role = OBSERVE

    def __init__(self, config: RemoteConfig, delta: float = 1.0, session=None):
        super().__init__(config, session=session)
        self.delta = delta

    def observe(self, views, subtask) -> EnvDescription:
        target = subtask.target if subtask is not None else ""
        context = {"role": OBSERVE, "subtask": subtask.to_dict() if subtask is not None else None,
                   "views": [v.to_dict() for v in views]}
        return self.call(context, {"target": target, "delta": self.delta, "body": percept_table(views)},
                         views=views)


class RemoteController(_RemoteRole):
    role = DECIDE

    def decide(self, subtask, env, world_map, history=()) -> Decision:
        if subtask is not None and not env.traversable_dirs:
            raise Deadlock("no traversable direction")
        recent = list(history)[-self.template.max_history:] if self.template.max_history else []
        context = {
            "role": DECIDE,
            "subtask": subtask.to_dict() if subtask is not None else None,
            "env": env.to_dict(),
            "views": [v.to_dict() for v in env.raw_views],
            "map": _map_context(world_map),
            "history": [r.to_dict() for r in recent],
        }
        target = subtask.target if subtask is not None else "nothing (all steps verified)"
        return self.call(context, {"target": target, "body": "\n".join(
            f"{k}: {v}" for k, v in sorted(env.summaries.items()))})


def remote_team(config: RemoteConfig, overrides: dict[str, RemoteConfig] | None = None,
                delta: float = 1.0, session=None) -> Team:
    """One endpoint for every role, unless a role has its own entry in `overrides`."""
    o = overrides or {}
    unknown = set(o) - set(ROLES)
    if unknown:
        raise ConfigInvalid(f"unknown roles in overrides: {sorted(unknown)}")
    return Team(
        RemotePlanner(o.get(PLAN, config), o.get(VERIFY, config), session=session),
        RemoteObserver(o.get(OBSERVE, config), delta, session=session),
        RemoteController(o.get(DECIDE, config), session=session),
    )


# -- stub endpoint -------------------------------------------------------------

def context_of(messages: Sequence[dict]) -> dict:
    """Machine-readable context block of the first user message."""
    user = next(m["content"] for m in messages if m["role"] == "user")
    return extract_json(user)


def fenced(payload: dict) -> str:
    return "```json\n" + json.dumps(payload) + "\n```"


@dataclass
class _MapView:
    """Just enough of a WorldMap for a controller running on the far side of the wire."""

    pose: Pose | None
    geometric: bool
    topological: bool
    node: str | None
    neighbors: list

    def __post_init__(self):
        self.topo = type("Topo", (), {})()
        self.topo.adjacency = {self.node: list(self.neighbors)} if self.node else {}

    def node_at(self, pose):
        return self.node


class ScriptedResponder:
    """Answers prompts with the scripted agents, rebuilt from the context block only.

    A plan request starts a new episode and resets controller memory.
    """

    def __init__(self, scenario: Scenario, config=None):
        from .orchestrator import EpisodeConfig, scripted_team

        self.scenario = scenario
        self.config = config or EpisodeConfig()
        self._make = lambda: scripted_team(scenario, self.config)
        self.team = self._make()

    def __call__(self, messages: Sequence[dict]) -> str:
        ctx = context_of(messages)
        role = ctx["role"]
        if role == PLAN:
            self.team = self._make()
            self.team.begin_episode(None)
            try:
                plan = self.team.planner.plan(ctx["instruction"])
            except PlanEmpty:
                return fenced({"subtasks": []})
            return fenced({"subtasks": [
                {"index": st.index, "target": st.target, "description": st.description}
                for st in plan.subtasks]})
        st = ctx.get("subtask")
        subtask = SubTask(st["index"], st["description"], st["target"], st["status"]) if st else None
        if role == OBSERVE:
            views = [PerceptTuple.from_dict(v) for v in ctx["views"]]
            env = self.team.observer.observe(views, subtask)
            return fenced(env.to_dict())
        history = [HistoryRecord.from_dict(r) for r in ctx["history"]]
        if role == VERIFY:
            v = self.team.planner.verify(subtask, None, history, Pose.from_dict(ctx["pose"]), ctx["tau"])
            return fenced({"done": bool(v.done), "progress": v.progress})
        views = [PerceptTuple.from_dict(v) for v in ctx["views"]]
        env = EnvDescription.from_dict(ctx["env"], views)
        m = ctx["map"]
        world_map = None if m is None else _MapView(
            Pose.from_dict(m["pose"]) if m["pose"] else None,
            m["geometric"], m["topological"], m["node"], m["neighbors"])
        d = self.team.controller.decide(subtask, env, world_map, history)
        return fenced(d.to_dict())


@dataclass
class StubServer:
    """Local chat-completions endpoint driven by a ``messages -> reply`` callable.

    ``script`` may queue ``(status, reply)`` pairs that are served before the
    responder is consulted; handy for retry and refusal tests.
    """

    responder: Callable[[Sequence[dict]], str]
    script: list = field(default_factory=list)
    requests: list = field(default_factory=list)

    def __enter__(self) -> "StubServer":
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(n))
                stub.requests.append({"path": self.path, "body": body,
                                      "auth": self.headers.get("Authorization")})
                if stub.script:
                    status, text = stub.script.pop(0)
                else:
                    status, text = 200, stub.responder(body["messages"])
                out = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]})
                data = out.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
