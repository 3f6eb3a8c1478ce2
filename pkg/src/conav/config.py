"""Run configuration shared by the command-line entry points.

Precedence is command-line flag, then config file, then the defaults below.
The effective configuration ends up in every trace header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .agents import Team
from .errors import ConfigInvalid
from .llm import DECIDE, OBSERVE, PLAN, ROLES, VERIFY, RemoteConfig, remote_team
from .orchestrator import ABLATIONS, EpisodeConfig, scripted_team
from .reflection import DEFAULT_TAU_RISK
from .simworld import NoiseConfig, Scenario, shortest_visit_length

BACKENDS = ("scripted", "remote")


@dataclass
class RunConfig:
    scenarios: list = field(default_factory=list)
    agents: str = "scripted"
    roles: dict = field(default_factory=dict)  # role -> backend, overrides `agents`
    remote: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    tau: float | None = None
    tau_risk: float = DEFAULT_TAU_RISK
    delta: float | None = None
    success_radius: float = 1.0
    budget_multiplier: float | None = None
    history_window: int = 10
    evaluate_every_n: int = 1
    match_threshold: float = 0.5
    ablations: list = field(default_factory=list)
    glass_blind: bool = False
    distance_noise: float = 0.0
    full_maps: bool = False
    learn: bool = False
    bank: str | None = None
    trace: str | None = None
    report: str | None = None
    traces_dir: str | None = None
    repeat: int = 5
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.agents not in BACKENDS:
            raise ConfigInvalid(f"agents must be one of {BACKENDS}")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ConfigInvalid(f"unknown roles: {sorted(bad)}")
        if any(b not in BACKENDS for b in self.roles.values()):
            raise ConfigInvalid(f"role backends must be one of {BACKENDS}")
        bad = sorted(set(self.ablations) - set(ABLATIONS))
        if bad:
            raise ConfigInvalid(f"unknown ablation flags: {bad}")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigInvalid("seeds must be non-negative integers")
        if self.budget_multiplier is not None and self.budget_multiplier <= 0:
            raise ConfigInvalid("budget_multiplier must be > 0")
        if self.distance_noise < 0:
            raise ConfigInvalid("distance_noise must be >= 0")
        if self.repeat < 1:
            raise ConfigInvalid("repeat must be >= 1")
        if self.jobs < 1:
            raise ConfigInvalid("jobs must be >= 1")
        # Range checks for the episode knobs live in EpisodeConfig.
        self.episode_config()
        if "remote" in self.backends().values():
            self.remote_config()

    # -- construction --------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigInvalid("config file must hold a JSON object")
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # -- derived -----------------------------------------------------------
    def backends(self) -> dict:
        return {r: self.roles.get(r, self.agents) for r in ROLES}

    def remote_config(self) -> RemoteConfig:
        if not self.remote:
            raise ConfigInvalid("a remote backend needs the remote.base_url setting")
        try:
            return RemoteConfig.from_dict(self.remote)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def episode_config(self, scenario: Scenario | None = None, seed: int | None = None) -> EpisodeConfig:
        budget = None
        if scenario is not None and self.budget_multiplier is not None:
            l_star = shortest_visit_length(scenario, self.success_radius) or 0.0
            budget = int(math.ceil(self.budget_multiplier * l_star / scenario.cell_size - 1e-9))
        try:
            noise = NoiseConfig(self.glass_blind, self.distance_noise,
                                self.seeds[0] if seed is None else seed)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        return EpisodeConfig(
            tau=self.tau, tau_risk=self.tau_risk, delta=self.delta,
            success_radius=self.success_radius, evaluate_every_n=self.evaluate_every_n,
            history_window=self.history_window, budget=budget,
            ablations=frozenset(self.ablations), noise=noise, full_maps=self.full_maps,
            learn=self.learn, match_threshold=self.match_threshold,
        )

    def team(self, scenario: Scenario, config: EpisodeConfig) -> Team:
        """Per-role backend mix. All-scripted runs return the reference team."""
        chosen = self.backends()
        scripted = scripted_team(scenario, config)
        if "remote" not in chosen.values():
            return scripted
        rc = self.remote_config()
        remote = remote_team(rc, delta=config.delta_for(scenario))
        planner = scripted.planner
        if chosen[PLAN] == "remote" or chosen[VERIFY] == "remote":
            planner = _MixedPlanner(
                remote.planner if chosen[PLAN] == "remote" else scripted.planner,
                remote.planner if chosen[VERIFY] == "remote" else scripted.planner,
            )
        return Team(
            planner,
            remote.observer if chosen[OBSERVE] == "remote" else scripted.observer,
            remote.controller if chosen[DECIDE] == "remote" else scripted.controller,
        )


class _MixedPlanner:
    """Decomposition from one backend, verification from another."""

    def __init__(self, decomposer, verifier):
        self.decomposer = decomposer
        self.verifier = verifier

    def begin_episode(self, hook=None) -> None:
        for agent in {id(self.decomposer): self.decomposer, id(self.verifier): self.verifier}.values():
            start = getattr(agent, "begin_episode", None)
            if start is not None:
                start(hook)

    def plan(self, instruction):
        return self.decomposer.plan(instruction)

    def verify(self, subtask, env, history, pose, tau):
        return self.verifier.verify(subtask, env, history, pose, tau)
