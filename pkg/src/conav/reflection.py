"""Dual-stage reflection.

Local stage: every proposed action is checked against the current
environment description and the experience bank before execution, and its
outcome is compared with the expectation afterwards.

Global stage: after the episode the history is segmented at sub-task
completions, stagnations and oscillations, and the problematic segments are
distilled into experience entries.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .agents import EnvDescription, SubTask, SubTaskPlan
from .errors import EmptyBank, NoAlternative
from .memory import (
    NO_CORRECTION,
    ExperienceBank,
    ExperienceEntry,
    HistoryRecord,
    ReflectiveTuple,
    encode,
)
from .simworld import Action, Outcome

PASS, CONFLICT, RISK = "Pass", "Conflict", "Risk"
MISMATCH = "mismatch"

PROGRESS, STAGNATION, OSCILLATION, FAILURE = "progress", "stagnation", "oscillation", "failure"
LABELS = (PROGRESS, STAGNATION, OSCILLATION, FAILURE)

DEFAULT_TAU_RISK = 0.75
DEFAULT_STAGNATION_WINDOW = 6
DEFAULT_OSCILLATION_LENGTH = 4


@dataclass(frozen=True)
class LocalVerdict:
    flag: str
    reason: str
    matched_id: str | None = None
    similarity: float | None = None
    matched_a_err: str | None = None
    matched_a_corr: str | None = None
    retrieval: dict | None = None  # head of the bank lookup, flagged or not

    def __post_init__(self):
        if self.flag == RISK and self.matched_id is None:
            raise ValueError("Risk verdict needs a matched experience")

    def event(self, action: Action, replacement: Action | None = None) -> dict:
        return {
            "kind": "reflect",
            "stage": "local",
            "flag": self.flag,
            "reason": self.reason,
            "matched_id": self.matched_id,
            "similarity": self.similarity,
            "action": action.value,
            "replacement": replacement.value if replacement is not None else None,
        }


def front_blocked(env: EnvDescription, delta: float) -> bool:
    return "Front" not in env.traversable_dirs or env.free_range("Front") < delta - 1e-9


def local_check(
    action: Action,
    env: EnvDescription,
    world_map=None,
    subtask: SubTask | None = None,
    bank: ExperienceBank | None = None,
    tau_risk: float = DEFAULT_TAU_RISK,
    delta: float = 1.0,
) -> LocalVerdict:
    """Pre-execution check of a proposed action. Rotations and Stop always pass."""
    action = Action(action)
    if action is not Action.MOVE_FORWARD:
        return LocalVerdict(PASS, "rotation or stop cannot collide")
    if front_blocked(env, delta):
        return LocalVerdict(
            CONFLICT,
            f"forward move against a front free range of {env.free_range('Front'):.1f} m",
        )
    if bank is None or len(bank) == 0:
        return LocalVerdict(PASS, "front is clear")
    # The risk query looks where the robot is about to go: target plus front-view names.
    query = encode(env.scene_tokens(subtask.target if subtask else "", "Front"))
    try:
        head, score = bank.retrieve(query, 1)[0]
    except EmptyBank:
        return LocalVerdict(PASS, "front is clear")
    retrieval = {"id": head.id, "similarity": score, "tokens": sorted(head.tokens)}
    if score > tau_risk:
        return LocalVerdict(
            RISK,
            f"scene matches stored failure {head.id} ({head.reflective.cause_category})",
            head.id, score, head.reflective.a_err, head.reflective.a_corr, retrieval,
        )
    return LocalVerdict(PASS, "front is clear", retrieval=retrieval)


_TURN_DIR = {Action.TURN_RIGHT: "Right", Action.TURN_LEFT: "Left"}


def micro_plan(verdict: LocalVerdict, env: EnvDescription, original: Action) -> Action:
    """Substitute a vetoed action; never returns `original`."""
    original = Action(original)
    if verdict.flag == PASS:
        raise ValueError("micro_plan needs a Conflict or Risk verdict")
    if verdict.flag == RISK and verdict.matched_a_err == original.value:
        corr = verdict.matched_a_corr
        if corr not in (None, NO_CORRECTION) and corr != original.value:
            corr = Action(corr)
            if corr is not Action.MOVE_FORWARD or "Front" in env.traversable_dirs:
                return corr
    for alt in (Action.TURN_RIGHT, Action.TURN_LEFT):
        if alt is not original and _TURN_DIR[alt] in env.traversable_dirs:
            return alt
    if "Back" in env.traversable_dirs:
        return Action.TURN_RIGHT if original is not Action.TURN_RIGHT else Action.TURN_LEFT
    raise NoAlternative("no traversable alternative to the vetoed action")


def expected_outcome(action: Action, env: EnvDescription, delta: float = 1.0) -> Outcome:
    action = Action(action)
    if action is Action.MOVE_FORWARD:
        return Outcome.BLOCKED if front_blocked(env, delta) else Outcome.MOVED
    if action is Action.STOP:
        return Outcome.STOPPED
    return Outcome.TURNED


def post_check(expected: Outcome, actual: Outcome) -> str:
    if Outcome(expected) is Outcome.MOVED and Outcome(actual) is Outcome.BLOCKED:
        return MISMATCH
    return "ok"


def mismatch_event(action: Action, blocked_by: str | None) -> dict:
    return {
        "kind": "reflect",
        "stage": "local",
        "flag": MISMATCH,
        "reason": f"expected to move but collided with {blocked_by or 'something'}",
        "matched_id": None,
        "similarity": None,
        "action": Action(action).value,
        "replacement": None,
    }


# -- global reflection -------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    start_t: int
    end_t: int
    label: str

    def __len__(self) -> int:
        return self.end_t - self.start_t + 1


@dataclass
class Episode:
    segments: list[Segment]
    attribution: dict[int, ReflectiveTuple] = field(default_factory=dict)  # keyed by start_t


def _runs(flags: Sequence[bool]) -> list[tuple[int, int]]:
    out, start = [], None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i - 1))
            start = None
    return out


def _oscillations(records: Sequence[HistoryRecord], min_len: int) -> list[tuple[int, int]]:
    out = []
    i, n = 0, len(records)
    turns = (Action.TURN_LEFT, Action.TURN_RIGHT)
    while i < n:
        j = i
        if records[i].action in turns:
            while j + 1 < n and records[j + 1].action in turns and records[j + 1].action != records[j].action:
                j += 1
        if j - i + 1 >= min_len:
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def _stagnations(records: Sequence[HistoryRecord], min_len: int, taken: set[int]) -> list[tuple[int, int]]:
    out = []
    i, n = 0, len(records)
    while i < n:
        j = i
        while (j + 1 < n and j + 1 not in taken and i not in taken
               and (records[j + 1].pose.x, records[j + 1].pose.y) == (records[i].pose.x, records[i].pose.y)):
            j += 1
        if i not in taken and j - i + 1 >= min_len:
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def segment_history(
    records: Sequence[HistoryRecord],
    failed: bool = False,
    stagnation_window: int = DEFAULT_STAGNATION_WINDOW,
    oscillation_length: int = DEFAULT_OSCILLATION_LENGTH,
) -> list[Segment]:
    """Partition record indices [0, T] into labelled segments."""
    if not records:
        return []
    chunks, a = [], 0
    for i in range(len(records) - 1):
        if records[i + 1].subtask_index > records[i].subtask_index:
            chunks.append((a, i))
            a = i + 1
    chunks.append((a, len(records) - 1))

    segments: list[Segment] = []
    for a, b in chunks:
        part = records[a:b + 1]
        labels = [PROGRESS] * len(part)
        for s, e in _oscillations(part, oscillation_length):
            labels[s:e + 1] = [OSCILLATION] * (e - s + 1)
        taken = {i for i, lab in enumerate(labels) if lab != PROGRESS}
        for s, e in _stagnations(part, stagnation_window, taken):
            labels[s:e + 1] = [STAGNATION] * (e - s + 1)
        for i, rec in enumerate(part):
            if labels[i] == PROGRESS and any(ev.get("flag") == MISMATCH for ev in rec.reflection_events):
                labels[i] = FAILURE
        i = 0
        while i < len(part):
            j = i
            # Failure segments stay one record long; other labels merge.
            while labels[i] != FAILURE and j + 1 < len(part) and labels[j + 1] == labels[i]:
                j += 1
            segments.append(Segment(part[i].t, part[j].t, labels[i]))
            i = j + 1
    if failed and segments[-1].label == PROGRESS:
        last = segments.pop()
        segments.append(Segment(last.start_t, last.end_t, FAILURE))
    return segments


def _dominant_tokens(records: Sequence[HistoryRecord], limit: int = 6) -> list[str]:
    counts: Counter = Counter()
    for rec in records:
        obs = rec.observation or {}
        names = obs.get("front", obs.get("salient", []))
        counts.update(encode([obs.get("target", "")] + list(names)))
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]]


def _attribute(label: str, part: Sequence[HistoryRecord], next_rec: HistoryRecord | None) -> ReflectiveTuple:
    blockers = [r.outcome.get("blocked_by") for r in part if r.outcome.get("result") == Outcome.BLOCKED.value]
    blockers = [b for b in blockers if b]
    if any("glass" in b for b in blockers):
        cause = "misperception"
        text = "collided with a glass door that perception reported as free space"
    elif label == OSCILLATION:
        cause, text = "oscillation", "alternating turns without progress"
    elif blockers:
        cause = "spatial-misjudgment"
        text = f"repeatedly drove into a {Counter(blockers).most_common(1)[0][0]}"
    elif label == STAGNATION:
        cause, text = "stagnation", "no displacement over a prolonged window"
    else:
        cause, text = "other", "episode ended without completing the instruction"

    order = [a for a in Action]
    pool = [r.action for r in part if r.outcome.get("result") == Outcome.BLOCKED.value] or [r.action for r in part]
    freq = Counter(pool)
    a_err = max(order, key=lambda a: (freq[a], -order.index(a))).value
    a_corr = next_rec.action.value if next_rec is not None else NO_CORRECTION
    if a_corr == a_err and cause != "other":
        a_corr = NO_CORRECTION
    f_err = _dominant_tokens(part)
    for b in blockers:
        for tok in encode(b):
            if tok not in f_err:
                f_err.append(tok)
    return ReflectiveTuple(tuple(f_err), a_err, cause, text, a_corr)


def global_reflect(
    history: Sequence[HistoryRecord],
    plan: SubTaskPlan | None = None,
    instruction: str = "",
    *,
    failed: bool = False,
    episode_id: str = "ep",
    stagnation_window: int = DEFAULT_STAGNATION_WINDOW,
    oscillation_length: int = DEFAULT_OSCILLATION_LENGTH,
) -> tuple[Episode, list[ExperienceEntry]]:
    """Segment an ended episode and distil its problem segments into entries."""
    records = list(history)
    segments = segment_history(records, failed, stagnation_window, oscillation_length)
    episode = Episode(segments)
    entries = []
    seen = set()
    index = {rec.t: i for i, rec in enumerate(records)}
    for seg in segments:
        if seg.label == PROGRESS:
            continue
        lo, hi = index[seg.start_t], index[seg.end_t]
        part = records[lo:hi + 1]
        nxt = records[hi + 1] if hi + 1 < len(records) else None
        tup = _attribute(seg.label, part, nxt)
        if not tup.f_err_tokens:
            tup = ReflectiveTuple(tuple(encode(instruction)) or ("unknown",), tup.a_err,
                                  tup.cause_category, tup.cause_text, tup.a_corr)
        episode.attribution[seg.start_t] = tup
        tokens = encode(list(tup.f_err_tokens) + [tup.cause_category])
        # Repeats of the same failure within one episode collapse to the first entry.
        signature = (tuple(sorted(tokens.items())), tup.a_err, tup.cause_category)
        if signature in seen:
            continue
        seen.add(signature)
        entries.append(ExperienceEntry(
            id=f"{episode_id}-{seg.label}-{seg.start_t:04d}",
            tokens=dict(tokens),
            context={
                "poses": [r.pose.to_dict() for r in part],
                "actions": [r.action.value for r in part],
                "observations": [r.observation for r in part],
            },
            reflective=tup,
        ))
    return episode, entries
