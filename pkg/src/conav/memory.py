"""Memory agent: history archiving, experience bank, and retrieval.

Features are bags of lowercased alphanumeric tokens compared by cosine
similarity. The bank persists as a single versioned JSON document.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import jsonschema

from .agents import tokenize
from .errors import CorruptBank, EmptyBank, OutOfOrder
from .simworld import Action, Pose

BANK_VERSION = 1
CAUSES = ("misperception", "spatial-misjudgment", "oscillation", "stagnation", "other")
NO_CORRECTION = "NoCorrection"

FeatureVector = Counter


def encode(source: str | Iterable[str]) -> Counter:
    """Bag-of-tokens counts. Accepts raw text or an iterable of text pieces."""
    if isinstance(source, str):
        return Counter(tokenize(source))
    out: Counter = Counter()
    for piece in source:
        out.update(tokenize(piece))
    return out


def norm(v: Mapping[str, int]) -> float:
    return math.sqrt(sum(c * c for c in v.values()))


def cosine(a: Mapping[str, int], b: Mapping[str, int]) -> float:
    na, nb = norm(a), norm(b)
    if na == 0 or nb == 0:
        return 0.0
    if len(a) > len(b):
        a, b = b, a
    return sum(c * b.get(t, 0) for t, c in a.items()) / (na * nb)


# -- history ------------------------------------------------------------------

@dataclass
class HistoryRecord:
    t: int
    pose: Pose
    action: Action
    observation: dict
    map_ref: dict
    outcome: dict
    reflection_events: list[dict] = field(default_factory=list)
    subtask_index: int = 1
    retrieval: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "t": self.t,
            "pose": self.pose.to_dict(),
            "action": self.action.value,
            "observation": self.observation,
            "map": self.map_ref,
            "outcome": self.outcome,
            "reflection_events": self.reflection_events,
            "subtask_index": self.subtask_index,
        }
        if self.retrieval is not None:
            d["retrieval"] = self.retrieval
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HistoryRecord":
        return cls(
            t=int(d["t"]),
            pose=Pose.from_dict(d["pose"]),
            action=Action(d["action"]),
            observation=d["observation"],
            map_ref=d["map"],
            outcome=d["outcome"],
            reflection_events=list(d.get("reflection_events", [])),
            subtask_index=int(d.get("subtask_index", 1)),
            retrieval=d.get("retrieval"),
        )


class History:
    """Append-only, strictly time-ordered episode history."""

    def __init__(self, sink: Callable[[HistoryRecord], None] | None = None):
        self._records: list[HistoryRecord] = []
        self._sink = sink

    def log(self, record: HistoryRecord) -> "History":
        expected = self._records[-1].t + 1 if self._records else 0
        if record.t != expected:
            raise OutOfOrder(f"expected t={expected}, got t={record.t}")
        self._records.append(record)
        if self._sink is not None:
            self._sink(record)
        return self

    def window(self, n: int) -> list[HistoryRecord]:
        return self._records[-n:] if n > 0 else []

    @property
    def records(self) -> tuple[HistoryRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]


# -- experience entries ----------------------------------------------------------

@dataclass(frozen=True)
class ReflectiveTuple:
    f_err_tokens: tuple[str, ...]
    a_err: str
    cause_category: str
    cause_text: str
    a_corr: str

    def __post_init__(self):
        if self.cause_category not in CAUSES:
            raise ValueError(f"unknown cause category {self.cause_category!r}")
        valid = {a.value for a in Action} | {NO_CORRECTION}
        if self.a_err not in valid or self.a_corr not in valid:
            raise ValueError("a_err/a_corr must be actions or NoCorrection")
        if self.a_err == self.a_corr and self.cause_category != "other":
            raise ValueError("a_err equals a_corr")

    def to_dict(self) -> dict:
        return {
            "f_err_tokens": list(self.f_err_tokens),
            "a_err": self.a_err,
            "cause": {"category": self.cause_category, "text": self.cause_text},
            "a_corr": self.a_corr,
        }


@dataclass(frozen=True)
class ExperienceEntry:
    id: str
    tokens: Mapping[str, int]
    context: Mapping[str, list]
    reflective: ReflectiveTuple

    def __post_init__(self):
        if not self.tokens or any(c < 1 for c in self.tokens.values()):
            raise ValueError("feature vector must be non-empty with counts >= 1")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tokens": dict(sorted(self.tokens.items())),
            "context": {k: list(self.context.get(k, [])) for k in ("poses", "actions", "observations")},
            "reflective": self.reflective.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceEntry":
        r = d["reflective"]
        return cls(
            id=d["id"],
            tokens=dict(d["tokens"]),
            context={k: list(d["context"][k]) for k in ("poses", "actions", "observations")},
            reflective=ReflectiveTuple(
                tuple(r["f_err_tokens"]), r["a_err"], r["cause"]["category"],
                r["cause"]["text"], r["a_corr"],
            ),
        )


_ACTIONS = [a.value for a in Action]
BANK_SCHEMA = {
    "type": "object",
    "required": ["version", "entries"],
    "properties": {
        "version": {"const": BANK_VERSION},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "tokens", "context", "reflective"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "tokens": {
                        "type": "object",
                        "minProperties": 1,
                        "additionalProperties": {"type": "integer", "minimum": 1},
                    },
                    "context": {
                        "type": "object",
                        "required": ["poses", "actions", "observations"],
                        "properties": {
                            "poses": {"type": "array"},
                            "actions": {"type": "array", "items": {"enum": _ACTIONS}},
                            "observations": {"type": "array"},
                        },
                    },
                    "reflective": {
                        "type": "object",
                        "required": ["f_err_tokens", "a_err", "cause", "a_corr"],
                        "properties": {
                            "f_err_tokens": {"type": "array", "items": {"type": "string"}},
                            "a_err": {"enum": _ACTIONS + [NO_CORRECTION]},
                            "a_corr": {"enum": _ACTIONS + [NO_CORRECTION]},
                            "cause": {
                                "type": "object",
                                "required": ["category", "text"],
                                "properties": {
                                    "category": {"enum": list(CAUSES)},
                                    "text": {"type": "string"},
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


class ExperienceBank:
    """Id-unique store of experience entries with cosine retrieval."""

    def __init__(self, entries: Iterable[ExperienceEntry] = ()):
        self._entries: dict[str, ExperienceEntry] = {}
        self._norms: dict[str, float] = {}
        for e in entries:
            self.store(e)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries[k] for k in sorted(self._entries))

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def __getitem__(self, entry_id: str) -> ExperienceEntry:
        return self._entries[entry_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperienceBank) and self.to_dict() == other.to_dict()

    def store(self, entry: ExperienceEntry) -> "ExperienceBank":
        self._entries[entry.id] = entry
        self._norms[entry.id] = norm(entry.tokens)
        return self

    def retrieve(self, query: Mapping[str, int], top_k: int = 1) -> list[tuple[ExperienceEntry, float]]:
        """Entries ranked by cosine similarity (desc), ties by id (asc)."""
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self._entries:
            raise EmptyBank("experience bank is empty")
        qn = norm(query)
        scored = []
        for eid, entry in self._entries.items():
            en = self._norms[eid]
            if qn == 0 or en == 0:
                s = 0.0
            else:
                s = sum(c * entry.tokens.get(t, 0) for t, c in query.items()) / (qn * en)
            # Rounded key so mathematically equal scores tie-break by id despite float noise.
            scored.append((-round(s, 12), eid, s))
        scored.sort()
        return [(self._entries[eid], s) for _, eid, s in scored[:top_k]]

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {"version": BANK_VERSION, "entries": [e.to_dict() for e in self]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    def persist(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperienceBank":
        try:
            jsonschema.validate(doc, BANK_SCHEMA)
            return cls(ExperienceEntry.from_dict(e) for e in doc["entries"])
        except (jsonschema.ValidationError, KeyError, TypeError, ValueError) as exc:
            raise CorruptBank(str(exc).splitlines()[0]) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperienceBank":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptBank(f"cannot read bank {path}: {exc}") from exc
        return cls.from_dict(doc)
