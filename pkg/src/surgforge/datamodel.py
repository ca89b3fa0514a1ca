"""Record types, conversation rendering, and JSONL serialization.

Every stage boundary is a JSONL file whose records are the frozen
dataclasses defined here. Writers sort by primary key so repeated runs
are byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .errors import InvalidConversation, ParseError, SchemaError

VIDEO_TOKEN = "<video>"
STOP_TOKEN = "<STOP>"

QA_KINDS = (
    "observation",
    "reasoning_reason",
    "reasoning_plan",
    "reasoning_deduction",
    "alignment",
)
PLACEMENTS = ("before_question", "after_question")
ROLES = ("user", "assistant")
ROLE_LABELS = {"user": "User", "assistant": "Assistant"}

_MISSING = object()


def _get(d: dict, name: str, types: type | tuple, optional: bool = False) -> Any:
    value = d.get(name, _MISSING)
    if value is _MISSING or (value is None and optional):
        if optional:
            return None
        raise SchemaError("missing required field", field=name)
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaError(f"expected {_type_name(types)}, got bool", field=name)
    if not isinstance(value, types):
        raise SchemaError(f"expected {_type_name(types)}, got {type(value).__name__}", field=name)
    return value


def _type_name(types: type | tuple) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def _text(d: dict, name: str, optional: bool = False) -> str | None:
    return _get(d, name, str, optional)


def _num(d: dict, name: str) -> float:
    return float(_get(d, name, (int, float)))


def _int(d: dict, name: str, optional: bool = False) -> int | None:
    return _get(d, name, int, optional)


def _list(d: dict, name: str) -> list:
    return _get(d, name, list)


def _nested(items: list, name: str, parse: Callable[[dict], Any]) -> list:
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaError("expected object", field=f"{name}[{i}]")
        try:
            out.append(parse(item))
        except SchemaError as exc:
            raise SchemaError(exc.reason, field=f"{name}[{i}].{exc.field}") from None
    return out


def _check(cond: bool, reason: str, field_name: str | None = None) -> None:
    if not cond:
        raise SchemaError(reason, field=field_name)


@dataclass(frozen=True)
class SurgicalProcedure:
    procedure_id: str
    title: str
    source_url: str
    category: str
    duration_s: float

    def __post_init__(self):
        _check(bool(self.procedure_id), "must be non-empty", "procedure_id")
        _check(self.duration_s >= 0, "must be non-negative", "duration_s")

    @property
    def key(self):
        return self.procedure_id

    def to_dict(self) -> dict:
        return {
            "procedure_id": self.procedure_id,
            "title": self.title,
            "source_url": self.source_url,
            "category": self.category,
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SurgicalProcedure:
        return cls(
            procedure_id=_text(d, "procedure_id"),
            title=_text(d, "title"),
            source_url=_text(d, "source_url"),
            category=_text(d, "category"),
            duration_s=_num(d, "duration_s"),
        )


@dataclass(frozen=True)
class VideoClip:
    clip_id: str
    procedure_id: str
    source_url: str
    start_s: float
    end_s: float
    index: int
    sub_minimum: bool = False

    def __post_init__(self):
        _check(0 <= self.start_s < self.end_s, "requires 0 <= start_s < end_s", "start_s")

    @property
    def key(self):
        return (self.procedure_id, self.index)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "procedure_id": self.procedure_id,
            "source_url": self.source_url,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "index": self.index,
            "sub_minimum": self.sub_minimum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> VideoClip:
        flag = d.get("sub_minimum", False)
        if not isinstance(flag, bool):
            raise SchemaError("expected bool", field="sub_minimum")
        return cls(
            clip_id=_text(d, "clip_id"),
            procedure_id=_text(d, "procedure_id"),
            source_url=_text(d, "source_url"),
            start_s=_num(d, "start_s"),
            end_s=_num(d, "end_s"),
            index=_int(d, "index"),
            sub_minimum=flag,
        )


@dataclass(frozen=True)
class TranscriptSegment:
    start_s: float
    end_s: float
    text: str

    def __post_init__(self):
        _check(self.start_s <= self.end_s, "requires start_s <= end_s", "start_s")
        _check(bool(self.text.strip()), "must be non-empty", "text")

    def to_dict(self) -> dict:
        return {"start_s": self.start_s, "end_s": self.end_s, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> TranscriptSegment:
        return cls(start_s=_num(d, "start_s"), end_s=_num(d, "end_s"), text=_text(d, "text"))


@dataclass(frozen=True)
class ClipTranscript:
    clip_id: str
    segments: tuple[TranscriptSegment, ...] = ()

    @property
    def text(self) -> str:
        return " ".join(s.text for s in self.segments)

    @property
    def key(self):
        return self.clip_id

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "text": self.text,
            "segments": [s.to_dict() for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClipTranscript:
        segments = tuple(_nested(_list(d, "segments"), "segments", TranscriptSegment.from_dict))
        out = cls(clip_id=_text(d, "clip_id"), segments=segments)
        if _text(d, "text") != out.text:
            raise SchemaError("text must equal the segment texts joined by spaces", field="text")
        return out


@dataclass(frozen=True)
class KnowledgeUnit:
    """One observation with the reason, plan and deduction attached to it."""

    observation: str
    reason: str | None = None
    plan: str | None = None
    deduction: str | None = None

    def __post_init__(self):
        _check(bool(self.observation), "must be non-empty", "observation")
        for name in ("reason", "plan", "deduction"):
            _check(getattr(self, name) != "", "optional fields are absent or non-empty", name)

    def to_dict(self) -> dict:
        return {
            "observation": self.observation,
            "reason": self.reason,
            "plan": self.plan,
            "deduction": self.deduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> KnowledgeUnit:
        return cls(
            observation=_text(d, "observation"),
            reason=_text(d, "reason", optional=True),
            plan=_text(d, "plan", optional=True),
            deduction=_text(d, "deduction", optional=True),
        )


@dataclass(frozen=True)
class ExtractedKnowledge:
    clip_id: str
    units: tuple[KnowledgeUnit, ...] = ()
    # bookkeeping only; not serialized
    attempts: int = field(default=1, compare=False)

    @property
    def key(self):
        return self.clip_id

    @property
    def observations(self) -> list[str]:
        return [u.observation for u in self.units]

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "units": [u.to_dict() for u in self.units]}

    @classmethod
    def from_dict(cls, d: dict) -> ExtractedKnowledge:
        units = tuple(_nested(_list(d, "units"), "units", KnowledgeUnit.from_dict))
        return cls(clip_id=_text(d, "clip_id"), units=units)


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    kind: str
    unit_index: int | None = None

    def __post_init__(self):
        _check(bool(self.question.strip()), "must be non-empty", "question")
        _check(bool(self.answer.strip()), "must be non-empty", "answer")
        _check(self.kind in QA_KINDS, f"unknown kind {self.kind!r}", "kind")
        if self.kind in ("observation", "alignment"):
            _check(self.unit_index is None, f"{self.kind} pairs carry no unit_index", "unit_index")


@dataclass(frozen=True)
class Turn:
    role: str
    content: str


@dataclass(frozen=True)
class Conversation:
    """A per-clip multi-turn conversation.

    Turn 1 content already carries the video placeholder on the side
    named by ``video_placement``. ``kind`` is the kind of the first pair;
    ``pair_kinds`` lists the kind of every round.
    """

    id: str
    clip_id: str
    source_url: str
    turns: tuple[Turn, ...]
    video_placement: str
    kind: str = "observation"
    pair_kinds: tuple[str, ...] = ()

    @property
    def key(self):
        return self.id

    @property
    def n_rounds(self) -> int:
        return len(self.turns) // 2

    def validate(self, video_token: str = VIDEO_TOKEN, stop_token: str = STOP_TOKEN) -> None:
        """Raise InvalidConversation unless every structural invariant holds."""
        turns = self.turns
        if len(turns) < 2 or len(turns) % 2:
            raise InvalidConversation(f"{self.id}: need an even number (>= 2) of turns, got {len(turns)}")
        for i, turn in enumerate(turns):
            expected = ROLES[i % 2]
            if turn.role != expected:
                raise InvalidConversation(f"{self.id}: turn {i + 1} role {turn.role!r}, expected {expected!r}")
            if not turn.content.strip():
                raise InvalidConversation(f"{self.id}: turn {i + 1} is empty")
            if stop_token in turn.content:
                raise InvalidConversation(f"{self.id}: turn {i + 1} contains the stop token")
            if "\n" in turn.content or "\r" in turn.content:
                raise InvalidConversation(f"{self.id}: turn {i + 1} spans several lines")
            if i > 0 and video_token in turn.content:
                raise InvalidConversation(f"{self.id}: video token outside turn 1 (turn {i + 1})")
        if self.video_placement not in PLACEMENTS:
            raise InvalidConversation(f"{self.id}: unknown video_placement {self.video_placement!r}")
        first = turns[0].content
        if first.count(video_token) != 1:
            raise InvalidConversation(f"{self.id}: turn 1 must contain the video token exactly once")
        question = question_of(first, self.video_placement, video_token)
        if question is None or not question.strip():
            raise InvalidConversation(
                f"{self.id}: turn 1 does not place the video token {self.video_placement.replace('_', ' ')}"
            )
        if self.pair_kinds and len(self.pair_kinds) != self.n_rounds:
            raise InvalidConversation(f"{self.id}: pair_kinds length differs from round count")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "clip_id": self.clip_id,
            "source_url": self.source_url,
            "video_placement": self.video_placement,
            "kind": self.kind,
            "pair_kinds": list(self.pair_kinds),
            "conversation": [{"role": t.role, "content": t.content} for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Conversation:
        turns = tuple(
            _nested(
                _list(d, "conversation"),
                "conversation",
                lambda t: Turn(role=_text(t, "role"), content=_text(t, "content")),
            )
        )
        kinds = d.get("pair_kinds", [])
        if not isinstance(kinds, list) or not all(isinstance(k, str) for k in kinds):
            raise SchemaError("expected list of str", field="pair_kinds")
        return cls(
            id=_text(d, "id"),
            clip_id=_text(d, "clip_id"),
            source_url=_text(d, "source_url"),
            turns=turns,
            video_placement=_text(d, "video_placement"),
            kind=_text(d, "kind"),
            pair_kinds=tuple(kinds),
        )


def with_video(question: str, placement: str, video_token: str = VIDEO_TOKEN) -> str:
    if placement == "before_question":
        return f"{video_token} {question}"
    if placement == "after_question":
        return f"{question} {video_token}"
    raise InvalidConversation(f"unknown video_placement {placement!r}")


def question_of(content: str, placement: str, video_token: str = VIDEO_TOKEN) -> str | None:
    """Strip the video token from turn-1 content; None if it is not where placement says."""
    if placement == "before_question" and content.startswith(video_token + " "):
        return content[len(video_token) + 1 :]
    if placement == "after_question" and content.endswith(" " + video_token):
        return content[: -len(video_token) - 1]
    return None


def render_conversation(
    conv: Conversation, video_token: str = VIDEO_TOKEN, stop_token: str = STOP_TOKEN
) -> str:
    conv.validate(video_token, stop_token)
    return "".join(f"{ROLE_LABELS[t.role]}: {t.content}{stop_token}\n" for t in conv.turns)


def parse_conversation(
    text: str,
    video_token: str = VIDEO_TOKEN,
    stop_token: str = STOP_TOKEN,
    **meta: Any,
) -> Conversation:
    """Inverse of :func:`render_conversation`.

    ``meta`` supplies the fields the rendered text does not carry
    (id, clip_id, source_url, kind, pair_kinds).
    """
    if not text:
        raise ParseError("no turns", 1, 1)
    lines = text.split("\n")
    if lines[-1]:
        raise ParseError("text must end with a newline", len(lines), len(lines[-1]) + 1)
    lines.pop()
    turns = []
    for lineno, line in enumerate(lines, start=1):
        role = ROLES[(lineno - 1) % 2]
        prefix = ROLE_LABELS[role] + ": "
        if not line.startswith(prefix):
            raise ParseError(f"expected {prefix!r}", lineno, 1)
        if not line.endswith(stop_token) or len(line) < len(prefix) + len(stop_token):
            raise ParseError("turn does not end with the stop token", lineno, len(line) + 1)
        content = line[len(prefix) : len(line) - len(stop_token)]
        if stop_token in content:
            raise ParseError("stop token inside a turn", lineno, len(prefix) + content.index(stop_token) + 1)
        if not content.strip():
            raise ParseError("empty turn", lineno, len(prefix) + 1)
        if lineno > 1 and video_token in content:
            raise ParseError("video token outside turn 1", lineno, len(prefix) + content.index(video_token) + 1)
        turns.append(Turn(role, content))
    if len(turns) % 2:
        raise ParseError("conversation ends without an assistant turn", len(lines) + 1, 1)

    first = turns[0].content
    column = len("User: ") + 1
    if first.count(video_token) != 1:
        raise ParseError("turn 1 must contain the video token exactly once", 1, column)
    if question_of(first, "before_question", video_token) is not None:
        placement = "before_question"
    elif question_of(first, "after_question", video_token) is not None:
        placement = "after_question"
    else:
        raise ParseError("video token must open or close turn 1", 1, column + first.index(video_token))

    fields = {"id": "", "clip_id": "", "source_url": "", "kind": "observation", "pair_kinds": ()}
    fields.update(meta)
    fields["pair_kinds"] = tuple(fields["pair_kinds"])
    conv = Conversation(turns=tuple(turns), video_placement=placement, **fields)
    conv.validate(video_token, stop_token)
    return conv


@dataclass(frozen=True)
class JudgeVerdict:
    id: str
    score: int
    matched: int
    total: int
    comment: str = ""

    def __post_init__(self):
        _check(0 <= self.score <= 5, "score must lie in [0, 5]", "score")
        _check(self.total >= 1, "total must be >= 1", "total")
        _check(0 <= self.matched <= self.total, "requires 0 <= matched <= total", "matched")

    @property
    def key(self):
        return self.id

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "score": self.score,
            "matched": self.matched,
            "total": self.total,
            "comment": self.comment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> JudgeVerdict:
        return cls(
            id=_text(d, "id"),
            score=_int(d, "score"),
            matched=_int(d, "matched"),
            total=_int(d, "total"),
            comment=_text(d, "comment"),
        )


@dataclass(frozen=True)
class MetricsReport:
    n_items: int
    mean_score: float
    accuracy_at_1: float
    accuracy_at_all: float
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "failures": self.failures,
            "mean_score": self.mean_score,
            "accuracy_at_1": self.accuracy_at_1,
            "accuracy_at_all": self.accuracy_at_all,
        }


@dataclass(frozen=True)
class ClipSkipped:
    clip_id: str
    stage: str
    reason: str

    @property
    def key(self):
        return (self.clip_id, self.stage, self.reason)

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "stage": self.stage, "reason": self.reason}

    @classmethod
    def from_dict(cls, d: dict) -> ClipSkipped:
        return cls(clip_id=_text(d, "clip_id"), stage=_text(d, "stage"), reason=_text(d, "reason"))


@dataclass(frozen=True)
class ClipFailed:
    """A work item that exhausted its retries. ``clip_id`` may name any item id."""

    clip_id: str
    stage: str
    reason: str
    attempts: int

    @property
    def key(self):
        return (self.clip_id, self.stage, self.reason)

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "stage": self.stage,
            "reason": self.reason,
            "attempts": self.attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClipFailed:
        return cls(
            clip_id=_text(d, "clip_id"),
            stage=_text(d, "stage"),
            reason=_text(d, "reason"),
            attempts=_int(d, "attempts"),
        )


# --- JSONL -------------------------------------------------------------------

T = TypeVar("T")


def dumps_record(record: Any) -> str:
    data = record.to_dict() if hasattr(record, "to_dict") else record
    return json.dumps(data, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(
    path: str | os.PathLike,
    records: Iterable[Any],
    key: Callable[[Any], Any] | None = None,
) -> None:
    """Write records one per line, sorted by primary key.

    Records are dataclasses exposing ``key`` and ``to_dict``, or plain
    dicts when ``key`` is given. The file is replaced atomically.
    """
    if key is None:
        key = lambda r: r.key  # noqa: E731
    rows = sorted(records, key=key)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for record in rows:
            fh.write(dumps_record(record))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path: str | os.PathLike, record_type: Callable[[dict], T] | type | None = None) -> list:
    """Read a JSONL file; ``record_type`` is a dataclass with ``from_dict``, a callable, or None for dicts."""
    if record_type is None:
        parse = lambda d: d  # noqa: E731
    elif hasattr(record_type, "from_dict"):
        parse = record_type.from_dict
    else:
        parse = record_type
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(data, dict):
                raise SchemaError("expected a JSON object", line=lineno)
            try:
                out.append(parse(data))
            except SchemaError as exc:
                raise SchemaError(exc.reason, line=lineno, field=exc.field) from None
    return out


def sorted_records(records: Sequence[T], key: Callable[[T], Any] | None = None) -> list[T]:
    return sorted(records, key=key or (lambda r: r.key))
