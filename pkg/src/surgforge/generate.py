"""Stage 2: question-answer generation from extracted knowledge and dataset export."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .datamodel import (
    PLACEMENTS,
    VIDEO_TOKEN,
    ClipFailed,
    Conversation,
    ExtractedKnowledge,
    QAPair,
    Turn,
    with_video,
    write_jsonl,
)
from .errors import EmptyConversationError, InvalidConversation, SchemaError, ValidationError
from .extract import strip_fence
from .llmclient import ChatClient, ChatRequest, Message
from .prompts import read_text
from .structured import StructuredCallFailed, StructuredPolicy, complete_structured

# (unit attribute, pair kind, label shown to the model)
REASONING_FIELDS = (
    ("reason", "reasoning_reason", "Reason"),
    ("plan", "reasoning_plan", "Plan"),
    ("deduction", "reasoning_deduction", "Deduction"),
)


@dataclass(frozen=True)
class GenerationPolicy:
    model: str = "llama-3-70b-instruct"
    temperature: float = 0.2
    max_tokens: int = 512
    retries: int = 2
    prompt_version: str = "v1"


def parse_qa(raw: str) -> tuple[str, str]:
    try:
        data = json.loads(strip_fence(raw))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"reply is not JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object with question and answer")
    out = []
    for name in ("question", "answer"):
        value = data.get(name)
        if not isinstance(value, str) or not value.strip():
            raise SchemaError("must be a non-empty string", field=name)
        # rendered turns are single lines
        out.append(" ".join(value.split()))
    return out[0], out[1]


def _request(system: str, user: str, tag: str, policy: GenerationPolicy) -> ChatRequest:
    return ChatRequest(
        model=policy.model,
        messages=(Message("system", system), Message("user", user)),
        temperature=policy.temperature,
        max_tokens=policy.max_tokens,
        request_tag=tag,
    )


def observation_prompt(
    title: str, knowledge: ExtractedKnowledge, policy: GenerationPolicy = GenerationPolicy(), prompt_root=None
) -> ChatRequest:
    listing = "\n".join(f"{i}. {obs}" for i, obs in enumerate(knowledge.observations, start=1))
    return _request(
        read_text("generation", policy.prompt_version, "observation.txt", prompt_root),
        f"Title: {title}\nObservations:\n{listing}",
        f"generate-observation:{knowledge.clip_id}",
        policy,
    )


def reasoning_prompt(
    title: str,
    knowledge: ExtractedKnowledge,
    unit_index: int,
    attr: str,
    policy: GenerationPolicy = GenerationPolicy(),
    prompt_root=None,
) -> ChatRequest:
    unit = knowledge.units[unit_index]
    label = {a: lab for a, _, lab in REASONING_FIELDS}[attr]
    description = " ".join(knowledge.observations)
    user = (
        f"Title: {title}\n"
        f"Video description: {description}\n"
        f"Observation: {unit.observation}\n"
        f"{label}: {getattr(unit, attr)}"
    )
    return _request(
        read_text("generation", policy.prompt_version, "reasoning.txt", prompt_root),
        user,
        f"generate-reasoning:{knowledge.clip_id}:{unit_index}:{attr}",
        policy,
    )


def gen_observation_qa(
    title: str,
    knowledge: ExtractedKnowledge,
    client: ChatClient,
    policy: GenerationPolicy = GenerationPolicy(),
    prompt_root=None,
) -> QAPair | ClipFailed:
    if not knowledge.units:
        raise ValueError("observation QA needs at least one unit")
    request = observation_prompt(title, knowledge, policy, prompt_root)
    try:
        (q, a), _ = complete_structured(client, request, parse_qa, StructuredPolicy(policy.retries))
    except StructuredCallFailed as exc:
        return ClipFailed(knowledge.clip_id, "generate", f"observation: {exc.reason}", exc.attempts)
    return QAPair(q, a, "observation")


def reasoning_slots(knowledge: ExtractedKnowledge) -> list[tuple[int, str, str]]:
    """``(unit_index, attribute, kind)`` for every present optional field, in emission order."""
    return [
        (i, attr, kind)
        for i, unit in enumerate(knowledge.units)
        for attr, kind, _ in REASONING_FIELDS
        if getattr(unit, attr) is not None
    ]


def gen_reasoning_qas(
    title: str,
    knowledge: ExtractedKnowledge,
    client: ChatClient,
    policy: GenerationPolicy = GenerationPolicy(),
    prompt_root=None,
) -> tuple[list[QAPair], list[ClipFailed]]:
    """One pair per present reason/plan/deduction. Failed pairs are returned separately."""
    pairs, failures = [], []
    for i, attr, kind in reasoning_slots(knowledge):
        request = reasoning_prompt(title, knowledge, i, attr, policy, prompt_root)
        try:
            (q, a), _ = complete_structured(client, request, parse_qa, StructuredPolicy(policy.retries))
        except StructuredCallFailed as exc:
            failures.append(ClipFailed(knowledge.clip_id, "generate", f"{kind}[{i}]: {exc.reason}", exc.attempts))
            continue
        pairs.append(QAPair(q, a, kind, unit_index=i))
    return pairs, failures


def placement_for(clip_id: str, seed: int) -> str:
    """Seeded fair coin keyed on the clip id alone."""
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode("utf-8")).digest()
    return PLACEMENTS[digest[0] & 1]


def conversation_id(clip_id: str) -> str:
    return f"conv-{clip_id}"


def assemble_conversation(
    clip,
    qas: Sequence[QAPair],
    seed: int = 0,
    video_token: str = VIDEO_TOKEN,
) -> Conversation:
    """Stack pairs into turns; the video token goes with the first question only.

    ``clip`` needs ``clip_id`` and ``source_url`` attributes.
    """
    if not qas:
        raise EmptyConversationError(f"{clip.clip_id}: no question-answer pairs")
    if any(qa.kind == "observation" for qa in qas[1:]):
        raise InvalidConversation(f"{clip.clip_id}: the observation pair must come first")
    placement = placement_for(clip.clip_id, seed)
    turns = []
    for t, qa in enumerate(qas):
        question = with_video(qa.question, placement, video_token) if t == 0 else qa.question
        turns.append(Turn("user", question))
        turns.append(Turn("assistant", qa.answer))
    return Conversation(
        id=conversation_id(clip.clip_id),
        clip_id=clip.clip_id,
        source_url=clip.source_url,
        turns=tuple(turns),
        video_placement=placement,
        kind=qas[0].kind,
        pair_kinds=tuple(qa.kind for qa in qas),
    )


def generate_clip(
    title: str,
    clip,
    knowledge: ExtractedKnowledge,
    client: ChatClient,
    policy: GenerationPolicy = GenerationPolicy(),
    seed: int = 0,
    video_token: str = VIDEO_TOKEN,
    prompt_root=None,
) -> tuple[Conversation | None, list[ClipFailed]]:
    """Observation pair first, then reasoning pairs. No conversation without the observation pair."""
    first = gen_observation_qa(title, knowledge, client, policy, prompt_root)
    if isinstance(first, ClipFailed):
        return None, [first]
    pairs, failures = gen_reasoning_qas(title, knowledge, client, policy, prompt_root)
    return assemble_conversation(clip, [first, *pairs], seed, video_token), failures


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def export_dataset(
    conversations: Sequence[Conversation],
    path,
    video_token: str = VIDEO_TOKEN,
    **provenance,
) -> dict:
    """Validate, write sorted by id, and describe the file.

    ``provenance`` (prompt versions, seeds, backend) is copied into the manifest.
    """
    for conv in conversations:
        try:
            conv.validate(video_token)
        except InvalidConversation as exc:
            raise ValidationError(conv.id, str(exc)) from None
    ids = Counter(c.id for c in conversations)
    dupes = sorted(i for i, n in ids.items() if n > 1)
    if dupes:
        raise ValidationError(dupes[0], "duplicate conversation id")
    path = Path(path)
    write_jsonl(path, conversations)
    pair_counts = Counter(k for c in conversations for k in c.pair_kinds)
    return {
        "file": path.name,
        "total": len(conversations),
        "by_kind": dict(sorted(Counter(c.kind for c in conversations).items())),
        "pairs": sum(pair_counts.values()),
        "pairs_by_kind": dict(sorted(pair_counts.items())),
        "placements": dict(sorted(Counter(c.video_placement for c in conversations).items())),
        "sha256": file_digest(path),
        **provenance,
    }
