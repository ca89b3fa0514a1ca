"""Stage 1: structured knowledge extraction from clip transcripts.

This stage only extracts; it never writes questions or answers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

from .datamodel import ClipFailed, ClipSkipped, ClipTranscript, ExtractedKnowledge, KnowledgeUnit
from .errors import SchemaError
from .llmclient import ChatClient, ChatRequest, Message
from .prompts import FewShot, load_fewshot, read_text
from .structured import StructuredCallFailed, StructuredPolicy, complete_structured

UNIT_FIELDS = ("observation", "reason", "plan", "deduction")
_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


@dataclass(frozen=True)
class ExtractionPolicy:
    min_words: int = 10
    retries: int = 2
    model: str = "llama-3-70b-instruct"
    temperature: float = 0.0
    max_tokens: int = 1024
    prompt_version: str = "v1"


def query_text(title: str, transcript: str) -> str:
    return f"Title: {title}\nTranscript: {transcript}"


def build_extraction_prompt(
    title: str,
    clip_transcript: ClipTranscript | str,
    fewshot_set: Sequence[FewShot] | None = None,
    policy: ExtractionPolicy = ExtractionPolicy(),
    prompt_root=None,
) -> ChatRequest:
    """System instruction, few-shot turns, then the query for this clip.

    ``fewshot_set=None`` loads the few-shot examples of ``policy.prompt_version``.
    """
    if isinstance(clip_transcript, ClipTranscript):
        clip_id, text = clip_transcript.clip_id, clip_transcript.text
    else:
        clip_id, text = "", clip_transcript
    if fewshot_set is None:
        fewshot_set = load_fewshot(policy.prompt_version, prompt_root)
    messages = [Message("system", read_text("extraction", policy.prompt_version, "system.txt", prompt_root))]
    for shot in fewshot_set:
        messages.append(Message("user", query_text(shot.title, shot.transcript)))
        messages.append(Message("assistant", json.dumps(list(shot.units), ensure_ascii=False)))
    messages.append(Message("user", query_text(title, text)))
    return ChatRequest(
        model=policy.model,
        messages=tuple(messages),
        temperature=policy.temperature,
        max_tokens=policy.max_tokens,
        request_tag=f"extract:{clip_id}",
    )


def strip_fence(raw: str) -> str:
    text = raw.strip()
    m = _FENCE.match(text)
    return m.group(1) if m else text


def parse_extraction(raw_content: str) -> list[KnowledgeUnit]:
    try:
        data = json.loads(strip_fence(raw_content))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"reply is not JSON ({exc.msg})") from None
    if not isinstance(data, list):
        raise SchemaError(f"expected a JSON array of units, got {type(data).__name__}")
    units = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise SchemaError(f"unit {i} is not an object")
        values = {}
        for name in UNIT_FIELDS:
            value = item.get(name)
            if value is None:
                values[name] = None
                continue
            if not isinstance(value, str):
                raise SchemaError(f"unit {i}: {name} must be a string or null", field=name)
            values[name] = value.strip() or None
        if values["observation"] is None:
            continue
        units.append(KnowledgeUnit(**values))
    return units


def extract_clip(
    title: str,
    clip_transcript: ClipTranscript,
    client: ChatClient,
    policy: ExtractionPolicy = ExtractionPolicy(),
    fewshot_set: Sequence[FewShot] | None = None,
    prompt_root=None,
) -> ExtractedKnowledge | ClipSkipped | ClipFailed:
    """Extract one clip. Short transcripts are skipped without a backend call."""
    clip_id = clip_transcript.clip_id
    if len(clip_transcript.text.split()) < policy.min_words:
        return ClipSkipped(clip_id, "extract", "too_short")
    request = build_extraction_prompt(title, clip_transcript, fewshot_set, policy, prompt_root)
    try:
        units, attempts = complete_structured(
            client, request, parse_extraction, StructuredPolicy(retries=policy.retries)
        )
    except StructuredCallFailed as exc:
        return ClipFailed(clip_id, "extract", exc.reason, exc.attempts)
    return ExtractedKnowledge(clip_id, tuple(units), attempts=attempts)
