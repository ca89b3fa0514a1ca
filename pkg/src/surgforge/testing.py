"""Offline stand-ins for a chat model.

``synthetic_reply`` answers every prompt family this package sends with
well-formed JSON derived from the prompt text alone. It is used to build
the shipped fixture store (through RecordingClient) and in tests.
``FaultInjector`` corrupts replies for a seeded subset of work items.
"""

from __future__ import annotations

import hashlib
import json
import re

from .llmclient import ChatClient, ChatRequest, ChatResponse

REASON_MARKERS = ("this is to ", "this is done to ", "the reason is ", "because ")
PLAN_MARKERS = ("next we will ", "then we will ", "we will then ", "the plan is to ")
DEDUCTION_MARKERS = ("this means ", "this shows ", "which tells us ", "so we can conclude ")
NOISE_MARKERS = ("thank you", "subscribe", "welcome to", "hello")

OBSERVATION_QUESTIONS = (
    "What is happening in this surgical video?",
    "Describe the surgical steps shown in the video.",
    "Can you explain what the surgeon is doing in this clip?",
    "What does this part of the procedure show?",
)
ALIGNMENT_QUESTIONS = (
    "Describe what happens in this video.",
    "What actions are performed in this clip?",
    "Summarize the surgical actions in the video.",
)
REASONING_QUESTIONS = {
    "Reason": "Why is the following done: {obs}",
    "Plan": "What is planned after this step: {obs}",
    "Deduction": "What can be concluded from this: {obs}",
}

_SENTENCE = re.compile(r"[^.!?]+[.!?]?")
_WORD = re.compile(r"[a-z]+")
_STOPWORDS = frozenset(
    "a an and are as at be by for from in is it of on or the this that to was we with".split()
)


def _pick(options, key: str):
    h = hashlib.sha256(key.encode("utf-8")).digest()
    return options[h[0] % len(options)]


def _field(text: str, label: str) -> str:
    m = re.search(rf"^{label}: (.*)$", text, re.MULTILINE)
    return m.group(1).strip() if m else ""


def _query(request: ChatRequest) -> str:
    """The last user message that carries the actual task (repair turns are skipped)."""
    for m in reversed(request.messages):
        if m.role == "user" and not m.content.startswith("Your previous reply"):
            return m.content
    return ""


def _strip_marker(sentence: str, markers) -> str | None:
    low = sentence.lower()
    for marker in markers:
        if low.startswith(marker):
            rest = sentence[len(marker) :].strip()
            return rest[:1].upper() + rest[1:] if rest else None
    return None


def extract_units(transcript: str) -> list[dict]:
    units: list[dict] = []
    for raw in _SENTENCE.findall(transcript):
        sentence = raw.strip()
        if len(sentence.split()) < 3:
            continue
        low = sentence.lower()
        if any(n in low for n in NOISE_MARKERS):
            continue
        for attr, markers in (("reason", REASON_MARKERS), ("plan", PLAN_MARKERS), ("deduction", DEDUCTION_MARKERS)):
            text = _strip_marker(sentence, markers)
            if text is not None:
                if units and units[-1][attr] is None:
                    units[-1][attr] = text
                break
        else:
            units.append({"observation": sentence, "reason": None, "plan": None, "deduction": None})
    return units


def content_words(text: str) -> set[str]:
    return {w for w in _WORD.findall(text.lower()) if w not in _STOPWORDS and len(w) > 2}


def judge_reply(query: str) -> dict:
    refs = re.findall(r"^\d+\. (.*)$", query, re.MULTILINE)
    candidate = content_words(_field(query, "Candidate answer"))
    matched = 0
    notes = []
    for i, ref in enumerate(refs, start=1):
        words = content_words(ref)
        hit = bool(words) and len(words & candidate) / len(words) >= 0.5
        matched += hit
        notes.append(f"{i}:{'match' if hit else 'miss'}")
    score = round(5 * matched / len(refs)) if refs else 0
    return {"score": score, "matched": matched, "total": len(refs), "comment": ", ".join(notes)}


def alignment_reply(query: str) -> dict:
    sentences = []
    for line in query.splitlines():
        for inst, verb, target in re.findall(r"\(([^,()]+), ([^,()]+), ([^,()]+)\)", line):
            sentences.append(f"The {inst} is used to {verb} the {target}.")
    deduped = list(dict.fromkeys(sentences))
    return {"question": _pick(ALIGNMENT_QUESTIONS, query), "answer": " ".join(deduped)}


def synthetic_reply(request: ChatRequest) -> str:
    family = request.request_tag.split(":", 1)[0]
    query = _query(request)
    if family == "extract":
        transcript = query.split("Transcript: ", 1)[-1]
        return json.dumps(extract_units(transcript), ensure_ascii=False)
    if family == "generate-observation":
        obs = re.findall(r"^\d+\. (.*)$", query, re.MULTILINE)
        return json.dumps({"question": _pick(OBSERVATION_QUESTIONS, query), "answer": " ".join(obs)})
    if family == "generate-reasoning":
        for label, template in REASONING_QUESTIONS.items():
            statement = _field(query, label)
            if statement:
                obs = _field(query, "Observation").rstrip(".")
                question = template.format(obs=obs[:1].lower() + obs[1:]) + "?"
                return json.dumps({"question": question, "answer": statement})
        return json.dumps({"question": "", "answer": ""})
    if family == "align":
        return json.dumps(alignment_reply(query))
    if family == "judge":
        return json.dumps(judge_reply(query))
    return "I'm sorry, I cannot help with that."


class SyntheticClient(ChatClient):
    backend_id = "synthetic"

    def _complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(content=synthetic_reply(request))


def item_of(request: ChatRequest) -> str:
    """Work-item id carried in a request tag such as ``extract:<clip_id>:repair``."""
    parts = request.request_tag.split(":")
    return parts[1] if len(parts) > 1 else ""


def selected(item: str, rate: float, seed: int) -> bool:
    h = hashlib.sha256(f"fault:{seed}:{item}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64 < rate


class FaultInjector(ChatClient):
    """Returns malformed content for every request of a seeded ``rate`` fraction of items."""

    MALFORMED = "Sure! Here is the information you asked for: {not json"

    def __init__(self, inner: ChatClient, rate: float = 0.1, seed: int = 0, families: tuple[str, ...] | None = None):
        super().__init__()
        self.inner = inner
        self.rate = rate
        self.seed = seed
        self.families = families
        self.backend_id = inner.backend_id

    def is_faulty(self, item: str) -> bool:
        return selected(item, self.rate, self.seed)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        family = request.request_tag.split(":", 1)[0]
        if (self.families is None or family in self.families) and self.is_faulty(item_of(request)):
            return ChatResponse(content=self.MALFORMED)
        return self.inner.complete(request)
