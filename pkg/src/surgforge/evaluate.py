"""Judge-based evaluation of model answers and agreement with human raters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .datamodel import ClipFailed, JudgeVerdict, MetricsReport
from .errors import (
    DegenerateInputError,
    EmptyInputError,
    JoinError,
    MismatchError,
    RangeError,
    SchemaError,
)
from .extract import strip_fence
from .llmclient import ChatClient, ChatRequest, Message, parallel_map
from .prompts import read_text
from .structured import StructuredCallFailed, StructuredPolicy, complete_structured

DEFAULT_JUDGE_MODEL = "gpt-3.5-turbo-0125"


@dataclass(frozen=True)
class Reference:
    id: str
    question: str
    reference_observations: tuple[str, ...]

    @property
    def key(self):
        return self.id

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "reference_observations": list(self.reference_observations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Reference:
        obs = d.get("reference_observations")
        if not isinstance(obs, list) or not all(isinstance(o, str) for o in obs):
            raise SchemaError("expected a list of strings", field="reference_observations")
        for name in ("id", "question"):
            if not isinstance(d.get(name), str):
                raise SchemaError("missing required field", field=name)
        return cls(d["id"], d["question"], tuple(obs))


@dataclass(frozen=True)
class Prediction:
    id: str
    answer: str

    @property
    def key(self):
        return self.id

    def to_dict(self) -> dict:
        return {"id": self.id, "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> Prediction:
        for name in ("id", "answer"):
            if not isinstance(d.get(name), str):
                raise SchemaError("missing required field", field=name)
        return cls(d["id"], d["answer"])


@dataclass(frozen=True)
class JudgePolicy:
    model: str = DEFAULT_JUDGE_MODEL
    temperature: float = 0.0
    max_tokens: int = 512
    retries: int = 2
    prompt_version: str = "v1"


def build_judge_prompt(
    question: str,
    reference_observations: Sequence[str],
    candidate_answer: str,
    policy: JudgePolicy = JudgePolicy(),
    item_id: str = "",
    prompt_root=None,
) -> ChatRequest:
    if not reference_observations:
        raise ValueError("at least one reference observation is required")
    listing = "\n".join(f"{i}. {o}" for i, o in enumerate(reference_observations, start=1))
    user = (
        f"Question: {question}\n"
        f"Reference observations ({len(reference_observations)}):\n{listing}\n"
        f"Candidate answer: {candidate_answer}"
    )
    return ChatRequest(
        model=policy.model,
        messages=(
            Message("system", read_text("judge", policy.prompt_version, "system.txt", prompt_root)),
            Message("user", user),
        ),
        temperature=policy.temperature,
        max_tokens=policy.max_tokens,
        request_tag=f"judge:{item_id}",
    )


def _strict_int(data: dict, name: str) -> int:
    value = data.get(name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError("expected an integer", field=name)
    if isinstance(value, float):
        if not value.is_integer():
            raise SchemaError("expected an integer", field=name)
        value = int(value)
    return value


def parse_verdict(raw: str, n_references: int, item_id: str = "") -> JudgeVerdict:
    """Parse a judge reply. Out-of-range values raise; nothing is clamped."""
    try:
        data = json.loads(strip_fence(raw))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"reply is not JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object")
    score = _strict_int(data, "score")
    matched = _strict_int(data, "matched")
    total = _strict_int(data, "total")
    comment = data.get("comment", "")
    if not isinstance(comment, str):
        raise SchemaError("expected a string", field="comment")
    if not 0 <= score <= 5:
        raise RangeError(f"score {score} outside [0, 5]", field="score")
    if total != n_references:
        raise MismatchError(f"total {total} but {n_references} references were given", field="total")
    if not 0 <= matched <= total:
        raise RangeError(f"matched {matched} outside [0, {total}]", field="matched")
    return JudgeVerdict(item_id, score, matched, total, comment)


def compute_metrics(verdicts: Sequence[JudgeVerdict], failures: int = 0) -> MetricsReport:
    if not verdicts:
        raise EmptyInputError("no verdicts to aggregate")
    n = len(verdicts)
    total = sum(v.total for v in verdicts)
    return MetricsReport(
        n_items=n,
        mean_score=sum(v.score for v in verdicts) / n,
        accuracy_at_1=sum(1 for v in verdicts if v.matched >= 1) / n,
        accuracy_at_all=sum(v.matched for v in verdicts) / total,
        failures=failures,
    )


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the positions they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    sxx = math.fsum(a * a for a in dx)
    syy = math.fsum(b * b for b in dy)
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(pairs: Iterable[tuple[float, float]]) -> float:
    """Tie-aware Spearman rho: Pearson correlation of average ranks."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DegenerateInputError("need at least two pairs")
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise DegenerateInputError("one side is constant; rank correlation is undefined")
    return pearson(average_ranks(x), average_ranks(y))


def join(predictions: Sequence[Prediction], references: Sequence[Reference]) -> list[tuple[Prediction, Reference]]:
    by_id = {r.id: r for r in references}
    missing = sorted(p.id for p in predictions if p.id not in by_id)
    if missing:
        raise JoinError(f"{len(missing)} prediction(s) without a reference, e.g. {missing[0]!r}")
    return [(p, by_id[p.id]) for p in sorted(predictions, key=lambda p: p.id)]


def judge_item(
    prediction: Prediction,
    reference: Reference,
    client: ChatClient,
    policy: JudgePolicy = JudgePolicy(),
    prompt_root=None,
) -> JudgeVerdict | ClipFailed:
    request = build_judge_prompt(
        reference.question, reference.reference_observations, prediction.answer, policy, prediction.id, prompt_root
    )
    n_refs = len(reference.reference_observations)
    try:
        verdict, _ = complete_structured(
            client,
            request,
            lambda raw: parse_verdict(raw, n_refs, prediction.id),
            StructuredPolicy(policy.retries),
        )
    except StructuredCallFailed as exc:
        return ClipFailed(prediction.id, "evaluate", exc.reason, exc.attempts)
    return verdict


def evaluate_run(
    predictions: Sequence[Prediction],
    references: Sequence[Reference],
    client: ChatClient,
    policy: JudgePolicy = JudgePolicy(),
    max_in_flight: int = 4,
    prompt_root=None,
) -> tuple[list[JudgeVerdict], MetricsReport | None, list[ClipFailed]]:
    """Judge every prediction; the report covers successful verdicts only (None if there are none)."""
    pairs = join(predictions, references)
    results = parallel_map(lambda pr: judge_item(pr[0], pr[1], client, policy, prompt_root), pairs, max_in_flight)
    verdicts = sorted((r for r in results if isinstance(r, JudgeVerdict)), key=lambda v: v.id)
    failures = sorted((r for r in results if isinstance(r, ClipFailed)), key=lambda f: f.key)
    report = compute_metrics(verdicts, failures=len(failures)) if verdicts else None
    return verdicts, report, failures


def human_correlation(verdicts: Sequence[JudgeVerdict], human: Sequence[dict]) -> dict:
    """Spearman rho between judge scores and ``human.jsonl`` scores joined on id."""
    judge = {v.id: v.score for v in verdicts}
    joined = []
    for row in sorted(human, key=lambda r: r["id"]):
        if row["id"] in judge:
            joined.append((float(row["human_score"]), float(judge[row["id"]])))
    return {"n": len(joined), "spearman_rho": spearman(joined)}
