"""Requests whose reply must parse as JSON, with one repair turn and bounded retries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, TypeVar

from .errors import AuthError, BackendError, MissingFixtureError, SchemaError
from .llmclient import ChatClient, ChatRequest, Message

log = logging.getLogger(__name__)

T = TypeVar("T")

REPAIR_TEMPLATE = (
    "Your previous reply could not be used: {error}. "
    "Reply again with the JSON only, following the required format exactly."
)


@dataclass(frozen=True)
class StructuredPolicy:
    # full re-sends of the original request after the repair turn
    retries: int = 2


class StructuredCallFailed(Exception):
    def __init__(self, reason: str, attempts: int):
        self.reason = reason
        self.attempts = attempts
        super().__init__(f"{reason} (after {attempts} attempts)")


def repair_request(request: ChatRequest, raw: str, error: str) -> ChatRequest:
    messages = request.messages + (
        Message("assistant", raw),
        Message("user", REPAIR_TEMPLATE.format(error=error)),
    )
    return replace(request, messages=messages, request_tag=request.request_tag + ":repair")


def complete_structured(
    client: ChatClient,
    request: ChatRequest,
    parse: Callable[[str], T],
    policy: StructuredPolicy = StructuredPolicy(),
) -> tuple[T, int]:
    """Return ``(parse(reply), attempts)``.

    A parse failure on the first reply triggers one repair turn carrying
    the error; after that the original request is re-sent up to
    ``policy.retries`` times. Authentication and missing-fixture errors
    propagate; everything else is folded into StructuredCallFailed.
    """
    attempts = 0
    last = "no attempt made"

    def attempt(req: ChatRequest):
        nonlocal attempts, last
        attempts += 1
        try:
            response = client.complete(req)
        except (AuthError, MissingFixtureError):
            raise
        except BackendError as exc:
            last = f"backend: {exc}"
            return None, None
        raw = response.content or ""
        if response.finish_reason != "stop":
            last = f"finish_reason={response.finish_reason}"
            return None, raw
        try:
            return parse(raw), raw
        except SchemaError as exc:
            last = f"schema: {exc}"
            return None, raw

    value, raw = attempt(request)
    if value is not None:
        return value, attempts
    if raw is not None:
        value, _ = attempt(repair_request(request, raw, last))
        if value is not None:
            return value, attempts
    for _ in range(policy.retries):
        value, _ = attempt(request)
        if value is not None:
            return value, attempts
    log.info("giving up on %s: %s", request.request_tag, last)
    raise StructuredCallFailed(last, attempts)
