from dataclasses import replace
from pathlib import Path

import pytest

from surgforge.config import load_config
from surgforge.llmclient import ChatClient, ChatResponse

CORPUS = Path(__file__).resolve().parent.parent / "fixtures" / "corpus"


class ScriptedClient(ChatClient):
    """Returns queued replies in order; records every request."""

    backend_id = "scripted"

    def __init__(self, replies):
        super().__init__()
        self.replies = list(replies)
        self.requests = []

    def _complete(self, request):
        self.requests.append(request)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return ChatResponse(content=reply)


@pytest.fixture
def corpus_config(tmp_path):
    return replace(load_config(CORPUS / "config.yaml"), out=tmp_path / "out")


# criterion number -> (name, passed, seconds, limit); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, float, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, passed, seconds, limit = ACCEPTANCE[n]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {n}. {name} ({seconds:.2f} s, limit {limit:g} s)")
