import hashlib
import json
import threading
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgforge.errors import AuthError, BackendError, MissingFixtureError, RateLimitExhausted, TransportError
from surgforge.llmclient import (
    ChatClient,
    ChatRequest,
    ChatResponse,
    FixtureStore,
    FunctionClient,
    LiveClient,
    Message,
    MockClient,
    RateLimiter,
    RecordingClient,
    RetryPolicy,
    request_digest,
)


def req(text="hello", tag="t", temperature=0.0, model="m"):
    return ChatRequest(model, (Message("user", text),), temperature=temperature, request_tag=tag)


def ok_body(content="fine"):
    return {
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 2},
    }


def live(handler, retries=4):
    sleeps = []
    client = LiveClient(
        "http://backend.test/v1",
        api_key="k",
        retry=RetryPolicy(max_retries=retries, seed=0),
        transport=httpx.MockTransport(handler),
        sleep=sleeps.append,
    )
    return client, sleeps


# --- request model -------------------------------------------------------------


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", (Message("assistant", "x"),))
    with pytest.raises(ValueError):
        ChatRequest("m", (Message("user", "x"),), temperature=-1)
    with pytest.raises(ValueError):
        ChatRequest("m", (Message("user", "x"),), max_tokens=0)


def test_response_needs_content_on_stop():
    with pytest.raises(ValueError):
        ChatResponse(content=None, finish_reason="stop")
    assert ChatResponse(content=None, finish_reason="error").content is None


def test_digest_frozen_value():
    # the fixture store on disk depends on this exact value
    d = request_digest(req("hello", temperature=0.0))
    blob = '{"messages":[{"content":"hello","role":"user"}],"model":"m","temperature":0.0}'
    assert d == hashlib.sha256(blob.encode()).hexdigest()


def test_digest_ignores_tag_and_max_tokens_but_not_temperature():
    a = req(tag="a")
    assert request_digest(a) == request_digest(req(tag="b"))
    assert request_digest(a) == request_digest(ChatRequest("m", a.messages, max_tokens=7))
    assert request_digest(a) != request_digest(req(temperature=0.2))
    assert request_digest(a) != request_digest(req(model="other"))


# --- live client ---------------------------------------------------------------


def test_429_twice_then_success():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        if len(seen) <= 2:
            return httpx.Response(429, text="slow down")
        return httpx.Response(200, json=ok_body("done"))

    client, sleeps = live(handler)
    resp = client.complete(req())
    assert resp.content == "done"
    assert client.retries_used == 2
    assert len(sleeps) == 2
    assert resp.usage.prompt_tokens == 5
    assert seen[0] == {"model": "m", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0, "max_tokens": 1024}


def test_wire_format_headers_and_path():
    captured = {}

    def handler(request):
        captured["url"] = str(request.url)
        captured["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=ok_body())

    client, _ = live(handler)
    client.complete(req())
    assert captured == {"url": "http://backend.test/v1/chat/completions", "auth": "Bearer k"}


def test_api_key_from_environment(monkeypatch):
    monkeypatch.setenv("SURGFORGE_API_KEY", "from-env")
    assert LiveClient("http://x").api_key == "from-env"


@pytest.mark.parametrize("status", [401, 403])
def test_auth_errors_never_retried(status):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status, text="no")

    client, sleeps = live(handler)
    with pytest.raises(AuthError) as info:
        client.complete(req())
    assert len(calls) == 1 and sleeps == []
    assert info.value.status == status


def test_rate_limit_exhausted_after_r_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(429)

    client, sleeps = live(handler, retries=3)
    with pytest.raises(RateLimitExhausted):
        client.complete(req())
    assert len(calls) == 4 and len(sleeps) == 3


def test_server_error_and_transport_error_retry():
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ConnectError("refused")
        if state["n"] == 2:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json=ok_body())

    client, _ = live(handler)
    assert client.complete(req()).content == "fine"
    assert client.retries_used == 2


def test_transport_error_exhausted():
    def handler(request):
        raise httpx.ReadTimeout("slow")

    client, _ = live(handler, retries=1)
    with pytest.raises(TransportError):
        client.complete(req())


def test_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request body")

    client, _ = live(handler)
    with pytest.raises(BackendError) as info:
        client.complete(req())
    assert info.value.status == 400 and "bad request" in info.value.body
    assert len(calls) == 1


def test_unparseable_completion():
    client, _ = live(lambda r: httpx.Response(200, text="<html>"))
    with pytest.raises(BackendError):
        client.complete(req())


def test_length_finish_reason_passes_through():
    body = {"choices": [{"message": {"content": "trunc"}, "finish_reason": "length"}]}
    client, _ = live(lambda r: httpx.Response(200, json=body))
    assert client.complete(req()).finish_reason == "length"


@settings(max_examples=200, deadline=None)
@given(
    retries=st.integers(0, 10),
    base=st.floats(0.01, 5),
    cap=st.floats(0.01, 60),
    jitter=st.floats(0, 1),
    seed=st.integers(0, 1000),
)
def test_backoff_non_decreasing_and_bounded(retries, base, cap, jitter, seed):
    delays = RetryPolicy(retries, base, cap, jitter, seed).delays()
    assert len(delays) == retries
    assert all(a <= b for a, b in zip(delays, delays[1:]))
    assert all(0 < d <= cap for d in delays)


def test_rate_limiter_spacing():
    now = [0.0]
    waits = []
    limiter = RateLimiter(4.0, clock=lambda: now[0], sleep=waits.append)
    for _ in range(3):
        limiter.acquire()
    assert waits == [0.25, 0.5]
    RateLimiter(None).acquire()  # disabled limiter is a no-op


# --- mock, record ---------------------------------------------------------------


def test_mock_replay_and_strict_miss(tmp_path):
    store = FixtureStore(tmp_path)
    r = req("q1")
    store.put(r.digest, r.request_tag, "answer one")
    client = MockClient(store)
    assert client.complete(r).content == "answer one"
    with pytest.raises(MissingFixtureError):
        client.complete(req("unknown"))
    lenient = MockClient(tmp_path, strict=False, default="{}")
    assert lenient.complete(req("unknown")).content == "{}"


def test_mock_from_dict():
    r = req("x")
    assert MockClient({r.digest: "y"}).complete(r).content == "y"


def test_mock_determinism(tmp_path):
    store = FixtureStore(tmp_path)
    requests = [req(f"q{i}") for i in range(20)]
    for i, r in enumerate(requests):
        store.put(r.digest, r.request_tag, f"a{i} é")
    a = [x.content for x in MockClient(store).complete_batch(requests, 4)]
    b = [x.content for x in MockClient(store).complete_batch(requests, 1)]
    assert a == b == [f"a{i} é" for i in range(20)]


def test_record_mode_writes_fixtures(tmp_path):
    inner = FunctionClient(lambda r: r.messages[-1].content.upper())
    recorder = RecordingClient(inner, tmp_path)
    r = req("shout")
    assert recorder.complete(r).content == "SHOUT"
    entry = json.loads((tmp_path / f"{r.digest}.json").read_text())
    assert entry == {"request_tag": "t", "content": "SHOUT"}
    assert MockClient(tmp_path).complete(r).content == "SHOUT"
    assert len(FixtureStore(tmp_path)) == 1


# --- batching -------------------------------------------------------------------


class SlowEcho(ChatClient):
    def __init__(self):
        super().__init__()
        self.active = 0
        self.peak = 0
        self.guard = threading.Lock()

    def _complete(self, request):
        with self.guard:
            self.active += 1
            self.peak = max(self.peak, self.active)
        # later requests finish first
        time.sleep(0.002 * (10 - int(request.request_tag)))
        with self.guard:
            self.active -= 1
        if request.messages[0].content == "boom":
            raise BackendError("exploded", 500)
        return ChatResponse(content=request.messages[0].content)


def test_batch_order_and_bound():
    client = SlowEcho()
    requests = [req(f"m{i}", tag=str(i)) for i in range(5)]
    out = client.complete_batch(requests, max_in_flight=2)
    assert [r.content for r in out] == [f"m{i}" for i in range(5)]
    assert client.peak <= 2


def test_batch_error_at_its_index():
    client = SlowEcho()
    texts = ["a", "b", "boom", "d", "e"]
    out = client.complete_batch([req(t, tag=str(i)) for i, t in enumerate(texts)], max_in_flight=3)
    assert isinstance(out[2], BackendError)
    assert [o.content for i, o in enumerate(out) if i != 2] == ["a", "b", "d", "e"]


def test_batch_empty_and_invalid():
    assert SlowEcho().complete_batch([], 2) == []
    with pytest.raises(ValueError):
        SlowEcho().complete_batch([req()], 0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 30), k=st.integers(1, 8))
def test_batch_order_any_concurrency(n, k):
    client = FunctionClient(lambda r: r.messages[0].content)
    out = client.complete_batch([req(str(i)) for i in range(n)], k)
    assert [o.content for o in out] == [str(i) for i in range(n)]
    assert client.calls == n
