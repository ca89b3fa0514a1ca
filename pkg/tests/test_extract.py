import json
from dataclasses import fields

import pytest
from conftest import ScriptedClient
from hypothesis import given, settings
from hypothesis import strategies as st

from surgforge.datamodel import ClipFailed, ClipSkipped, ClipTranscript, ExtractedKnowledge, KnowledgeUnit, TranscriptSegment
from surgforge.errors import AuthError, BackendError, ConfigError, SchemaError
from surgforge.extract import ExtractionPolicy, build_extraction_prompt, extract_clip, parse_extraction
from surgforge.prompts import load_fewshot

TITLE = "Laparoscopic Nissen fundoplication"
TEXT = "The short gastric vessels are divided with the vessel sealer to mobilize the fundus."


def transcript(text=TEXT, clip_id="P1_c0000"):
    return ClipTranscript(clip_id, (TranscriptSegment(0.0, 10.0, text),))


VALID = json.dumps([{"observation": "The short gastric vessels are divided", "reason": "to mobilize the fundus"}])


# --- prompt construction -----------------------------------------------------------


def test_last_message_carries_title_and_transcript():
    request = build_extraction_prompt(TITLE, transcript())
    last = request.messages[-1]
    assert last.role == "user"
    assert TITLE in last.content and TEXT in last.content
    assert request.messages[0].role == "system"
    assert request.request_tag == "extract:P1_c0000"
    assert request.temperature == 0.0


def test_default_fewshot_pairs_between_system_and_query():
    shots = load_fewshot("v1")
    assert shots, "shipped few-shot set should not be empty"
    request = build_extraction_prompt(TITLE, transcript())
    roles = [m.role for m in request.messages]
    assert roles == ["system"] + ["user", "assistant"] * len(shots) + ["user"]
    for shot, reply in zip(shots, request.messages[2::2]):
        assert json.loads(reply.content) == list(shot.units)


def test_empty_fewshot_set():
    request = build_extraction_prompt(TITLE, transcript(), fewshot_set=[])
    assert [m.role for m in request.messages] == ["system", "user"]


def test_v2_changes_system_only():
    v1 = build_extraction_prompt(TITLE, transcript(), fewshot_set=[])
    v2 = build_extraction_prompt(TITLE, transcript(), fewshot_set=[], policy=ExtractionPolicy(prompt_version="v2"))
    assert v1.messages[0].content != v2.messages[0].content
    assert v1.messages[-1].content == v2.messages[-1].content


def test_unknown_prompt_version():
    with pytest.raises(ConfigError):
        build_extraction_prompt(TITLE, transcript(), policy=ExtractionPolicy(prompt_version="v9"))


def test_system_prompt_requests_unit_fields():
    system = build_extraction_prompt(TITLE, transcript()).messages[0].content
    for name in ("observation", "reason", "plan", "deduction", "JSON"):
        assert name in system


# --- parsing ---------------------------------------------------------------------------


def test_parse_single_unit():
    units = parse_extraction('[{"observation":"adhesions are divided","reason":"to expose the hiatus"}]')
    assert units == [KnowledgeUnit("adhesions are divided", reason="to expose the hiatus")]


def test_parse_empty_array():
    assert parse_extraction("[]") == []


@pytest.mark.parametrize(
    "raw",
    [
        "I'm sorry, I can't help with describing surgical procedures.",
        '{"observation": "not wrapped in an array"}',
        '["just a string"]',
        '[{"observation": 5}]',
        "",
    ],
)
def test_parse_rejects(raw):
    with pytest.raises(SchemaError):
        parse_extraction(raw)


def test_parse_normalizes():
    raw = json.dumps(
        [
            {"observation": "  The hook dissects the plane. ", "reason": "   ", "plan": "", "deduction": None},
            {"observation": "   ", "reason": "orphan reason"},
            {"observation": "Clips are applied.", "extra": "ignored"},
        ]
    )
    assert parse_extraction(raw) == [KnowledgeUnit("The hook dissects the plane."), KnowledgeUnit("Clips are applied.")]


def test_parse_accepts_code_fence():
    assert len(parse_extraction("```json\n" + VALID + "\n```")) == 1


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.fixed_dictionaries(
            {"observation": st.text(max_size=12)},
            optional={k: st.one_of(st.none(), st.text(max_size=8)) for k in ("reason", "plan", "deduction")},
        ),
        max_size=6,
    )
)
def test_surviving_units_are_clean(items):
    for unit in parse_extraction(json.dumps(items)):
        assert unit.observation and unit.observation == unit.observation.strip()
        for name in ("reason", "plan", "deduction"):
            value = getattr(unit, name)
            assert value is None or (value and value == value.strip())


# --- extract_clip -------------------------------------------------------------------


def test_short_transcript_skipped_without_calls():
    client = ScriptedClient([])
    out = extract_clip(TITLE, transcript("Clip the artery."), client, ExtractionPolicy(min_words=10))
    assert out == ClipSkipped("P1_c0000", "extract", "too_short")
    assert client.calls == 0


def test_valid_reply():
    client = ScriptedClient([VALID])
    out = extract_clip(TITLE, transcript(), client)
    assert isinstance(out, ExtractedKnowledge)
    assert out.units == (KnowledgeUnit("The short gastric vessels are divided", reason="to mobilize the fundus"),)
    assert out.attempts == 1


def test_malformed_then_repaired():
    client = ScriptedClient(["Sure! Here are the units: {", VALID])
    out = extract_clip(TITLE, transcript(), client)
    assert isinstance(out, ExtractedKnowledge) and out.attempts == 2
    repair = client.requests[1]
    assert repair.request_tag == "extract:P1_c0000:repair"
    assert repair.messages[:-2] == client.requests[0].messages
    assert repair.messages[-2].content == "Sure! Here are the units: {"
    assert "not JSON" in repair.messages[-1].content


def test_retries_resend_original_then_fail():
    client = ScriptedClient(["nope"] * 4)
    out = extract_clip(TITLE, transcript(), client, ExtractionPolicy(retries=2))
    assert isinstance(out, ClipFailed)
    assert out.attempts == 4 and out.stage == "extract"
    # repair turn, then the untouched original request twice
    assert client.requests[2] == client.requests[0] == client.requests[3]


def test_backend_error_counts_as_attempt():
    client = ScriptedClient([BackendError("down", 503), VALID])
    out = extract_clip(TITLE, transcript(), client)
    assert isinstance(out, ExtractedKnowledge) and out.attempts == 2


def test_auth_error_escapes():
    with pytest.raises(AuthError):
        extract_clip(TITLE, transcript(), ScriptedClient([AuthError("no", 401)]))


def test_stage_separation():
    """Nothing this stage emits has a question or answer field."""
    out = extract_clip(TITLE, transcript(), ScriptedClient([VALID]))
    names = {f.name for f in fields(ExtractedKnowledge)} | {f.name for f in fields(KnowledgeUnit)}
    assert not names & {"question", "answer"}
    assert "question" not in json.dumps(out.to_dict())
