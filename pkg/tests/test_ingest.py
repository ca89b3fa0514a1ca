import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgforge.datamodel import SurgicalProcedure, TranscriptSegment, VideoClip
from surgforge.errors import DuplicateIdError, EmptyCatalogError, EmptyVideoError, PolicyError, SchemaError
from surgforge.ingest import (
    assign_transcript,
    load_asr_segments,
    load_catalog,
    segment_bounds,
    segment_clips,
    split_procedures,
)


def proc(pid="p", duration=65.0):
    return SurgicalProcedure(pid, "title", f"http://x/{pid}", "cat", duration)


def entry(pid, **kw):
    d = {"procedure_id": pid, "title": "t", "source_url": "u", "category": "c", "duration_s": 10}
    d.update(kw)
    return d


def write(tmp_path, data, name="catalog.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def test_load_catalog(tmp_path):
    procs = load_catalog(write(tmp_path, [entry("b"), entry("a")]))
    assert [p.procedure_id for p in procs] == ["b", "a"]


def test_load_catalog_duplicate(tmp_path):
    with pytest.raises(DuplicateIdError):
        load_catalog(write(tmp_path, [entry("a"), entry("a")]))


def test_load_catalog_missing_duration(tmp_path):
    bad = entry("a")
    del bad["duration_s"]
    with pytest.raises(SchemaError) as info:
        load_catalog(write(tmp_path, [bad]))
    assert info.value.field == "duration_s"


def test_single_clip():
    assert segment_bounds(20, 15, 30) == [(0, 20)]


def test_tail_merge_then_halve():
    # cuts at 30, 60; remainder 5 < 15 joins [30, 65), halved at 47.5
    assert segment_bounds(65, 15, 30) == [(0, 30), (30, 47.5), (47.5, 65)]


def test_exact_multiple():
    assert segment_bounds(60, 15, 30) == [(0, 30), (30, 60)]


def test_sub_minimum_video_is_flagged():
    clips = segment_clips(proc(duration=12), 15, 30)
    assert [(c.start_s, c.end_s) for c in clips] == [(0, 12)]
    assert clips[0].sub_minimum


def test_clip_ids_and_urls():
    clips = segment_clips(proc("P9", 65), 15, 30)
    assert [c.clip_id for c in clips] == ["P9_c0000", "P9_c0001", "P9_c0002"]
    assert {c.source_url for c in clips} == {"http://x/P9"}
    assert not any(c.sub_minimum for c in clips)


def test_policy_errors():
    with pytest.raises(PolicyError):
        segment_bounds(100, 20, 30)
    with pytest.raises(EmptyVideoError):
        segment_bounds(0, 15, 30)


@settings(max_examples=2000, deadline=None)
@given(
    duration=st.floats(min_value=0.01, max_value=5000, allow_nan=False),
    min_s=st.floats(min_value=0.5, max_value=60),
    extra=st.floats(min_value=0, max_value=3),
)
def test_coverage_property(duration, min_s, extra):
    max_s = 2 * min_s + extra * min_s
    bounds = segment_bounds(duration, min_s, max_s)
    assert bounds[0][0] == 0 and bounds[-1][1] == duration
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    if duration >= min_s:
        assert all(min_s <= e - s <= max_s for s, e in bounds)
    else:
        assert len(bounds) == 1


def seg(a, b, text="words"):
    return TranscriptSegment(a, b, text)


def test_assign_by_max_overlap():
    clips = [VideoClip("c0", "p", "u", 0, 30, 0), VideoClip("c1", "p", "u", 30, 65, 1)]
    # overlaps: (0,10) -> 10 vs 0; (12,31) -> 18 vs 1
    out = assign_transcript([seg(0, 10, "a"), seg(12, 31, "b")], clips)
    assert out[0].text == "a b"
    assert out[1].segments == ()


def test_assign_tie_goes_to_earlier_clip():
    clips = segment_clips(proc(duration=60), 15, 30)
    out = assign_transcript([seg(25, 35)], clips)
    assert len(out[0].segments) == 1 and not out[1].segments


def test_assign_no_segments():
    clips = segment_clips(proc(duration=65), 15, 30)
    out = assign_transcript([], clips)
    assert [t.clip_id for t in out] == [c.clip_id for c in clips]
    assert all(t.text == "" for t in out)


def test_assign_out_of_range_and_zero_length():
    clips = segment_clips(proc(duration=60), 15, 30)
    out = assign_transcript([seg(30, 30, "x"), seg(70, 80, "y")], clips)
    assert out[1].text == "x y"


def test_every_segment_assigned_once():
    rng = random.Random(0)
    for _ in range(200):
        clips = segment_clips(proc(duration=rng.uniform(1, 400)), 15, 30)
        segs = sorted(
            (seg(a, a + rng.uniform(0, 20), str(i)) for i, a in enumerate(rng.uniform(0, 420) for _ in range(30))),
            key=lambda s: s.start_s,
        )
        out = assign_transcript(segs, clips)
        assert sorted(s.text for t in out for s in t.segments) == sorted(s.text for s in segs)


def test_load_asr_segments(tmp_path):
    p = write(
        tmp_path,
        {"segments": [{"start": 5, "end": 6, "text": " later"}, {"start": 1, "end": 2, "text": "  "},
                      {"start": 0, "end": 1.5, "text": "first "}]},
        "asr.json",
    )
    assert load_asr_segments(p) == [seg(0, 1.5, "first"), seg(5, 6, "later")]


def test_load_asr_bad_shape(tmp_path):
    with pytest.raises(SchemaError):
        load_asr_segments(write(tmp_path, {"segments": [{"start": "0", "end": 1, "text": "x"}]}, "a.json"))


def test_split_paper_counts():
    procs = [proc(f"p{i:04d}") for i in range(2151)]
    train, test = split_procedures(procs, 216 / 2151, seed=0)
    assert (len(train), len(test)) == (1935, 216)


def test_split_determinism():
    procs = [proc(f"p{i}") for i in range(10)]
    assert split_procedures(procs, 0.1, seed=5) == split_procedures(procs, 0.1, seed=5)
    _, test = split_procedures(procs, 0.1, seed=5)
    _, test_rev = split_procedures(procs[::-1], 0.1, seed=5)
    assert test == test_rev


def test_split_small_disjoint():
    procs = [proc(f"p{i}") for i in range(4)]
    for seed in range(20):
        train, test = split_procedures(procs, 0.25, seed)
        assert (len(train), len(test)) == (3, 1)
        assert {p.procedure_id for p in train}.isdisjoint(p.procedure_id for p in test)
        assert len({p.procedure_id for p in train + test}) == 4


def test_split_errors():
    with pytest.raises(EmptyCatalogError):
        split_procedures([], 0.1)
    with pytest.raises(ValueError):
        split_procedures([proc()], 1.0)
