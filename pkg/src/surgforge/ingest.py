"""Catalog loading, clip segmentation, transcript alignment and the train/test split."""

from __future__ import annotations

import json
import math
import random
from pathlib import Path
from typing import Iterable, Sequence

from .datamodel import ClipTranscript, SurgicalProcedure, TranscriptSegment, VideoClip
from .errors import (
    DuplicateIdError,
    EmptyCatalogError,
    EmptyVideoError,
    MissingInputError,
    PolicyError,
    SchemaError,
)


def load_catalog(path) -> list[SurgicalProcedure]:
    """Read a JSON array of procedures, keeping input order."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise MissingInputError(f"catalog not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(data, list):
        raise SchemaError("catalog must be a JSON array")
    procedures = []
    seen = set()
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise SchemaError(f"entry {i}: expected object")
        try:
            proc = SurgicalProcedure.from_dict(entry)
        except SchemaError as exc:
            raise SchemaError(f"entry {i}: {exc.reason}", field=exc.field) from None
        if proc.procedure_id in seen:
            raise DuplicateIdError(f"duplicate procedure_id {proc.procedure_id!r}")
        seen.add(proc.procedure_id)
        procedures.append(proc)
    return procedures


def segment_bounds(duration: float, min_s: float, max_s: float) -> list[tuple[float, float]]:
    """Cut ``[0, duration)`` into contiguous intervals with lengths in ``[min_s, max_s]``.

    Greedy cuts every ``max_s``; a remainder shorter than ``min_s`` is merged
    into the previous interval and the merged span is halved. Durations
    below ``min_s`` yield a single short interval.
    """
    if min_s <= 0 or max_s < 2 * min_s:
        raise PolicyError(f"need 0 < min_s and max_s >= 2*min_s, got [{min_s}, {max_s}]")
    if duration <= 0:
        raise EmptyVideoError("video has zero duration")
    cuts = [0.0]
    while duration - cuts[-1] > max_s:
        cuts.append(_step(cuts[-1], max_s))
    remainder = duration - cuts[-1]
    if remainder < min_s and len(cuts) > 1:
        cuts[-1] = _midpoint(cuts[-2], duration, min_s)
    cuts.append(duration)
    return list(zip(cuts[:-1], cuts[1:]))


def _step(start: float, length: float) -> float:
    # keep ``end - start <= length`` under float rounding
    end = start + length
    while end - start > length:
        end = math.nextafter(end, -math.inf)
    return end


def _midpoint(start: float, end: float, min_s: float) -> float:
    mid = start + (end - start) / 2
    while mid - start < min_s and end - mid > min_s:
        mid = math.nextafter(mid, math.inf)
    while end - mid < min_s and mid - start > min_s:
        mid = math.nextafter(mid, -math.inf)
    return mid


def segment_clips(procedure: SurgicalProcedure, min_s: float = 15.0, max_s: float = 30.0) -> list[VideoClip]:
    bounds = segment_bounds(procedure.duration_s, min_s, max_s)
    return [
        VideoClip(
            clip_id=f"{procedure.procedure_id}_c{i:04d}",
            procedure_id=procedure.procedure_id,
            source_url=procedure.source_url,
            start_s=start,
            end_s=end,
            index=i,
            sub_minimum=end - start < min_s,
        )
        for i, (start, end) in enumerate(bounds)
    ]


def load_asr_segments(path) -> list[TranscriptSegment]:
    """Read ASR output ``{"segments": [{"start", "end", "text"}]}``.

    Segments whose text is blank are dropped; the rest are sorted by time.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise MissingInputError(f"transcript not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    raw = data.get("segments") if isinstance(data, dict) else None
    if not isinstance(raw, list):
        raise SchemaError(f"{path}: expected an object with a 'segments' array", field="segments")
    segments = []
    for i, seg in enumerate(raw):
        if not isinstance(seg, dict):
            raise SchemaError(f"{path}: expected object", field=f"segments[{i}]")
        text = seg.get("text")
        start, end = seg.get("start"), seg.get("end")
        if not isinstance(text, str):
            raise SchemaError(f"{path}: missing text", field=f"segments[{i}].text")
        for name, value in (("start", start), ("end", end)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"{path}: expected a number", field=f"segments[{i}].{name}")
        if not text.strip():
            continue
        segments.append(TranscriptSegment(float(start), float(end), text.strip()))
    segments.sort(key=lambda s: (s.start_s, s.end_s))
    return segments


def _distance(seg: TranscriptSegment, clip: VideoClip) -> tuple[int, float]:
    """(0, 0) when the segment midpoint lies in ``[start, end)``, else (1, gap)."""
    mid = (seg.start_s + seg.end_s) / 2
    if mid < clip.start_s:
        return 1, clip.start_s - mid
    if mid >= clip.end_s:
        return 1, mid - clip.end_s
    return 0, 0.0


def best_clip(seg: TranscriptSegment, clips: Sequence[VideoClip]) -> int:
    """Index of the clip overlapping ``seg`` the most, earliest on ties.

    Zero-length or out-of-range segments fall back to the nearest clip.
    """

    def rank(i: int):
        clip = clips[i]
        overlap = max(0.0, min(seg.end_s, clip.end_s) - max(seg.start_s, clip.start_s))
        near = _distance(seg, clip) if overlap == 0 else (0, 0.0)
        return (-overlap, near, i)

    return min(range(len(clips)), key=rank)


def assign_transcript(segments: Iterable[TranscriptSegment], clips: Sequence[VideoClip]) -> list[ClipTranscript]:
    buckets: list[list[TranscriptSegment]] = [[] for _ in clips]
    if clips:
        for seg in segments:
            buckets[best_clip(seg, clips)].append(seg)
    return [ClipTranscript(clip.clip_id, tuple(b)) for clip, b in zip(clips, buckets)]


def n_test_items(n: int, test_fraction: float) -> int:
    # half-up rounding; Python's round() is half-to-even
    return math.floor(n * test_fraction + 0.5)


def split_procedures(
    procedures: Sequence[SurgicalProcedure], test_fraction: float, seed: int = 0
) -> tuple[list[SurgicalProcedure], list[SurgicalProcedure]]:
    """Seeded shuffle then prefix cut. Both sides keep catalog order."""
    if not procedures:
        raise EmptyCatalogError("cannot split an empty catalog")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    ids = sorted(p.procedure_id for p in procedures)
    random.Random(seed).shuffle(ids)
    test_ids = set(ids[: n_test_items(len(ids), test_fraction)])
    train = [p for p in procedures if p.procedure_id not in test_ids]
    test = [p for p in procedures if p.procedure_id in test_ids]
    return train, test


def ingest_corpus(
    procedures: Sequence[SurgicalProcedure],
    asr_dir: str | Path,
    min_s: float = 15.0,
    max_s: float = 30.0,
) -> tuple[list[VideoClip], list[ClipTranscript]]:
    """Segment every procedure and align its ASR file (``{procedure_id}.json``)."""
    clips: list[VideoClip] = []
    transcripts: list[ClipTranscript] = []
    for proc in procedures:
        proc_clips = segment_clips(proc, min_s, max_s)
        segments = load_asr_segments(Path(asr_dir) / f"{proc.procedure_id}.json")
        clips.extend(proc_clips)
        transcripts.extend(assign_transcript(segments, proc_clips))
    return clips, transcripts
