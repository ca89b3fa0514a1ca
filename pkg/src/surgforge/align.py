"""Concept alignment from frame-level action-triplet annotations.

Frames sharing the same *set* of triplets are merged into spans; the
non-idle spans of a clip prompt a single-round description pair.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .datamodel import ClipFailed, ClipSkipped, Conversation, QAPair, VideoClip
from .errors import OrderError, SchemaError
from .generate import assemble_conversation, parse_qa
from .ingest import segment_bounds
from .llmclient import ChatClient, ChatRequest, Message
from .prompts import read_text
from .structured import StructuredCallFailed, StructuredPolicy, complete_structured


@dataclass(frozen=True, order=True)
class ActionTriplet:
    instrument: str
    verb: str
    target: str

    def __post_init__(self):
        for name in ("instrument", "verb", "target"):
            if not getattr(self, name):
                raise SchemaError("must be non-empty", field=name)

    def __str__(self) -> str:
        return f"({self.instrument}, {self.verb}, {self.target})"


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    triplets: frozenset[ActionTriplet] = frozenset()


@dataclass(frozen=True)
class MergedTripletSpan:
    start_frame: int
    end_frame: int
    triplets: frozenset[ActionTriplet] = frozenset()

    @property
    def idle(self) -> bool:
        return not self.triplets

    def describe(self) -> str:
        return "; ".join(str(t) for t in sorted(self.triplets))


@dataclass(frozen=True)
class AnnotatedVideo:
    video_id: str
    fps: float
    frames: tuple[FrameAnnotation, ...]

    @property
    def duration_s(self) -> float:
        if not self.frames:
            return 0.0
        return (self.frames[-1].frame_index + 1) / self.fps


def merge_consecutive(frames: Iterable[FrameAnnotation]) -> list[MergedTripletSpan]:
    spans: list[MergedTripletSpan] = []
    prev_index = None
    for frame in frames:
        if prev_index is not None and frame.frame_index <= prev_index:
            raise OrderError(f"frame_index {frame.frame_index} follows {prev_index}")
        prev_index = frame.frame_index
        if spans and spans[-1].triplets == frame.triplets:
            last = spans[-1]
            spans[-1] = MergedTripletSpan(last.start_frame, frame.frame_index, last.triplets)
        else:
            spans.append(MergedTripletSpan(frame.frame_index, frame.frame_index, frame.triplets))
    return spans


def expand_spans(
    spans: Sequence[MergedTripletSpan], frame_indices: Iterable[int] | None = None
) -> list[FrameAnnotation]:
    """Per-frame labeling implied by ``spans``.

    Without ``frame_indices`` every index inside each span is emitted; pass
    the original indices for streams that skip frames.
    """
    if frame_indices is None:
        return [FrameAnnotation(i, s.triplets) for s in spans for i in range(s.start_frame, s.end_frame + 1)]
    out = []
    it = iter(spans)
    span = next(it, None)
    for idx in frame_indices:
        while span is not None and idx > span.end_frame:
            span = next(it, None)
        if span is None or idx < span.start_frame:
            raise ValueError(f"frame {idx} is not covered by any span")
        out.append(FrameAnnotation(idx, span.triplets))
    return out


def segment_annotation_clips(
    video_duration: float, fps: float, min_s: float = 30.0, max_s: float = 60.0, video_id: str = ""
) -> list[VideoClip]:
    """Same tail-merge-then-halve policy as transcript clips, with alignment bounds."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    bounds = segment_bounds(video_duration, min_s, max_s)
    return [
        VideoClip(
            clip_id=f"{video_id}_a{i:04d}",
            procedure_id=video_id,
            source_url=video_id,
            start_s=start,
            end_s=end,
            index=i,
            sub_minimum=end - start < min_s,
        )
        for i, (start, end) in enumerate(bounds)
    ]


def frames_in_clip(frames: Sequence[FrameAnnotation], clip: VideoClip, fps: float) -> list[FrameAnnotation]:
    """Frames whose timestamp ``frame_index / fps`` falls in ``[start_s, end_s)``."""
    return [f for f in frames if clip.start_s <= f.frame_index / fps < clip.end_s]


@dataclass(frozen=True)
class AlignmentPolicy:
    model: str = "llama-3-70b-instruct"
    temperature: float = 0.2
    max_tokens: int = 512
    retries: int = 2
    prompt_version: str = "v1"


def alignment_prompt(
    clip_id: str,
    spans: Sequence[MergedTripletSpan],
    policy: AlignmentPolicy = AlignmentPolicy(),
    prompt_root=None,
) -> ChatRequest:
    lines = [f"frames {s.start_frame}-{s.end_frame}: {s.describe()}" for s in spans if not s.idle]
    return ChatRequest(
        model=policy.model,
        messages=(
            Message("system", read_text("alignment", policy.prompt_version, "system.txt", prompt_root)),
            Message("user", "Actions in order:\n" + "\n".join(lines)),
        ),
        temperature=policy.temperature,
        max_tokens=policy.max_tokens,
        request_tag=f"align:{clip_id}",
    )


def gen_alignment_pair(
    span_sequence: Sequence[MergedTripletSpan],
    client: ChatClient,
    clip_id: str = "",
    policy: AlignmentPolicy = AlignmentPolicy(),
    prompt_root=None,
) -> QAPair | ClipSkipped | ClipFailed:
    if not span_sequence:
        raise ValueError("span_sequence must be non-empty")
    if all(s.idle for s in span_sequence):
        return ClipSkipped(clip_id, "align", "no_actions")
    request = alignment_prompt(clip_id, span_sequence, policy, prompt_root)
    try:
        (q, a), _ = complete_structured(client, request, parse_qa, StructuredPolicy(policy.retries))
    except StructuredCallFailed as exc:
        return ClipFailed(clip_id, "align", exc.reason, exc.attempts)
    return QAPair(q, a, "alignment")


def align_clip(
    clip: VideoClip,
    frames: Sequence[FrameAnnotation],
    client: ChatClient,
    policy: AlignmentPolicy = AlignmentPolicy(),
    seed: int = 0,
    prompt_root=None,
) -> Conversation | ClipSkipped | ClipFailed:
    spans = merge_consecutive(frames)
    if not spans:
        return ClipSkipped(clip.clip_id, "align", "no_frames")
    result = gen_alignment_pair(spans, client, clip.clip_id, policy, prompt_root)
    if not isinstance(result, QAPair):
        return result
    return assemble_conversation(clip, [result], seed)


def sample_clips(clips: Sequence[VideoClip], sample_size: int | None, seed: int) -> list[VideoClip]:
    """Seeded uniform sample without replacement; ``None`` keeps everything."""
    ordered = sorted(clips, key=lambda c: c.clip_id)
    if sample_size is None or sample_size >= len(ordered):
        return ordered
    picked = random.Random(seed).sample(ordered, sample_size)
    return sorted(picked, key=lambda c: c.clip_id)


def parse_video(d: dict) -> AnnotatedVideo:
    video_id = d.get("video_id")
    fps = d.get("fps")
    frames = d.get("frames")
    if not isinstance(video_id, str) or not video_id:
        raise SchemaError("missing video_id", field="video_id")
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or fps <= 0:
        raise SchemaError("fps must be a positive number", field="fps")
    if not isinstance(frames, list):
        raise SchemaError("expected a list", field="frames")
    parsed = []
    for i, f in enumerate(frames):
        where = f"frames[{i}]"
        if not isinstance(f, dict) or isinstance(f.get("frame_index"), bool) or not isinstance(f.get("frame_index"), int):
            raise SchemaError("expected {frame_index, triplets}", field=where)
        raw = f.get("triplets", [])
        if not isinstance(raw, list):
            raise SchemaError("expected a list", field=f"{where}.triplets")
        triplets = []
        for t in raw:
            if not isinstance(t, dict) or not all(isinstance(t.get(k), str) for k in ("instrument", "verb", "target")):
                raise SchemaError("expected {instrument, verb, target}", field=f"{where}.triplets")
            triplets.append(ActionTriplet(t["instrument"], t["verb"], t["target"]))
        parsed.append(FrameAnnotation(f["frame_index"], frozenset(triplets)))
    return AnnotatedVideo(video_id, float(fps), tuple(parsed))


def video_to_dict(video: AnnotatedVideo) -> dict:
    return {
        "video_id": video.video_id,
        "fps": video.fps,
        "frames": [
            {
                "frame_index": f.frame_index,
                "triplets": [
                    {"instrument": t.instrument, "verb": t.verb, "target": t.target} for t in sorted(f.triplets)
                ],
            }
            for f in video.frames
        ],
    }


def dumps_video(video: AnnotatedVideo) -> str:
    return json.dumps(video_to_dict(video), separators=(", ", ": "))
