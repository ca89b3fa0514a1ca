"""Stage runner.

Each stage reads prior-stage files from the output directory, writes its
own files, and records a manifest entry keyed by a digest of its inputs
and parameters. A stage whose key and outputs are unchanged is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable

from . import __version__
from .align import (
    AlignmentPolicy,
    align_clip,
    frames_in_clip,
    parse_video,
    sample_clips,
    segment_annotation_clips,
)
from .config import Config
from .datamodel import (
    ClipFailed,
    ClipSkipped,
    ClipTranscript,
    Conversation,
    ExtractedKnowledge,
    SurgicalProcedure,
    VideoClip,
    question_of,
    read_jsonl,
    render_conversation,
    write_jsonl,
)
from .errors import DegenerateInputError, MissingInputError
from .evaluate import JudgePolicy, Prediction, Reference, evaluate_run, human_correlation
from .extract import ExtractionPolicy, extract_clip
from .generate import GenerationPolicy, conversation_id, export_dataset, file_digest, generate_clip
from .ingest import ingest_corpus, load_catalog, split_procedures
from .llmclient import ChatClient, LiveClient, MockClient, RecordingClient, RetryPolicy, parallel_map
from .prompts import PROMPT_ROOT, load_fewshot, prompt_dir
from .stats import Lexicon, build_report, format_report

log = logging.getLogger(__name__)

STAGES = ("ingest", "extract", "generate", "align", "split", "export", "evaluate", "stats")
UP_TO_DATE = "skipped (up to date)"
NOT_CONFIGURED = "skipped (not configured)"


def make_client(config: Config) -> ChatClient:
    if config.backend == "mock":
        return MockClient(config.fixtures, strict=True)
    live = LiveClient(
        config.endpoint,
        retry=RetryPolicy(seed=config.seed),
        requests_per_second=config.requests_per_second,
    )
    if config.backend == "record":
        return RecordingClient(live, config.fixtures)
    return live


def _digest_json(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode("utf-8"))
        h.update(file_digest(f).encode("ascii"))
    return h.hexdigest()


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    tmp.replace(path)


class Pipeline:
    def __init__(self, config: Config, client: ChatClient | None = None, force: bool = False):
        self.config = config
        self.out = Path(config.out)
        self._client = client
        self.force = force
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()
        self.status: dict[str, str] = {}

    # -- plumbing ------------------------------------------------------------------

    @property
    def client(self) -> ChatClient:
        if self._client is None:
            self._client = make_client(self.config)
        return self._client

    @property
    def backend_calls(self) -> int:
        return self._client.calls if self._client is not None else 0

    @property
    def backend_id(self) -> str:
        if self._client is not None:
            return self._client.backend_id
        return self.config.backend

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                return json.load(fh)
        return {"stages": {}}

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, *paths: Path) -> None:
        for p in paths:
            if p is None or not Path(p).exists():
                raise MissingInputError(f"missing input: {p}")

    def prompt_root(self) -> Path:
        return Path(self.config.prompts) if self.config.prompts else PROMPT_ROOT

    def _up_to_date(self, name: str, key: str) -> bool:
        entry = self.manifest["stages"].get(name)
        if self.force or not entry or entry.get("key") != key:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            p = self.out / rel
            if not p.exists() or file_digest(p) != digest:
                return False
        return True

    def run_stage(self, name: str, inputs: dict[str, Path], params: dict, body: Callable[[], tuple[list[Path], dict]]) -> str:
        self.require(*inputs.values())
        input_digests = {k: (dir_digest(p) if Path(p).is_dir() else file_digest(p)) for k, p in sorted(inputs.items())}
        key = _digest_json({"stage": name, "inputs": input_digests, "params": params, "version": __version__})
        if self._up_to_date(name, key):
            log.info("stage=%s status=skipped reason=up-to-date", name)
            self.status[name] = UP_TO_DATE
            return UP_TO_DATE
        calls_before = self.backend_calls
        outputs, extra = body()
        self.manifest["stages"][name] = {
            "key": key,
            "inputs": {k: {"path": str(inputs[k]), "sha256": d} for k, d in input_digests.items()},
            "params": params,
            "outputs": {str(p.relative_to(self.out)): file_digest(p) for p in sorted(outputs)},
            "backend_calls": self.backend_calls - calls_before,
            **extra,
        }
        _write_json(self.manifest_path, self.manifest)
        log.info("stage=%s status=done outputs=%d backend_calls=%d", name, len(outputs), self.backend_calls - calls_before)
        self.status[name] = "done"
        return "done"

    def _record_outcomes(self, stage: str, failures: list[ClipFailed], skipped: list[ClipSkipped]) -> list[Path]:
        """Write per-stage failure/skip files and refresh the merged failures.jsonl / skipped.jsonl."""
        fpath = self.out / "failures" / f"{stage}.jsonl"
        spath = self.out / "skipped" / f"{stage}.jsonl"
        write_jsonl(fpath, failures)
        write_jsonl(spath, skipped)
        for kind, cls in (("failures", ClipFailed), ("skipped", ClipSkipped)):
            merged = []
            for f in sorted((self.out / kind).glob("*.jsonl")):
                merged.extend(read_jsonl(f, cls))
            write_jsonl(self.out / f"{kind}.jsonl", merged)
        return [fpath, spath]

    def _llm_params(self, model: str, section) -> dict:
        params = {"backend": self.backend_id, "model": model, "seed": self.config.seed}
        params.update(asdict(section))
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}

    def _titles(self) -> dict[str, str]:
        procs = read_jsonl(self.path("procedures.jsonl"), SurgicalProcedure)
        clips = read_jsonl(self.path("clips.jsonl"), VideoClip)
        title = {p.procedure_id: p.title for p in procs}
        return {c.clip_id: title[c.procedure_id] for c in clips}

    # -- stages --------------------------------------------------------------------

    def ingest(self) -> str:
        cfg = self.config.ingest
        if cfg.catalog is None or cfg.asr_dir is None:
            raise MissingInputError("ingest needs ingest.catalog and ingest.asr_dir")

        def body():
            procedures = load_catalog(cfg.catalog)
            clips, transcripts = ingest_corpus(procedures, cfg.asr_dir, cfg.min_s, cfg.max_s)
            outs = [self.path("procedures.jsonl"), self.path("clips.jsonl"), self.path("transcripts.jsonl")]
            write_jsonl(outs[0], procedures)
            write_jsonl(outs[1], clips)
            write_jsonl(outs[2], transcripts)
            return outs, {"counts": {"procedures": len(procedures), "clips": len(clips)}}

        params = {"min_s": cfg.min_s, "max_s": cfg.max_s}
        return self.run_stage("ingest", {"catalog": cfg.catalog, "asr_dir": cfg.asr_dir}, params, body)

    def extract(self) -> str:
        cfg = self.config.extract
        policy = ExtractionPolicy(
            min_words=cfg.min_words,
            retries=cfg.retries,
            model=self.config.model,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
            prompt_version=cfg.prompt_version,
        )
        root = self.prompt_root()
        inputs = {
            "transcripts": self.path("transcripts.jsonl"),
            "clips": self.path("clips.jsonl"),
            "procedures": self.path("procedures.jsonl"),
            "prompts": prompt_dir("extraction", cfg.prompt_version, root),
        }

        def body():
            titles = self._titles()
            transcripts = read_jsonl(self.path("transcripts.jsonl"), ClipTranscript)
            fewshot = load_fewshot(cfg.prompt_version, root)
            results = parallel_map(
                lambda t: extract_clip(titles[t.clip_id], t, self.client, policy, fewshot, root),
                transcripts,
                self.config.max_in_flight,
            )
            knowledge = [r for r in results if isinstance(r, ExtractedKnowledge)]
            failures = [r for r in results if isinstance(r, ClipFailed)]
            skipped = [r for r in results if isinstance(r, ClipSkipped)]
            write_jsonl(self.path("knowledge.jsonl"), knowledge)
            outs = [self.path("knowledge.jsonl"), *self._record_outcomes("extract", failures, skipped)]
            counts = {"extracted": len(knowledge), "failed": len(failures), "skipped": len(skipped)}
            return outs, {"counts": counts, "prompt_version": cfg.prompt_version}

        return self.run_stage("extract", inputs, self._llm_params(self.config.model, cfg), body)

    def generate(self) -> str:
        cfg = self.config.generate
        policy = GenerationPolicy(
            model=self.config.model,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
            retries=cfg.retries,
            prompt_version=cfg.prompt_version,
        )
        root = self.prompt_root()
        inputs = {
            "knowledge": self.path("knowledge.jsonl"),
            "clips": self.path("clips.jsonl"),
            "procedures": self.path("procedures.jsonl"),
            "prompts": prompt_dir("generation", cfg.prompt_version, root),
        }

        def body():
            titles = self._titles()
            clips = {c.clip_id: c for c in read_jsonl(self.path("clips.jsonl"), VideoClip)}
            knowledge = read_jsonl(self.path("knowledge.jsonl"), ExtractedKnowledge)
            work = [k for k in knowledge if k.units]
            skipped = [ClipSkipped(k.clip_id, "generate", "no_observations") for k in knowledge if not k.units]
            results = parallel_map(
                lambda k: generate_clip(
                    titles[k.clip_id], clips[k.clip_id], k, self.client, policy,
                    self.config.seed, self.config.video_token, root,
                ),
                work,
                self.config.max_in_flight,
            )
            conversations = [conv for conv, _ in results if conv is not None]
            failures = [f for _, fs in results for f in fs]
            summary = export_dataset(
                conversations,
                self.path("dataset.jsonl"),
                self.config.video_token,
                prompt_version=cfg.prompt_version,
                seed=self.config.seed,
                backend=self.backend_id,
                model=self.config.model,
            )
            outs = [self.path("dataset.jsonl"), *self._record_outcomes("generate", failures, skipped)]
            return outs, {"dataset": summary}

        return self.run_stage("generate", inputs, self._llm_params(self.config.model, cfg), body)

    def align(self) -> str:
        cfg = self.config.align
        if cfg.triplets is None:
            self.status["align"] = NOT_CONFIGURED
            return NOT_CONFIGURED
        policy = AlignmentPolicy(
            model=self.config.model,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
            retries=cfg.retries,
            prompt_version=cfg.prompt_version,
        )
        root = self.prompt_root()
        inputs = {"triplets": cfg.triplets, "prompts": prompt_dir("alignment", cfg.prompt_version, root)}

        def body():
            videos = read_jsonl(cfg.triplets, parse_video)
            work = []
            all_clips = []
            for video in videos:
                clips = segment_annotation_clips(video.duration_s, video.fps, cfg.min_s, cfg.max_s, video.video_id)
                all_clips.extend(clips)
                work.extend((c, frames_in_clip(video.frames, c, video.fps)) for c in clips)
            chosen = {c.clip_id for c in sample_clips([c for c, _ in work], cfg.sample_size, self.config.seed)}
            work = [(c, f) for c, f in work if c.clip_id in chosen]
            results = parallel_map(
                lambda cf: align_clip(cf[0], cf[1], self.client, policy, self.config.seed, root),
                work,
                self.config.max_in_flight,
            )
            conversations = [r for r in results if isinstance(r, Conversation)]
            summary = export_dataset(
                conversations,
                self.path("alignment_dataset.jsonl"),
                self.config.video_token,
                prompt_version=cfg.prompt_version,
                seed=self.config.seed,
                sample_size=cfg.sample_size,
                backend=self.backend_id,
                model=self.config.model,
            )
            write_jsonl(self.path("alignment_clips.jsonl"), all_clips)
            outs = [
                self.path("alignment_dataset.jsonl"),
                self.path("alignment_clips.jsonl"),
                *self._record_outcomes(
                    "align",
                    [r for r in results if isinstance(r, ClipFailed)],
                    [r for r in results if isinstance(r, ClipSkipped)],
                ),
            ]
            return outs, {"dataset": summary}

        return self.run_stage("align", inputs, self._llm_params(self.config.model, cfg), body)

    def split(self) -> str:
        cfg = self.config.split

        def body():
            procs = read_jsonl(self.path("procedures.jsonl"), SurgicalProcedure)
            train, test = split_procedures(procs, cfg.test_fraction, self.config.seed)
            data = {
                "seed": self.config.seed,
                "test_fraction": cfg.test_fraction,
                "train": sorted(p.procedure_id for p in train),
                "test": sorted(p.procedure_id for p in test),
            }
            _write_json(self.path("split.json"), data)
            return [self.path("split.json")], {"counts": {"train": len(train), "test": len(test)}}

        params = {"seed": self.config.seed, "test_fraction": cfg.test_fraction}
        return self.run_stage("split", {"procedures": self.path("procedures.jsonl")}, params, body)

    def export(self) -> str:
        inputs = {
            "dataset": self.path("dataset.jsonl"),
            "clips": self.path("clips.jsonl"),
            "knowledge": self.path("knowledge.jsonl"),
            "split": self.path("split.json"),
        }
        if self.path("alignment_dataset.jsonl").exists():
            inputs["alignment"] = self.path("alignment_dataset.jsonl")
        vt, st = self.config.video_token, self.config.stop_token

        def body():
            with open(self.path("split.json"), encoding="utf-8") as fh:
                test_procs = set(json.load(fh)["test"])
            proc_of = {c.clip_id: c.procedure_id for c in read_jsonl(self.path("clips.jsonl"), VideoClip)}
            knowledge = {k.clip_id: k for k in read_jsonl(self.path("knowledge.jsonl"), ExtractedKnowledge)}
            dataset = read_jsonl(self.path("dataset.jsonl"), Conversation)
            train = [c for c in dataset if proc_of[c.clip_id] not in test_procs]
            test = [c for c in dataset if proc_of[c.clip_id] in test_procs]
            if "alignment" in inputs:
                train += read_jsonl(inputs["alignment"], Conversation)
            references = [
                Reference(
                    c.id,
                    question_of(c.turns[0].content, c.video_placement, vt),
                    tuple(knowledge[c.clip_id].observations),
                )
                for c in test
            ]
            d = self.out / "export"
            outs = [d / "train.jsonl", d / "test.jsonl", d / "references_test.jsonl", d / "train_rendered.jsonl"]
            write_jsonl(outs[0], train)
            write_jsonl(outs[1], test)
            write_jsonl(outs[2], references)
            rendered = [{"id": c.id, "text": render_conversation(c, vt, st)} for c in train]
            write_jsonl(outs[3], rendered, key=lambda r: r["id"])
            return outs, {"counts": {"train": len(train), "test": len(test)}}

        return self.run_stage("export", inputs, {"video_token": vt, "stop_token": st}, body)

    def evaluate(self) -> str:
        cfg = self.config.evaluate
        if cfg.predictions is None:
            self.status["evaluate"] = NOT_CONFIGURED
            return NOT_CONFIGURED
        references = cfg.references or self.out / "export" / "references_test.jsonl"
        policy = JudgePolicy(
            model=self.config.judge_model,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
            retries=cfg.retries,
            prompt_version=cfg.prompt_version,
        )
        root = self.prompt_root()
        inputs = {
            "predictions": cfg.predictions,
            "references": references,
            "prompts": prompt_dir("judge", cfg.prompt_version, root),
        }
        if cfg.human is not None:
            inputs["human"] = cfg.human
        for stage in ("extract", "generate"):
            upstream = self.out / "failures" / f"{stage}.jsonl"
            if upstream.exists():
                inputs[f"failures_{stage}"] = upstream

        def body():
            preds = read_jsonl(cfg.predictions, Prediction)
            refs = read_jsonl(references, Reference)
            preds, skipped = self._drop_upstream_failures(preds, refs, inputs)
            verdicts, report, failures = evaluate_run(
                preds, refs, self.client, policy, self.config.max_in_flight, root
            )
            write_jsonl(self.path("verdicts.jsonl"), verdicts)
            metrics = report.to_dict() if report else {
                "n_items": 0, "failures": len(failures), "mean_score": None,
                "accuracy_at_1": None, "accuracy_at_all": None,
            }
            _write_json(self.path("metrics.json"), metrics)
            outs = [self.path("verdicts.jsonl"), self.path("metrics.json")]
            if cfg.human is not None:
                try:
                    corr = human_correlation(verdicts, read_jsonl(cfg.human))
                except DegenerateInputError as exc:
                    # too few or constant scores after failures; report rather than abort
                    corr = {"n": len(verdicts), "spearman_rho": None, "reason": str(exc)}
                _write_json(self.path("correlation.json"), corr)
                outs.append(self.path("correlation.json"))
            outs += self._record_outcomes("evaluate", failures, skipped)
            return outs, {"metrics": metrics}

        return self.run_stage("evaluate", inputs, self._llm_params(self.config.judge_model, cfg), body)

    def _drop_upstream_failures(self, preds, refs, inputs) -> tuple[list[Prediction], list[ClipSkipped]]:
        """Predictions whose conversation was never built because its clip failed upstream.

        They have no reference, and judging them is impossible; they are recorded
        as skipped. Any other prediction without a reference still raises JoinError.
        """
        lost = set()
        for name, path in inputs.items():
            if name.startswith("failures_"):
                lost.update(conversation_id(f.clip_id) for f in read_jsonl(path, ClipFailed))
        known = {r.id for r in refs}
        keep, skipped = [], []
        for p in preds:
            if p.id not in known and p.id in lost:
                skipped.append(ClipSkipped(p.id, "evaluate", "upstream_failed"))
            else:
                keep.append(p)
        return keep, skipped

    def stats(self) -> str:
        cfg = self.config.stats
        inputs = {
            "dataset": self.path("dataset.jsonl"),
            "clips": self.path("clips.jsonl"),
            "procedures": self.path("procedures.jsonl"),
        }
        if cfg.verbs:
            inputs["verbs"] = cfg.verbs
        if cfg.nouns:
            inputs["nouns"] = cfg.nouns

        def body():
            report = build_report(
                read_jsonl(self.path("dataset.jsonl"), Conversation),
                read_jsonl(self.path("clips.jsonl"), VideoClip),
                read_jsonl(self.path("procedures.jsonl"), SurgicalProcedure),
                Lexicon.load(cfg.verbs, cfg.nouns),
                cfg.top_k,
            )
            _write_json(self.path("report.json"), report)
            self.path("report.txt").write_text(format_report(report), encoding="utf-8")
            return [self.path("report.json"), self.path("report.txt")], {}

        return self.run_stage("stats", inputs, {"top_k": cfg.top_k}, body)

    def run(self, stages=STAGES) -> dict[str, str]:
        for name in stages:
            getattr(self, name)()
        return dict(self.status)


def run_pipeline(config: Config, stages=STAGES, client: ChatClient | None = None, force: bool = False) -> Pipeline:
    pipe = Pipeline(config, client=client, force=force)
    pipe.run(stages)
    return pipe
