"""Dataset reports: verb-noun frequencies, category breakdowns, corpus summary.

Verb and noun detection is a lexicon lookup with crude suffix stripping,
not a parser. Reports say so in their metadata.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .datamodel import Conversation, SurgicalProcedure, VideoClip
from .errors import UnresolvedClipError

LEXICON_ROOT = Path(__file__).parent / "lexicon"
_TOKEN = re.compile(r"[A-Za-z]+(?:-[A-Za-z]+)*")


@dataclass(frozen=True)
class Lexicon:
    verbs: frozenset[str]
    nouns: frozenset[str]

    @classmethod
    def load(cls, verbs_path=None, nouns_path=None) -> Lexicon:
        return cls(
            _read_words(verbs_path or LEXICON_ROOT / "verbs.txt"),
            _read_words(nouns_path or LEXICON_ROOT / "nouns.txt"),
        )


def _read_words(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip() and not w.startswith("#"))


def lemma_candidates(token: str) -> list[str]:
    """The token itself, then guesses at its base form."""
    t = token.lower()
    out = [t]
    if t.endswith("ies") and len(t) > 4:
        out.append(t[:-3] + "y")
    if t.endswith("ied") and len(t) > 4:
        out.append(t[:-3] + "y")
    if t.endswith("es"):
        out.append(t[:-2])
    if t.endswith("s") and not t.endswith("ss"):
        out.append(t[:-1])
    if t.endswith("ed"):
        out += [t[:-1], t[:-2]]
        if len(t) > 4 and t[-3] == t[-4]:
            out.append(t[:-3])
    if t.endswith("ing") and len(t) > 5:
        out += [t[:-3], t[:-3] + "e"]
        if t[-4] == t[-5]:
            out.append(t[:-4])
    return out


def lemma_in(token: str, words: frozenset[str]) -> str | None:
    for cand in lemma_candidates(token):
        if cand in words:
            return cand
    return None


def root_verb_noun(text: str, lexicon: Lexicon) -> tuple[str | None, str | None]:
    """First token whose lemma is a known verb, then the first known noun after it.

    The verb is reported as its lemma, the noun as written (lowercased).
    """
    tokens = _TOKEN.findall(text)
    for i, tok in enumerate(tokens):
        verb = lemma_in(tok, lexicon.verbs)
        if verb is None:
            continue
        for later in tokens[i + 1 :]:
            if lemma_in(later, lexicon.nouns) is not None:
                return verb, later.lower()
        return verb, None
    return None, None


def _pair_sort_key(item):
    (verb, noun), count = item
    return (-count, verb or "", noun or "")


def verb_noun_pairs(responses: Iterable[str], lexicon: Lexicon) -> list[tuple[tuple[str | None, str | None], int]]:
    """Frequency table sorted by count descending, then by key; unmatched responses count as (None, None)."""
    counts = Counter(root_verb_noun(r, lexicon) for r in responses)
    return sorted(counts.items(), key=_pair_sort_key)


def resolve_categories(
    dataset: Sequence[Conversation], clips: Sequence[VideoClip], catalog: Sequence[SurgicalProcedure]
) -> list[str]:
    proc_of = {c.clip_id: c.procedure_id for c in clips}
    category_of = {p.procedure_id: p.category for p in catalog}
    out = []
    for conv in dataset:
        proc = proc_of.get(conv.clip_id)
        if proc is None or proc not in category_of:
            raise UnresolvedClipError(f"cannot resolve clip {conv.clip_id!r} to a catalogued procedure")
        out.append(category_of[proc])
    return out


def category_distribution(
    dataset: Sequence[Conversation], clips: Sequence[VideoClip], catalog: Sequence[SurgicalProcedure]
) -> dict:
    """Conversations per category, with the QA pairs of each category broken down by kind."""
    categories = resolve_categories(dataset, clips, catalog)
    conversations = Counter(categories)
    pairs: dict[str, Counter] = {}
    for cat, conv in zip(categories, dataset):
        pairs.setdefault(cat, Counter()).update(conv.pair_kinds or (conv.kind,) * conv.n_rounds)
    return {
        "conversations": dict(sorted(conversations.items())),
        "pairs_by_kind": {cat: dict(sorted(pairs[cat].items())) for cat in sorted(pairs)},
    }


def corpus_summary(clips: Sequence[VideoClip], dataset: Sequence[Conversation]) -> dict:
    rounds = Counter(c.n_rounds for c in dataset)
    return {
        "n_clips": len(clips),
        "n_pairs": sum(c.n_rounds for c in dataset),
        "mean_clip_length_s": sum(c.duration_s for c in clips) / len(clips) if clips else 0.0,
        "rounds_histogram": {str(k): rounds[k] for k in sorted(rounds)},
    }


def assistant_turns(dataset: Sequence[Conversation]) -> list[str]:
    return [t.content for c in sorted(dataset, key=lambda c: c.id) for t in c.turns if t.role == "assistant"]


def build_report(
    dataset: Sequence[Conversation],
    clips: Sequence[VideoClip],
    catalog: Sequence[SurgicalProcedure],
    lexicon: Lexicon,
    top_k: int = 20,
) -> dict:
    table = verb_noun_pairs(assistant_turns(dataset), lexicon)
    return {
        "summary": corpus_summary(clips, dataset),
        "categories": category_distribution(dataset, clips, catalog),
        "verb_noun_pairs": [{"verb": v, "noun": n, "count": c} for (v, n), c in table[:top_k]],
        "meta": {
            "verb_noun_method": "approximate: lexicon lookup with suffix stripping, no parser",
            "responses": sum(c for _, c in table),
        },
    }


def format_report(report: dict) -> str:
    s = report["summary"]
    lines = [
        f"clips              {s['n_clips']}",
        f"qa pairs           {s['n_pairs']}",
        f"mean clip length   {s['mean_clip_length_s']:.2f} s",
        "rounds per conversation:",
    ]
    lines += [f"  {k:>3}  {v}" for k, v in s["rounds_histogram"].items()]
    lines.append("conversations per category:")
    lines += [f"  {cat:<24} {n}" for cat, n in report["categories"]["conversations"].items()]
    lines.append("root verb / direct noun (approximate):")
    for row in report["verb_noun_pairs"]:
        lines.append(f"  {row['verb'] or '-':<14} {row['noun'] or '-':<18} {row['count']}")
    return "\n".join(lines) + "\n"
