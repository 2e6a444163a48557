"""Corpus model: sentences with overlapping typed spans, BIO projection, splits, stats.

The on-disk corpus format is JSON lines: one object per line with fields
``id`` (string), ``tokens`` (list of strings) and ``spans`` (list of
``{"start": int, "end": int, "type": str}``, token-based, end-exclusive).
Blank lines are ignored.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: Built-in entity schema for plasma-physics corpora (16 classes).
PLASMA_ENTITY_TYPES = (
    "Physical Quantity",
    "Physical Effect",
    "Species",
    "Diagnostic Device",
    "Plasma Source",
    "Power Supply",
    "Plasma Medium",
    "Experiment",
    "Electrode Material",
    "Plasma Application",
    "Unit",
    "Modelling",
    "Discharge Regime",
    "Electrode Configuration",
    "Plasma Properties",
    "Plasma Target",
)


class CorpusParseError(ValueError):
    """A corpus line could not be parsed; the message carries the line number."""


class SpanValidationError(ValueError):
    """A span violates the sentence contract; the message names the sentence id."""


class BioTag(IntEnum):
    """Three-valued per-token tag. Integer values double as CRF label indices."""

    O = 0
    B = 1
    I = 2


@dataclass(frozen=True, order=True)
class Span:
    """Typed token span, start inclusive, end exclusive."""

    start: int
    end: int
    etype: str

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise SpanValidationError(
                f"invalid span bounds ({self.start}, {self.end})"
            )
        if not self.etype:
            raise SpanValidationError("span has empty entity type")

    def overlaps(self, other: "Span") -> bool:
        """True iff the token ranges intersect (types are ignored)."""
        return self.start < other.end and other.start < self.end

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Sentence:
    """Tokenized sentence with a set of possibly overlapping gold spans."""

    id: str
    tokens: tuple[str, ...]
    spans: frozenset[Span]

    def __init__(self, id: str, tokens: Sequence[str], spans: Iterable[Span] = ()) -> None:
        span_list = list(spans)
        object.__setattr__(self, "id", id)
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "spans", frozenset(span_list))
        if len(self.tokens) < 1:
            raise SpanValidationError(f"sentence {id!r} has no tokens")
        if len(self.spans) != len(span_list):
            raise SpanValidationError(f"sentence {id!r} has duplicate spans")
        n = len(self.tokens)
        for span in self.spans:
            if span.end > n:
                raise SpanValidationError(
                    f"sentence {id!r}: span ({span.start}, {span.end}, {span.etype!r}) "
                    f"exceeds token count {n}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    def spans_of_type(self, etype: str) -> list[Span]:
        """Spans of one type, sorted by (start, end)."""
        return sorted(
            (s for s in self.spans if s.etype == etype),
            key=lambda s: (s.start, s.end),
        )

    def entity_types(self) -> set[str]:
        return {s.etype for s in self.spans}


@dataclass(frozen=True)
class TypeStats:
    """Per-type corpus statistics row."""

    total: int
    nested: int
    nested_pct: float
    train: int | None = None
    val: int | None = None
    test: int | None = None


@dataclass(frozen=True)
class CorpusStats:
    """Corpus summary: sentence counts plus one `TypeStats` row per present type."""

    n_sentences: int
    per_type: dict[str, TypeStats]
    split_sentences: tuple[int, int, int] | None = None


def _record_to_sentence(record: dict, lineno: int) -> Sentence:
    try:
        sid = record["id"]
        tokens = record["tokens"]
        raw_spans = record["spans"]
    except (KeyError, TypeError) as exc:
        raise CorpusParseError(f"line {lineno}: missing field {exc}") from exc
    if not isinstance(sid, str):
        raise CorpusParseError(f"line {lineno}: 'id' must be a string")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusParseError(f"line {lineno}: 'tokens' must be a list of strings")
    if not isinstance(raw_spans, list):
        raise CorpusParseError(f"line {lineno}: 'spans' must be a list")
    spans = []
    for raw in raw_spans:
        try:
            spans.append(Span(int(raw["start"]), int(raw["end"]), str(raw["type"])))
        except SpanValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusParseError(f"line {lineno}: malformed span {raw!r}") from exc
    return Sentence(sid, tokens, spans)


def parse_corpus(lines: Iterable[str]) -> list[Sentence]:
    """Parse corpus line format into sentences.

    Parameters
    ----------
    lines : iterable of str
        Character stream, one JSON record per non-blank line (an open text
        file works directly).

    Raises
    ------
    CorpusParseError
        On malformed records, with the offending line number.
    SpanValidationError
        On span/token inconsistencies, naming the sentence id.
    """
    sentences = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(f"line {lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise CorpusParseError(f"line {lineno}: record is not an object")
        sentences.append(_record_to_sentence(record, lineno))
    return sentences


def read_corpus(path: str | Path) -> list[Sentence]:
    """Read a corpus file (UTF-8, one record per line)."""
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def sentence_to_record(sentence: Sentence) -> dict:
    """Render one sentence as a corpus-format record (spans in sorted order)."""
    return {
        "id": sentence.id,
        "tokens": list(sentence.tokens),
        "spans": [
            {"start": s.start, "end": s.end, "type": s.etype}
            for s in sorted(sentence.spans)
        ],
    }


def write_corpus(sentences: Iterable[Sentence], out: IO[str] | str | Path) -> None:
    """Write sentences in the corpus line format."""
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8") as fh:
            write_corpus(sentences, fh)
        return
    for sentence in sentences:
        out.write(json.dumps(sentence_to_record(sentence), ensure_ascii=False))
        out.write("\n")


def encode_bio(sentence: Sentence, etype: str) -> list[BioTag]:
    """Project a sentence onto the single-type BIO alphabet.

    Only spans of ``etype`` are kept; every other token becomes O. Same-type
    overlaps cannot be expressed in one BIO layer, so the outermost span wins
    (longest, then earliest start) and losers are dropped with a warning.
    """
    tags = [BioTag.O] * len(sentence)
    kept: list[Span] = []
    candidates = sorted(
        sentence.spans_of_type(etype), key=lambda s: (-s.length, s.start)
    )
    for span in candidates:
        if any(span.overlaps(k) for k in kept):
            logger.warning(
                "sentence %r: dropping span (%d, %d, %r) overlapping a longer "
                "same-type span",
                sentence.id,
                span.start,
                span.end,
                etype,
            )
            continue
        kept.append(span)
    for span in kept:
        tags[span.start] = BioTag.B
        for i in range(span.start + 1, span.end):
            tags[i] = BioTag.I
    return tags


def bio_runs(tags: Sequence[BioTag | int]) -> list[tuple[int, int]]:
    """Extract (start, end) runs from a BIO sequence, leniently.

    B always opens a run; I extends the open run, or opens one when dangling
    (sequence start or right after O). Runs never overlap.
    """
    runs: list[tuple[int, int]] = []
    start: int | None = None
    for i, tag in enumerate(tags):
        tag = BioTag(tag)
        if tag == BioTag.B:
            if start is not None:
                runs.append((start, i))
            start = i
        elif tag == BioTag.I:
            if start is None:
                start = i
        else:
            if start is not None:
                runs.append((start, i))
                start = None
    if start is not None:
        runs.append((start, len(tags)))
    return runs


def decode_bio(tags: Sequence[BioTag | int], etype: str) -> set[Span]:
    """Inverse of :func:`encode_bio` (total, with lenient dangling-I repair)."""
    return {Span(start, end, etype) for start, end in bio_runs(tags)}


def split_corpus(
    docs: Sequence[Sentence],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[Sentence], list[Sentence], list[Sentence]]:
    """Split into (train, val, test) by sentence.

    Uniform shuffle with a seeded generator, then floor-allocated sizes with
    the remainder handed out train-first. Deterministic in (docs order,
    ratios, seed).
    """
    if len(docs) == 0:
        raise ValueError("cannot split an empty corpus")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(docs)
    sizes = [math.floor(n * r) for r in ratios]
    i = 0
    while sum(sizes) < n:
        sizes[i % 3] += 1
        i += 1
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = perm[: sizes[0]]
    val_idx = perm[sizes[0] : sizes[0] + sizes[1]]
    test_idx = perm[sizes[0] + sizes[1] :]
    return (
        [docs[i] for i in train_idx],
        [docs[i] for i in val_idx],
        [docs[i] for i in test_idx],
    )


def _nested_count(sentence: Sentence) -> dict[str, int]:
    """Per-type count of spans overlapping at least one other gold span."""
    spans = sorted(sentence.spans)
    counts: dict[str, int] = {}
    for i, span in enumerate(spans):
        nested = any(span.overlaps(other) for j, other in enumerate(spans) if j != i)
        if nested:
            counts[span.etype] = counts.get(span.etype, 0) + 1
    return counts


def corpus_stats(
    docs: Sequence[Sentence],
    splits: tuple[Sequence[Sentence], Sequence[Sentence], Sequence[Sentence]] | None = None,
) -> CorpusStats:
    """Summarize per-type totals and nesting, optionally per split.

    A span counts as nested when it overlaps any other gold span of the same
    sentence, of any type. Percentages are ``100 * nested / total`` rounded
    to two decimals.
    """
    totals: dict[str, int] = {}
    nested: dict[str, int] = {}
    for sentence in docs:
        for span in sentence.spans:
            totals[span.etype] = totals.get(span.etype, 0) + 1
        for etype, k in _nested_count(sentence).items():
            nested[etype] = nested.get(etype, 0) + k

    split_counts: list[dict[str, int]] | None = None
    split_sentences = None
    if splits is not None:
        split_counts = []
        for part in splits:
            counts: dict[str, int] = {}
            for sentence in part:
                for span in sentence.spans:
                    counts[span.etype] = counts.get(span.etype, 0) + 1
            split_counts.append(counts)
        split_sentences = (len(splits[0]), len(splits[1]), len(splits[2]))

    per_type = {}
    for etype in sorted(totals):
        total = totals[etype]
        row = {
            "total": total,
            "nested": nested.get(etype, 0),
            "nested_pct": round(100.0 * nested.get(etype, 0) / total, 2),
        }
        if split_counts is not None:
            row["train"] = split_counts[0].get(etype, 0)
            row["val"] = split_counts[1].get(etype, 0)
            row["test"] = split_counts[2].get(etype, 0)
        per_type[etype] = TypeStats(**row)
    return CorpusStats(
        n_sentences=len(docs), per_type=per_type, split_sentences=split_sentences
    )


def corpus_entity_types(docs: Iterable[Sentence]) -> list[str]:
    """Sorted list of entity types occurring in the corpus."""
    present: set[str] = set()
    for sentence in docs:
        present.update(sentence.entity_types())
    return sorted(present)
