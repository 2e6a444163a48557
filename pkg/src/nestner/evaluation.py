"""Strict span-based and token-based P/R/F1, per entity type and micro-pooled."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import Sentence, Span


@dataclass(frozen=True)
class Counts:
    """True/false positive and false negative tallies.

    Precision, recall and F1 fall back to 0 when their denominator is 0.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def span_counts(gold: Iterable[Span], pred: Iterable[Span], etype: str) -> Counts:
    """Strict span matching for one type: exact (start, end, type) equality."""
    gold_set = {s for s in gold if s.etype == etype}
    pred_set = {s for s in pred if s.etype == etype}
    tp = len(gold_set & pred_set)
    return Counts(tp=tp, fp=len(pred_set) - tp, fn=len(gold_set) - tp)


def token_counts(gold: Iterable[Span], pred: Iterable[Span], etype: str, n: int) -> Counts:
    """Token-level matching for one type, B/I collapsed to plain membership."""

    def membership(spans: Iterable[Span]) -> set[int]:
        tokens: set[int] = set()
        for span in spans:
            if span.etype != etype:
                continue
            if span.end > n:
                raise ValueError(
                    f"span ({span.start}, {span.end}) out of range for length {n}"
                )
            tokens.update(range(span.start, span.end))
        return tokens

    gold_tokens = membership(gold)
    pred_tokens = membership(pred)
    return Counts(
        tp=len(gold_tokens & pred_tokens),
        fp=len(pred_tokens - gold_tokens),
        fn=len(gold_tokens - pred_tokens),
    )


def micro_average(per_type: Mapping[str, Counts]) -> tuple[float, float, float]:
    """Pool counts across types, then compute (precision, recall, F1) once."""
    pooled = Counts()
    for counts in per_type.values():
        pooled = pooled + counts
    return pooled.precision, pooled.recall, pooled.f1


@dataclass
class EvalReport:
    """Per-type and micro-pooled counts under both evaluation schemes."""

    span: dict[str, Counts] = field(default_factory=dict)
    token: dict[str, Counts] = field(default_factory=dict)

    @property
    def micro_span(self) -> Counts:
        pooled = Counts()
        for counts in self.span.values():
            pooled = pooled + counts
        return pooled

    @property
    def micro_token(self) -> Counts:
        pooled = Counts()
        for counts in self.token.values():
            pooled = pooled + counts
        return pooled

    def to_dict(self) -> dict:
        def row(counts: Counts) -> dict:
            return {
                "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
                "precision": counts.precision, "recall": counts.recall, "f1": counts.f1,
            }

        return {
            "per_type": {
                etype: {"span": row(self.span[etype]), "token": row(self.token[etype])}
                for etype in self.span
            },
            "micro": {"span": row(self.micro_span), "token": row(self.micro_token)},
        }

    def render(self) -> str:
        """Aligned text table: one row per type plus the micro row, both schemes."""
        header = (
            f"{'Entity Type':<24} {'Span P':>7} {'Span R':>7} {'Span F1':>8} "
            f"{'Tok P':>7} {'Tok R':>7} {'Tok F1':>7}"
        )
        lines = [header, "-" * len(header)]
        for etype in sorted(self.span):
            s, t = self.span[etype], self.token[etype]
            lines.append(
                f"{etype:<24} {s.precision:>7.2f} {s.recall:>7.2f} {s.f1:>8.2f} "
                f"{t.precision:>7.2f} {t.recall:>7.2f} {t.f1:>7.2f}"
            )
        lines.append("-" * len(header))
        s, t = self.micro_span, self.micro_token
        lines.append(
            f"{'micro':<24} {s.precision:>7.2f} {s.recall:>7.2f} {s.f1:>8.2f} "
            f"{t.precision:>7.2f} {t.recall:>7.2f} {t.f1:>7.2f}"
        )
        return "\n".join(lines)


def evaluate_bundle(bundle, test: Sequence[Sentence], features: Mapping) -> EvalReport:
    """Score a model bundle on a test split under both schemes.

    `features` maps sentence id to its FeatureMatrix; every test sentence
    must be covered and match the bundle's featurizer.
    """
    from .nesting import predict_nested  # deferred: nesting imports this module

    if not test:
        raise ValueError("test split is empty")
    report = EvalReport(
        span={etype: Counts() for etype in bundle.types},
        token={etype: Counts() for etype in bundle.types},
    )
    for sentence in test:
        predicted = predict_nested(bundle, sentence, features[sentence.id])
        for etype in bundle.types:
            report.span[etype] = report.span[etype] + span_counts(
                sentence.spans, predicted, etype
            )
            report.token[etype] = report.token[etype] + token_counts(
                sentence.spans, predicted, etype, len(sentence)
            )
    return report
