"""Ranking metrics for predicted interaction sets and their aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Hashable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .exceptions import EmptyInputError, InvalidParameterError, MisalignedQueriesError
from .util import format_mapping_line, parse_mapping_line, quote_field, unquote_field

logger = logging.getLogger(__name__)

H = TypeVar("H", bound=Hashable)

METRICS = ("recall", "ndcg", "jaccard")


def _check(k: int, truth: Collection[object]) -> None:
    if k < 1:
        raise InvalidParameterError("k", k, "k >= 1")
    if not truth:
        raise EmptyInputError("ground truth")


def recall_at_k(ranked: Sequence[H], truth: Collection[H], k: int) -> float:
    """Share of the truth found in the top ``k``."""
    _check(k, truth)
    return len(set(ranked[:k]) & set(truth)) / len(set(truth))


def ndcg_at_k(ranked: Sequence[H], truth: Collection[H], k: int) -> float:
    _check(k, truth)
    relevant = set(truth)
    seen: set[H] = set()
    dcg = 0.0
    for position, item in enumerate(ranked[:k], 1):
        if item in relevant and item not in seen:
            dcg += 1.0 / math.log2(position + 1)
        seen.add(item)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


def jaccard_metric(ranked: Sequence[H], truth: Collection[H], k: int = 5) -> float:
    """Jaccard similarity of the top-``k`` set and the truth."""
    if k < 1:
        raise InvalidParameterError("k", k, "k >= 1")
    predicted, actual = set(ranked[:k]), set(truth)
    if not predicted and not actual:
        raise EmptyInputError("prediction and ground truth")
    return len(predicted & actual) / len(predicted | actual)


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    ranked: tuple[str, ...]
    truth: frozenset[str]
    recall: float
    ndcg: float
    jaccard: float


@dataclass(frozen=True)
class MetricSummary:
    name: str
    mean: float
    std: float
    count: int

    def to_line(self) -> str:
        return f"{self.name}={self.mean:.6f}±{self.std:.6f}"


def summarize(name: str, values: Sequence[float]) -> MetricSummary:
    """Mean and sample standard deviation; a single value has std 0."""
    if not values:
        return MetricSummary(name, 0.0, 0.0, 0)
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return MetricSummary(name, float(array.mean()), std, len(array))


@dataclass(frozen=True)
class EvalReport:
    k: int
    summaries: tuple[MetricSummary, ...]
    records: tuple[EvalRecord, ...] = ()
    skipped: tuple[str, ...] = ()
    #: per-run metric means, one mapping per seed
    runs: tuple[Mapping[str, float], ...] = field(default_factory=tuple)

    def summary(self, metric: str) -> MetricSummary:
        name = metric if "@" in metric else f"{metric}@{self.k}"
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(metric)

    def to_lines(self) -> list[str]:
        return [s.to_line() for s in self.summaries]

    def to_text(self) -> str:
        width = max(len(s.name) for s in self.summaries)
        lines = [f"{'metric':<{width}}  {'mean':>8}  {'std':>8}  {'n':>5}"]
        lines += [
            f"{s.name:<{width}}  {s.mean:8.4f}  {s.std:8.4f}  {s.count:5d}"
            for s in self.summaries
        ]
        if len(self.runs) > 1:
            for i, run in enumerate(self.runs):
                values = "  ".join(f"{name}={value:.4f}" for name, value in run.items())
                lines.append(f"run {i}: {values}")
        if self.skipped:
            lines.append(f"skipped {len(self.skipped)} query(ies) with empty truth")
        return "\n".join(lines) + "\n"


def evaluate_run(
    predictions: Mapping[str, Sequence[str]],
    truth: Mapping[str, Collection[str]],
    k: int = 5,
) -> EvalReport:
    """Score every query; queries with empty truth are skipped and listed."""
    missing = sorted(set(truth) - set(predictions))
    extra = sorted(set(predictions) - set(truth))
    if missing or extra:
        raise MisalignedQueriesError(missing, extra)
    records = []
    skipped = []
    for query_id in sorted(truth):
        actual = frozenset(truth[query_id])
        ranked = tuple(predictions[query_id])
        if not actual:
            skipped.append(query_id)
            continue
        records.append(
            EvalRecord(
                query_id,
                ranked,
                actual,
                recall_at_k(ranked, actual, k),
                ndcg_at_k(ranked, actual, k),
                jaccard_metric(ranked, actual, k),
            )
        )
    if skipped:
        logger.info("evaluate: skipped %d query(ies) with empty truth", len(skipped))
    summaries = tuple(
        summarize(f"{metric}@{k}", [getattr(r, metric) for r in records])
        for metric in METRICS
    )
    run = {s.name: s.mean for s in summaries}
    return EvalReport(k, summaries, tuple(records), tuple(skipped), (run,))


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Aggregate runs: mean and sample std of the per-run means."""
    if not reports:
        raise EmptyInputError("report list")
    k = reports[0].k
    runs = tuple(run for report in reports for run in report.runs)
    names = list(runs[0])
    summaries = tuple(summarize(name, [run[name] for run in runs]) for name in names)
    skipped = tuple(q for report in reports for q in report.skipped)
    return EvalReport(k, summaries, (), skipped, runs)


def write_dump(path: Path, rows: Mapping[str, Iterable[str]]) -> None:
    """Write ``query_id: node,node,...`` lines, sorted by query id."""
    path.write_text(
        "".join(
            format_mapping_line(query_id, (quote_field(n) for n in rows[query_id]))
            + "\n"
            for query_id in sorted(rows)
        ),
        encoding="utf-8",
    )


def read_dump(path: Path) -> dict[str, tuple[str, ...]]:
    rows = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            query_id, values = parse_mapping_line(line)
            rows[query_id] = tuple(unquote_field(v) for v in values)
    return rows
