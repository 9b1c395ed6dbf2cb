"""Evaluation harness: Recall@K, subset Recall@K and truncated mAP@K."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import InputError

CIRCO_MAP_KS = (5, 10, 25, 50)
CIRR_RECALL_KS = (1, 5, 10, 50)
CIRR_SUBSET_KS = (1, 2, 3)
FASHIONIQ_RECALL_KS = (10, 50)


@dataclass(frozen=True)
class RelevanceJudgment:
    """Ground truths for one query, plus the candidate subset when present."""

    query_id: str
    ground_truth_ids: frozenset[str]
    subset_ids: frozenset[str] | None = None
    reference_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ground_truth_ids", frozenset(self.ground_truth_ids))
        if not self.ground_truth_ids:
            raise InputError(f"query {self.query_id!r} has an empty ground-truth set")
        if self.reference_id is not None and self.reference_id in self.ground_truth_ids:
            raise InputError(f"query {self.query_id!r} lists its reference image as a ground truth")
        if self.subset_ids is not None:
            object.__setattr__(self, "subset_ids", frozenset(self.subset_ids))
            if not self.ground_truth_ids & self.subset_ids:
                raise InputError(f"query {self.query_id!r} subset contains no ground truth")


def _ranking_for(rankings, judgment: RelevanceJudgment, k: int, require_length: bool) -> list[str]:
    try:
        ranking = rankings[judgment.query_id]
    except KeyError:
        raise InputError(f"no ranking for query {judgment.query_id!r}") from None
    ranking = [entry[0] if isinstance(entry, (tuple, list)) else entry for entry in ranking]
    if require_length and len(ranking) < k:
        raise InputError(f"ranking for query {judgment.query_id!r} has {len(ranking)} entries, needs >= {k}")
    return ranking


def recall_at_k(rankings, judgments, k: int) -> float:
    """Fraction of queries with at least one ground truth in the top K."""
    judgments = list(judgments)
    if not judgments:
        raise InputError("no queries to evaluate")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    hits = 0
    for judgment in judgments:
        ranking = _ranking_for(rankings, judgment, k, require_length=True)
        if judgment.ground_truth_ids & set(ranking[:k]):
            hits += 1
    return hits / len(judgments)


def recall_subset_at_k(rankings, judgments, k: int) -> float:
    """Recall@K after restricting each ranking to the query's candidate subset.

    The reference image is removed from the candidates, leaving the 5-way
    forced choice; ordering within the full ranking is preserved.
    """
    judgments = list(judgments)
    if not judgments:
        raise InputError("no queries to evaluate")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    hits = 0
    for judgment in judgments:
        if judgment.subset_ids is None:
            raise InputError(f"query {judgment.query_id!r} has no candidate subset")
        candidates = set(judgment.subset_ids)
        if judgment.reference_id is not None:
            candidates.discard(judgment.reference_id)
        ranking = _ranking_for(rankings, judgment, k, require_length=False)
        filtered = [image_id for image_id in ranking if image_id in candidates]
        if judgment.ground_truth_ids & set(filtered[:k]):
            hits += 1
    return hits / len(judgments)


def average_precision_at_k(ranking, ground_truth_ids, k: int) -> float:
    """Truncated AP with the 1/min(K, G) normalizer; items past the ranking count as misses."""
    ground_truth_ids = set(ground_truth_ids)
    if not ground_truth_ids:
        raise InputError("empty ground-truth set")
    relevant_seen = 0
    precision_sum = 0.0
    for rank in range(1, k + 1):
        if rank <= len(ranking) and ranking[rank - 1] in ground_truth_ids:
            relevant_seen += 1
            precision_sum += relevant_seen / rank
    return precision_sum / min(k, len(ground_truth_ids))


def map_at_k(rankings, judgments, k: int) -> float:
    """Mean truncated average precision over all queries.

    Rankings shorter than K are legal: ranks past the end count as misses,
    so the inner sum still runs to K.
    """
    judgments = list(judgments)
    if not judgments:
        raise InputError("no queries to evaluate")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    total = 0.0
    for judgment in judgments:
        ranking = _ranking_for(rankings, judgment, k, require_length=False)
        total += average_precision_at_k(ranking, judgment.ground_truth_ids, k)
    return total / len(judgments)


@dataclass
class MetricsReport:
    """metric name -> K -> score, plus the evaluated query count."""

    metrics: dict[str, dict[int, float]]
    query_count: int
    plan: str = ""

    def __post_init__(self):
        if self.query_count < 1:
            raise InputError("a report needs at least one query")
        for name, by_k in self.metrics.items():
            for k, value in by_k.items():
                if not 0.0 <= value <= 1.0:
                    raise InputError(f"{name}@{k}={value} outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "plan": self.plan,
            "query_count": self.query_count,
            "metrics": {name: {str(k): v for k, v in sorted(by_k.items())} for name, by_k in self.metrics.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per metric, one column per K, mirroring a results table."""
        ks = sorted({k for by_k in self.metrics.values() for k in by_k})
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric"] + [f"K={k}" for k in ks])
        for name in self.metrics:
            row = [name] + [f"{self.metrics[name][k]:.4f}" if k in self.metrics[name] else "" for k in ks]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_json_dict(cls, payload: dict) -> "MetricsReport":
        metrics = {name: {int(k): float(v) for k, v in by_k.items()} for name, by_k in payload["metrics"].items()}
        return cls(metrics=metrics, query_count=int(payload["query_count"]), plan=str(payload.get("plan", "")))


def evaluate(dataset, rankings, plan: str | None = None, recall_ks=None, subset_ks=None, map_ks=None) -> MetricsReport:
    """Run the metric plan appropriate for a loaded dataset.

    ``dataset`` must expose ``kind`` and ``judgments()``; the fashioniq plan
    additionally needs per-category judgments and reports their plain mean as
    the average row.
    """
    plan = plan or getattr(dataset, "kind", None)
    if plan not in ("circo", "cirr", "fashioniq"):
        raise InputError(f"unknown metric plan {plan!r}")
    judgments = dataset.judgments()
    if not judgments:
        raise InputError("dataset has no queries")

    if plan == "circo":
        ks = tuple(map_ks or CIRCO_MAP_KS)
        metrics = {"map": {k: map_at_k(rankings, judgments, k) for k in ks}}
    elif plan == "cirr":
        if any(j.subset_ids is None for j in judgments):
            raise InputError("the cirr plan needs candidate subsets on every query")
        r_ks = tuple(recall_ks or CIRR_RECALL_KS)
        s_ks = tuple(subset_ks or CIRR_SUBSET_KS)
        metrics = {
            "recall": {k: recall_at_k(rankings, judgments, k) for k in r_ks},
            "recall_subset": {k: recall_subset_at_k(rankings, judgments, k) for k in s_ks},
        }
    else:
        by_category = dataset.judgments_by_category()
        ks = tuple(recall_ks or FASHIONIQ_RECALL_KS)
        metrics = {}
        for category, cat_judgments in by_category.items():
            metrics[f"recall_{category}"] = {k: recall_at_k(rankings, cat_judgments, k) for k in ks}
        metrics["recall_average"] = {
            k: sum(metrics[f"recall_{c}"][k] for c in by_category) / len(by_category) for k in ks
        }
    return MetricsReport(metrics=metrics, query_count=len(judgments), plan=plan)
