"""Annotation-file schemas, loaders and dataset-level statistics.

Canonical files are JSON lists of flat records; third-party release layouts
for the cirr and fashioniq formats are accepted through thin adapters and
normalized into the canonical form on load. Validation errors always name the
offending record index and field.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DatasetValidationError, FormatError, InputError
from .metrics import RelevanceJudgment

SEMANTIC_ASPECTS = (
    "Cardinality",
    "Addition",
    "Negation",
    "Direct Addressing",
    "Compare & Change",
    "Comparative Statement",
    "Statement with Conjunction",
    "Spatial Relations & Background",
    "Viewpoint",
)

FASHIONIQ_CATEGORIES = ("shirt", "dress", "toptee")

SPLITS = ("val", "test")


@dataclass
class CIRCOQuery:
    """Multi-ground-truth query: reference, relative caption, shared concept."""

    id: str
    reference_img_id: str
    relative_caption: str
    shared_concept: str
    gt_img_ids: tuple[str, ...]
    semantic_aspects: tuple[str, ...] = ()
    split: str | None = None

    def __post_init__(self):
        self.gt_img_ids = tuple(str(i) for i in self.gt_img_ids)
        self.semantic_aspects = tuple(self.semantic_aspects)
        if not self.id:
            raise InputError("query id must be nonempty")
        if not self.reference_img_id:
            raise InputError("reference_img_id must be nonempty")
        if not self.relative_caption.strip():
            raise InputError("relative_caption must be nonempty")
        if not self.shared_concept.strip():
            raise InputError("shared_concept must be nonempty")
        if not self.gt_img_ids:
            raise InputError("gt_img_ids must be nonempty")
        if len(set(self.gt_img_ids)) != len(self.gt_img_ids):
            raise InputError("gt_img_ids contains duplicates")
        if self.reference_img_id in self.gt_img_ids:
            raise InputError("reference image cannot be one of its own ground truths")
        for aspect in self.semantic_aspects:
            if aspect not in SEMANTIC_ASPECTS:
                raise InputError(f"unknown semantic aspect {aspect!r}")
        if self.split is not None and self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "reference_img_id": self.reference_img_id,
            "relative_caption": self.relative_caption,
            "shared_concept": self.shared_concept,
            "gt_img_ids": list(self.gt_img_ids),
            "semantic_aspects": list(self.semantic_aspects),
        }
        if self.split is not None:
            record["split"] = self.split
        return record


@dataclass
class CIRRTriplet:
    """Single-target triplet with its 6-image visually-similar subset."""

    reference_img_id: str
    target_img_id: str
    relative_caption: str
    subset_ids: tuple[str, ...]
    id: str = ""

    def __post_init__(self):
        self.subset_ids = tuple(str(i) for i in self.subset_ids)
        if len(self.subset_ids) != 6:
            raise InputError(f"subset must contain exactly 6 ids, got {len(self.subset_ids)}")
        if len(set(self.subset_ids)) != 6:
            raise InputError("subset ids must be distinct")
        if self.target_img_id == self.reference_img_id:
            raise InputError("target must differ from the reference")
        if self.reference_img_id not in self.subset_ids or self.target_img_id not in self.subset_ids:
            raise InputError("subset must contain both the reference and the target")
        if not self.relative_caption.strip():
            raise InputError("relative_caption must be nonempty")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "reference_img_id": self.reference_img_id,
            "target_img_id": self.target_img_id,
            "relative_caption": self.relative_caption,
            "subset_ids": list(self.subset_ids),
        }


@dataclass
class FashionIQTriplet:
    """Dual-caption fashion triplet within one garment category."""

    reference_img_id: str
    target_img_id: str
    captions: tuple[str, str]
    category: str
    id: str = ""

    def __post_init__(self):
        self.captions = tuple(self.captions)
        if len(self.captions) != 2:
            raise InputError(f"exactly two captions are required, got {len(self.captions)}")
        if not all(c.strip() for c in self.captions):
            raise InputError("captions must be nonempty")
        if self.category not in FASHIONIQ_CATEGORIES:
            raise InputError(f"category must be one of {FASHIONIQ_CATEGORIES}, got {self.category!r}")
        if not self.reference_img_id or not self.target_img_id:
            raise InputError("reference and target ids must be nonempty")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "reference_img_id": self.reference_img_id,
            "target_img_id": self.target_img_id,
            "captions": list(self.captions),
            "category": self.category,
        }


@dataclass
class CIRCODataset:
    queries: list[CIRCOQuery]
    kind: str = field(default="circo", init=False)

    def __len__(self) -> int:
        return len(self.queries)

    def subset(self, split: str) -> "CIRCODataset":
        return CIRCODataset([q for q in self.queries if q.split == split])

    def judgments(self) -> list[RelevanceJudgment]:
        return [
            RelevanceJudgment(query_id=q.id, ground_truth_ids=frozenset(q.gt_img_ids), reference_id=q.reference_img_id)
            for q in self.queries
        ]

    def to_records(self) -> list[dict]:
        return [q.to_record() for q in self.queries]


@dataclass
class CIRRDataset:
    triplets: list[CIRRTriplet]
    kind: str = field(default="cirr", init=False)

    def __len__(self) -> int:
        return len(self.triplets)

    def judgments(self) -> list[RelevanceJudgment]:
        return [
            RelevanceJudgment(
                query_id=t.id,
                ground_truth_ids=frozenset({t.target_img_id}),
                subset_ids=frozenset(t.subset_ids),
                reference_id=t.reference_img_id,
            )
            for t in self.triplets
        ]

    def to_records(self) -> list[dict]:
        return [t.to_record() for t in self.triplets]


@dataclass
class FashionIQDataset:
    triplets: list[FashionIQTriplet]
    kind: str = field(default="fashioniq", init=False)

    def __len__(self) -> int:
        return len(self.triplets)

    def judgments(self) -> list[RelevanceJudgment]:
        return [
            RelevanceJudgment(query_id=t.id, ground_truth_ids=frozenset({t.target_img_id}), reference_id=t.reference_img_id)
            for t in self.triplets
        ]

    def judgments_by_category(self) -> dict[str, list[RelevanceJudgment]]:
        grouped: dict[str, list[RelevanceJudgment]] = {}
        for triplet, judgment in zip(self.triplets, self.judgments()):
            grouped.setdefault(triplet.category, []).append(judgment)
        return grouped

    def to_records(self) -> list[dict]:
        return [t.to_record() for t in self.triplets]


# --- loading ---------------------------------------------------------------


def _read_records(path: str | Path) -> list[dict]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, list):
        raise FormatError(f"{path} must hold a JSON list of records")
    for i, record in enumerate(payload):
        if not isinstance(record, dict):
            raise DatasetValidationError("record is not a JSON object", record_index=i)
    return payload


def _require(record: dict, key: str, index: int):
    if key not in record:
        raise DatasetValidationError("missing required field", record_index=index, field=key)
    return record[key]


def _load_circo(records: list[dict]) -> CIRCODataset:
    queries = []
    seen_ids = set()
    for i, record in enumerate(records):
        try:
            query = CIRCOQuery(
                id=str(record.get("id", f"q{i}")),
                reference_img_id=str(_require(record, "reference_img_id", i)),
                relative_caption=str(_require(record, "relative_caption", i)),
                shared_concept=str(_require(record, "shared_concept", i)),
                gt_img_ids=tuple(_require(record, "gt_img_ids", i)),
                semantic_aspects=tuple(record.get("semantic_aspects", ())),
                split=record.get("split"),
            )
        except InputError as exc:
            raise DatasetValidationError(str(exc), record_index=i) from exc
        if query.id in seen_ids:
            raise DatasetValidationError(f"duplicate query id {query.id!r}", record_index=i, field="id")
        seen_ids.add(query.id)
        queries.append(query)
    return CIRCODataset(queries)


def _load_cirr(records: list[dict]) -> CIRRDataset:
    triplets = []
    for i, record in enumerate(records):
        try:
            if "img_set" in record or "target_hard" in record:  # public release layout
                members = record.get("img_set", {}).get("members", ())
                triplet = CIRRTriplet(
                    id=str(record.get("pairid", f"q{i}")),
                    reference_img_id=str(_require(record, "reference", i)),
                    target_img_id=str(_require(record, "target_hard", i)),
                    relative_caption=str(_require(record, "caption", i)),
                    subset_ids=tuple(members),
                )
            else:
                triplet = CIRRTriplet(
                    id=str(record.get("id", f"q{i}")),
                    reference_img_id=str(_require(record, "reference_img_id", i)),
                    target_img_id=str(_require(record, "target_img_id", i)),
                    relative_caption=str(_require(record, "relative_caption", i)),
                    subset_ids=tuple(_require(record, "subset_ids", i)),
                )
        except InputError as exc:
            raise DatasetValidationError(str(exc), record_index=i) from exc
        triplets.append(triplet)
    return CIRRDataset(triplets)


def _load_fashioniq(records: list[dict], default_category: str | None = None) -> FashionIQDataset:
    triplets = []
    for i, record in enumerate(records):
        try:
            if "candidate" in record:  # public release layout
                category = record.get("category", default_category)
                if category is None:
                    raise InputError("no category on record and no default available")
                triplet = FashionIQTriplet(
                    id=str(record.get("id", f"q{i}")),
                    reference_img_id=str(_require(record, "candidate", i)),
                    target_img_id=str(_require(record, "target", i)),
                    captions=tuple(_require(record, "captions", i)),
                    category=str(category),
                )
            else:
                triplet = FashionIQTriplet(
                    id=str(record.get("id", f"q{i}")),
                    reference_img_id=str(_require(record, "reference_img_id", i)),
                    target_img_id=str(_require(record, "target_img_id", i)),
                    captions=tuple(_require(record, "captions", i)),
                    category=str(_require(record, "category", i)),
                )
        except InputError as exc:
            raise DatasetValidationError(str(exc), record_index=i) from exc
        triplets.append(triplet)
    return FashionIQDataset(triplets)


def _infer_fashioniq_category(path: Path) -> str | None:
    for part in path.name.split("."):
        if part in FASHIONIQ_CATEGORIES:
            return part
    return None


def load_dataset(path: str | Path, format: str):
    """Load and validate an annotation file in one of the three formats."""
    path = Path(path)
    records = _read_records(path)
    if format == "circo":
        return _load_circo(records)
    if format == "cirr":
        return _load_cirr(records)
    if format == "fashioniq":
        return _load_fashioniq(records, default_category=_infer_fashioniq_category(path))
    raise InputError(f"unknown dataset format {format!r}")


def save_dataset(dataset, path: str | Path) -> None:
    """Write canonical JSON; loading and saving again is byte-stable."""
    records = dataset.to_records()
    Path(path).write_text(
        json.dumps(records, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# --- dataset analysis ------------------------------------------------------


@dataclass(frozen=True)
class CoverageEstimate:
    """Missing-ground-truth extrapolation from the retrieval hit rate."""

    gt_found_by_method: int
    gt_total_labeled: int
    recall_at_100: float
    estimated_total: float
    coverage_fraction: float

    def __post_init__(self):
        if not 0 < self.coverage_fraction <= 1.05:
            raise InputError(f"coverage fraction {self.coverage_fraction:.4f} outside plausible range (0, 1.05]")


def coverage_estimate(gt_found_by_method: int, gt_total_labeled: int, recall_at_100: float) -> CoverageEstimate:
    """Extrapolate the total ground-truth pool from the method's hit rate.

    The method surfaced ``gt_found_by_method`` of the labeled ground truths;
    dividing by its known recall estimates how many exist overall, and the
    labeled count over that estimate gives annotation coverage.
    """
    if gt_found_by_method <= 0 or gt_total_labeled <= 0:
        raise InputError("counts must be positive")
    if not 0.0 < recall_at_100 <= 1.0:
        raise InputError(f"recall must lie in (0, 1], got {recall_at_100}")
    estimated_total = gt_found_by_method / recall_at_100
    return CoverageEstimate(
        gt_found_by_method=gt_found_by_method,
        gt_total_labeled=gt_total_labeled,
        recall_at_100=recall_at_100,
        estimated_total=estimated_total,
        coverage_fraction=gt_total_labeled / estimated_total,
    )


@dataclass
class DatasetStats:
    query_count: int
    gt_mean: float
    gt_max: int
    gt_mode: int
    mean_caption_words: float
    aspect_coverage: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "query_count": self.query_count,
            "gt_mean": self.gt_mean,
            "gt_max": self.gt_max,
            "gt_mode": self.gt_mode,
            "mean_caption_words": self.mean_caption_words,
            "aspect_coverage": dict(self.aspect_coverage),
        }


def dataset_stats(dataset) -> DatasetStats:
    """Aggregate counts over a validated dataset.

    Aspect coverage percentages are multi-label and need not sum to 100.
    Ties for the modal ground-truth count resolve to the smallest count.
    """
    if dataset.kind == "circo":
        gt_counts = [len(q.gt_img_ids) for q in dataset.queries]
        captions = [q.relative_caption for q in dataset.queries]
        n = len(dataset.queries)
        aspect_hits = Counter(aspect for q in dataset.queries for aspect in set(q.semantic_aspects))
        aspect_coverage = {aspect: 100.0 * aspect_hits.get(aspect, 0) / n for aspect in SEMANTIC_ASPECTS}
    else:
        gt_counts = [1] * len(dataset)
        captions = []
        for t in dataset.triplets:
            captions.extend([t.relative_caption] if hasattr(t, "relative_caption") else list(t.captions))
        aspect_coverage = {}
    if not gt_counts:
        raise InputError("dataset has no queries")
    count_freq = Counter(gt_counts)
    top = max(count_freq.values())
    mode = min(c for c, f in count_freq.items() if f == top)
    return DatasetStats(
        query_count=len(gt_counts),
        gt_mean=sum(gt_counts) / len(gt_counts),
        gt_max=max(gt_counts),
        gt_mode=mode,
        mean_caption_words=sum(len(c.split()) for c in captions) / len(captions),
        aspect_coverage=aspect_coverage,
    )
