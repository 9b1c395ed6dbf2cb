"""Index construction, query composition and exact cosine top-K search."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import PSEUDO_MARKER, DualEncoder
from .errors import FormatError, InputError
from .storage import load_feature_store, save_feature_store
from .validation import check_matrix, check_vector, unit_normalize

RankedResult = list[tuple[str, float]]

QUERY_MODES = ("inversion", "text_only", "image_only", "image_plus_text", "captioning")

_NORM_TOL = 1e-5


@dataclass
class EmbeddingIndex:
    """Id-addressed matrix of unit-norm image features."""

    ids: list[str]
    matrix: np.ndarray
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.matrix = check_matrix(self.matrix, name="index matrix")
        if len(self.ids) != self.matrix.shape[0]:
            raise InputError(f"{len(self.ids)} ids for {self.matrix.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("duplicate image ids in index")
        norms = np.linalg.norm(self.matrix, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOL)
        if bad.size:
            raise InputError(f"index rows are not unit-norm (first offender: {self.ids[bad[0]]!r})")
        self._row_of = {image_id: i for i, image_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id) -> bool:
        return image_id in self._row_of

    def row(self, image_id: str) -> np.ndarray:
        try:
            return self.matrix[self._row_of[image_id]]
        except KeyError:
            raise InputError(f"image {image_id!r} is not in the index") from None

    def save(self, path: str | Path) -> None:
        save_feature_store(path, self.ids, self.matrix, normalized=True)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        ids, matrix, normalized = load_feature_store(path)
        if not normalized:
            raise FormatError(f"{path} is not a normalized feature store")
        # re-normalize away the float32 storage rounding
        matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
        return cls(ids=ids, matrix=matrix)


def build_index(images, backbone: DualEncoder) -> EmbeddingIndex:
    """Encode an image collection into unit-norm rows."""
    items = list(images.items()) if isinstance(images, dict) else list(images)
    if not items:
        raise InputError("cannot build an index from zero images")
    ids = [str(i) for i, _ in items]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image ids")
    rows = [unit_normalize(backbone.encode_image(image), name=f"feature of {i!r}") for i, image in items]
    return EmbeddingIndex(ids=ids, matrix=np.stack(rows))


# --- query composition -----------------------------------------------------


def pseudo_query_template(caption: str, shared_concept: str | None = None) -> str:
    caption = caption.strip()
    if not caption:
        raise InputError("caption must be nonempty")
    if shared_concept is not None:
        shared_concept = shared_concept.strip()
        if not shared_concept:
            raise InputError("shared_concept must be nonempty when given")
        return f"a photo of {shared_concept} {PSEUDO_MARKER} that {caption}"
    return f"a photo of {PSEUDO_MARKER} that {caption}"


def compose_pseudo_query(pseudo, caption: str, backbone: DualEncoder, shared_concept: str | None = None) -> np.ndarray:
    """Encode the marker template with the pseudo token spliced in; unit norm."""
    template = pseudo_query_template(caption, shared_concept)
    return unit_normalize(backbone.encode_text_with_pseudo(template, pseudo), name="query")


def compose_dual_caption_query(pseudo, caption_a: str, caption_b: str, backbone: DualEncoder,
                               shared_concept: str | None = None) -> np.ndarray:
    """Average both conjunction orders of a two-caption query, then normalize.

    Exactly symmetric in the two captions by construction.
    """
    for caption in (caption_a, caption_b):
        if not caption.strip():
            raise InputError("both captions must be nonempty")
    joined_ab = f"{caption_a.strip()} and {caption_b.strip()}"
    joined_ba = f"{caption_b.strip()} and {caption_a.strip()}"
    f_ab = backbone.encode_text_with_pseudo(pseudo_query_template(joined_ab, shared_concept), pseudo)
    f_ba = backbone.encode_text_with_pseudo(pseudo_query_template(joined_ba, shared_concept), pseudo)
    return unit_normalize((f_ab + f_ba) / 2.0, name="query")


def _caption_feature(captions: list[str], backbone: DualEncoder) -> np.ndarray:
    """Caption-only feature; two captions are averaged over both 'and' orders."""
    captions = [c.strip() for c in captions if c and c.strip()]
    if not captions:
        raise InputError("at least one nonempty caption is required")
    if len(captions) == 1:
        return backbone.encode_text(captions[0])
    if len(captions) == 2:
        a, b = captions
        return (backbone.encode_text(f"{a} and {b}") + backbone.encode_text(f"{b} and {a}")) / 2.0
    raise InputError(f"at most two captions are supported, got {len(captions)}")


@dataclass
class QuerySpec:
    """One retrieval query: mode, optional reference, captions, shared concept."""

    mode: str
    query_id: str = ""
    reference_id: str | None = None
    captions: tuple[str, ...] = ()
    shared_concept: str | None = None

    def __post_init__(self):
        if self.mode not in QUERY_MODES:
            raise InputError(f"unknown query mode {self.mode!r} (expected one of {QUERY_MODES})")
        self.captions = tuple(self.captions)
        if self.mode in ("inversion", "image_only", "image_plus_text", "captioning") and not self.reference_id:
            raise InputError(f"mode {self.mode!r} requires a reference_id")
        if self.mode != "image_only":
            if not self.captions or not any(c.strip() for c in self.captions):
                raise InputError(f"mode {self.mode!r} requires at least one caption")
        if len(self.captions) > 2:
            raise InputError("at most two captions per query")


def compose_inversion_query(spec: QuerySpec, pseudo, backbone: DualEncoder) -> np.ndarray:
    """Query feature for the pseudo-token mode, handling dual captions."""
    if spec.mode != "inversion":
        raise InputError(f"expected an inversion-mode spec, got {spec.mode!r}")
    if len(spec.captions) == 2:
        return compose_dual_caption_query(pseudo, spec.captions[0], spec.captions[1], backbone,
                                          shared_concept=spec.shared_concept)
    return compose_pseudo_query(pseudo, spec.captions[0], backbone, shared_concept=spec.shared_concept)


def compose_baseline_query(spec: QuerySpec, backbone: DualEncoder, index: EmbeddingIndex,
                           captioner=None) -> np.ndarray:
    """Query feature for the non-inversion baselines; always unit norm."""
    if spec.mode == "inversion":
        raise InputError("use compose_inversion_query for inversion mode")
    if spec.mode == "text_only":
        return unit_normalize(_caption_feature(list(spec.captions), backbone), name="query")
    if spec.mode == "image_only":
        return index.row(spec.reference_id)
    if spec.mode == "image_plus_text":
        image_part = index.row(spec.reference_id)
        text_part = unit_normalize(_caption_feature(list(spec.captions), backbone), name="caption feature")
        return unit_normalize(image_part + text_part, name="query")
    if spec.mode == "captioning":
        if captioner is None:
            raise InputError("captioning mode requires a captioner adapter")
        generated = str(captioner(spec.reference_id)).strip()
        if not generated:
            raise InputError(f"captioner produced an empty caption for {spec.reference_id!r}")
        caption = " and ".join(c.strip() for c in spec.captions)
        text = f"a photo of {generated} that {caption}"
        return unit_normalize(backbone.encode_text(text), name="query")
    raise InputError(f"unknown query mode {spec.mode!r}")


# --- search ----------------------------------------------------------------


def search(query, index: EmbeddingIndex, k: int, exclude=None) -> RankedResult:
    """Exact cosine top-K scan with deterministic ascending-id tie breaks."""
    query = check_vector(query, dim=index.matrix.shape[1], name="query")
    query = unit_normalize(query, name="query")
    exclude = set(exclude or ())
    keep = np.array([image_id not in exclude for image_id in index.ids])
    available = int(keep.sum())
    if not 1 <= k <= available:
        raise InputError(f"k={k} outside valid range 1..{available}")
    scores = index.matrix @ query
    ids_arr = np.array(index.ids, dtype=object)
    kept_idx = np.flatnonzero(keep)
    order = kept_idx[np.lexsort((ids_arr[kept_idx], -scores[kept_idx]))][:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def near_duplicate_filter(candidates: RankedResult, threshold: float) -> RankedResult:
    """Drop entries scoring strictly above the threshold."""
    if not -1.0 < threshold <= 1.0:
        raise InputError(f"threshold must lie in (-1, 1], got {threshold}")
    return [(image_id, score) for image_id, score in candidates if score <= threshold]
