"""Human-in-the-loop annotation service for multi-ground-truth queries.

Two-phase workflow per query: an annotator picks a reference and a visually
similar target from a near-duplicate-filtered gallery, writes the shared
concept plus the relative caption, and then selects every valid ground truth
from a gallery built by uniting the retrieval results of the composed query
with the images most similar to the chosen target.

Reference sampling is balanced across twelve coarse supercategories assigned
zero-shot from the index features. State lives in memory behind a single
lock, with an append-only JSON-lines event log for crash-safe persistence.
"""
from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DualEncoder
from .datasets import SEMANTIC_ASPECTS, CIRCODataset, CIRCOQuery
from .distill import InversionMLP
from .errors import InputError
from .phrases import ConceptClassifier, ConceptVocabulary
from .retrieval import EmbeddingIndex, build_index, compose_pseudo_query, near_duplicate_filter, search

SUPERCATEGORIES = (
    "person", "animal", "sports", "vehicle", "food", "accessory",
    "electronic", "kitchen", "furniture", "indoor", "outdoor", "appliance",
)

PHASE_PAIR_SELECTION = "pair_selection"
PHASE_CAPTIONING = "captioning"
PHASE_GT_SELECTION = "gt_selection"

CAPTION_PREFIX = "Unlike the provided image, I want a photo of {shared concept} that"

DEFAULT_GALLERY_SIZE = 50
DEFAULT_NEAR_DUPLICATE_THRESHOLD = 0.92
DEFAULT_RETRIEVAL_K = 100
DEFAULT_TARGET_SIMILAR_K = 50


class ServiceError(InputError):
    def __init__(self, message: str, status: int = 422):
        super().__init__(message)
        self.status = status


@dataclass
class Session:
    session_id: str
    phase: str = PHASE_PAIR_SELECTION
    current_reference_id: str | None = None
    current_triplet_id: str | None = None
    served_gallery: list[str] = field(default_factory=list)
    skipped: set[str] = field(default_factory=set)


@dataclass
class Triplet:
    triplet_id: str
    session_id: str
    reference_id: str
    target_id: str
    shared_concept: str
    relative_caption: str
    gt_gallery: list[str] = field(default_factory=list)


class AnnotationService:
    """All annotation state and workflow logic, independent of HTTP."""

    def __init__(
        self,
        backbone: DualEncoder,
        index: EmbeddingIndex,
        raw_features: dict[str, np.ndarray] | None = None,
        image_paths: dict[str, Path] | None = None,
        net: InversionMLP | None = None,
        seed: int = 0,
        data_dir: str | Path | None = None,
        gallery_size: int = DEFAULT_GALLERY_SIZE,
        near_duplicate_threshold: float = DEFAULT_NEAR_DUPLICATE_THRESHOLD,
        retrieval_k: int = DEFAULT_RETRIEVAL_K,
        target_similar_k: int = DEFAULT_TARGET_SIMILAR_K,
    ):
        self.backbone = backbone
        self.index = index
        self.raw_features = raw_features or {}
        self.image_paths = {k: Path(v) for k, v in (image_paths or {}).items()}
        self.net = net
        self.gallery_size = gallery_size
        self.near_duplicate_threshold = near_duplicate_threshold
        self.retrieval_k = retrieval_k
        self.target_similar_k = target_similar_k
        self.data_dir = Path(data_dir) if data_dir else None
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)

        self._rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xA220]))
        self._lock = threading.RLock()
        self.sessions: dict[str, Session] = {}
        self.triplets: dict[str, Triplet] = {}
        self.completed: list[CIRCOQuery] = []
        self.used_references: set[str] = set()
        self.reserved_references: set[str] = set()
        self.quotas: dict[str, int] = {label: 0 for label in SUPERCATEGORIES}
        self._triplet_counter = 0
        self._query_counter = 0

        classifier = ConceptClassifier(ConceptVocabulary(SUPERCATEGORIES), backbone)
        self.supercategory: dict[str, str] = {
            image_id: classifier.assign(index.row(image_id), 1, image_id=image_id).concepts[0]
            for image_id in index.ids
        }

    @classmethod
    def from_images(cls, backbone: DualEncoder, images: dict[str, Path], **kwargs) -> "AnnotationService":
        index = build_index(images, backbone)
        raw = {image_id: backbone.encode_image(path) for image_id, path in images.items()}
        return cls(backbone, index, raw_features=raw, image_paths=dict(images), **kwargs)

    # -- event log --------------------------------------------------------

    def _log_event(self, kind: str, payload: dict) -> None:
        if not self.data_dir:
            return
        entry = {"ts": time.time(), "event": kind, **payload}
        with open(self.data_dir / "events.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- workflow ---------------------------------------------------------

    def create_session(self) -> Session:
        with self._lock:
            session = Session(session_id=uuid.uuid4().hex[:12])
            self.sessions[session.session_id] = session
            self._log_event("session_created", {"session_id": session.session_id})
            return session

    def _session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise ServiceError(f"unknown session {session_id!r}", status=404)
        return session

    def sample_reference(self, session_id: str, skip: bool = False) -> dict:
        """Pick a reference from the least-filled supercategory bucket."""
        with self._lock:
            session = self._session(session_id)
            if session.phase == PHASE_GT_SELECTION:
                raise ServiceError("finish ground-truth selection before sampling a new reference", status=409)
            if skip and session.current_reference_id is not None:
                session.skipped.add(session.current_reference_id)
                self.reserved_references.discard(session.current_reference_id)
                self._log_event("reference_skipped", {
                    "session_id": session_id, "reference_id": session.current_reference_id})
                session.current_reference_id = None
                session.served_gallery = []
                session.phase = PHASE_PAIR_SELECTION
            if session.current_reference_id is None:
                session.current_reference_id = self._draw_reference(session)
                self.reserved_references.add(session.current_reference_id)
                session.served_gallery = []
                session.phase = PHASE_PAIR_SELECTION
            reference_id = session.current_reference_id
            return {
                "reference_id": reference_id,
                "supercategory": self.supercategory[reference_id],
                "phase": session.phase,
            }

    def _draw_reference(self, session: Session) -> str:
        # reserved = currently assigned to some session; one triplet per reference
        unavailable = self.used_references | self.reserved_references | session.skipped
        by_bucket: dict[str, list[str]] = {label: [] for label in SUPERCATEGORIES}
        for image_id in self.index.ids:
            if image_id not in unavailable:
                by_bucket[self.supercategory[image_id]].append(image_id)
        # least-filled quota first, label order breaking ties
        order = sorted(SUPERCATEGORIES, key=lambda label: (self.quotas[label], SUPERCATEGORIES.index(label)))
        for label in order:
            pool = by_bucket[label]
            if pool:
                if self.quotas[label] != self.quotas[order[0]]:
                    self._log_event("bucket_fallback", {"wanted": order[0], "used": label})
                pool = sorted(pool)
                return pool[int(self._rng.integers(len(pool)))]
        raise ServiceError("no reference images left to annotate", status=409)

    def candidate_gallery(self, session_id: str, reference_id: str) -> list[dict]:
        """Top images most similar to the reference, near-duplicates removed."""
        with self._lock:
            session = self._session(session_id)
            if session.phase == PHASE_GT_SELECTION:
                raise ServiceError("finish ground-truth selection first", status=409)
            if session.current_reference_id != reference_id:
                raise ServiceError(f"reference {reference_id!r} is not this session's current reference", status=409)
            if reference_id not in self.index:
                raise ServiceError(f"unknown image {reference_id!r}", status=404)
            k = min(self.gallery_size, len(self.index) - 1)
            ranked = search(self.index.row(reference_id), self.index, k=k, exclude={reference_id})
            ranked = near_duplicate_filter(ranked, self.near_duplicate_threshold)
            session.served_gallery = [image_id for image_id, _ in ranked]
            session.phase = PHASE_CAPTIONING
            return [{"image_id": image_id, "score": score} for image_id, score in ranked]

    def submit_triplet(self, session_id: str, target_id: str, shared_concept: str, relative_caption: str) -> dict:
        with self._lock:
            session = self._session(session_id)
            if session.phase != PHASE_CAPTIONING:
                raise ServiceError(f"cannot submit a triplet in phase {session.phase!r}", status=409)
            if target_id not in session.served_gallery:
                raise ServiceError(f"target {target_id!r} was not in the served gallery", status=422)
            shared_concept = shared_concept.strip()
            relative_caption = relative_caption.strip()
            if not shared_concept:
                raise ServiceError("shared_concept must be nonempty", status=422)
            if not relative_caption:
                raise ServiceError("relative_caption must be nonempty", status=422)

            self._triplet_counter += 1
            triplet = Triplet(
                triplet_id=f"t{self._triplet_counter:05d}",
                session_id=session_id,
                reference_id=session.current_reference_id,
                target_id=target_id,
                shared_concept=shared_concept,
                relative_caption=relative_caption,
            )
            self.triplets[triplet.triplet_id] = triplet
            session.current_triplet_id = triplet.triplet_id
            session.phase = PHASE_GT_SELECTION
            self._log_event("triplet_submitted", {
                "triplet_id": triplet.triplet_id, "session_id": session_id,
                "reference_id": triplet.reference_id, "target_id": target_id,
                "shared_concept": shared_concept, "relative_caption": relative_caption})
            return {"triplet_id": triplet.triplet_id, "phase": session.phase}

    def gt_gallery(self, triplet_id: str) -> list[dict]:
        """Union of composed-query retrieval and target-similarity galleries."""
        with self._lock:
            triplet = self.triplets.get(triplet_id)
            if triplet is None:
                raise ServiceError(f"unknown triplet {triplet_id!r}", status=404)
            if self.net is None:
                raise ServiceError("inversion network not loaded; ground-truth retrieval unavailable", status=503)
            reference_feature = self.raw_features.get(triplet.reference_id)
            if reference_feature is None:
                reference_feature = self.index.row(triplet.reference_id)
            pseudo = self.net.predict(np.asarray(reference_feature, dtype=np.float64))
            query = compose_pseudo_query(pseudo, triplet.relative_caption, self.backbone,
                                         shared_concept=triplet.shared_concept)

            exclude = {triplet.reference_id}
            available = len(self.index) - 1
            retrieved = search(query, self.index, k=min(self.retrieval_k, available), exclude=exclude)
            similar = search(self.index.row(triplet.target_id), self.index,
                             k=min(self.target_similar_k, available), exclude=exclude)

            gallery: list[tuple[str, float]] = []
            seen: set[str] = set()
            for image_id, score in [*retrieved, *similar]:
                if image_id not in seen:  # dedup keeps the higher-ranked occurrence
                    seen.add(image_id)
                    gallery.append((image_id, score))
            triplet.gt_gallery = [image_id for image_id, _ in gallery]
            return [{"image_id": image_id, "score": score, "is_target": image_id == triplet.target_id}
                    for image_id, score in gallery]

    def submit_ground_truths(self, triplet_id: str, gt_ids: list[str], semantic_aspects: list[str]) -> dict:
        with self._lock:
            triplet = self.triplets.get(triplet_id)
            if triplet is None:
                raise ServiceError(f"unknown triplet {triplet_id!r}", status=404)
            session = self._session(triplet.session_id)
            if session.phase != PHASE_GT_SELECTION or session.current_triplet_id != triplet_id:
                raise ServiceError("triplet is not awaiting ground-truth selection", status=409)
            if not triplet.gt_gallery:
                raise ServiceError("ground-truth gallery was never served for this triplet", status=409)
            gt_ids = [str(i) for i in gt_ids]
            if triplet.target_id not in gt_ids:
                raise ServiceError("the original target must stay among the ground truths", status=422)
            outside = [i for i in gt_ids if i not in triplet.gt_gallery]
            if outside:
                raise ServiceError(f"ids outside the served gallery: {outside[:5]}", status=422)
            for aspect in semantic_aspects:
                if aspect not in SEMANTIC_ASPECTS:
                    raise ServiceError(f"unknown semantic aspect {aspect!r}", status=422)

            self._query_counter += 1
            try:
                query = CIRCOQuery(
                    id=f"q{self._query_counter:05d}",
                    reference_img_id=triplet.reference_id,
                    relative_caption=triplet.relative_caption,
                    shared_concept=triplet.shared_concept,
                    gt_img_ids=tuple(dict.fromkeys(gt_ids)),
                    semantic_aspects=tuple(semantic_aspects),
                )
            except InputError as exc:
                self._query_counter -= 1
                raise ServiceError(str(exc), status=422) from exc
            self.completed.append(query)
            self.quotas[self.supercategory[triplet.reference_id]] += 1
            self.used_references.add(triplet.reference_id)
            self.reserved_references.discard(triplet.reference_id)
            session.phase = PHASE_PAIR_SELECTION
            session.current_reference_id = None
            session.current_triplet_id = None
            session.served_gallery = []
            self._log_event("ground_truths_submitted", {
                "triplet_id": triplet_id, "query_id": query.id,
                "gt_img_ids": list(query.gt_img_ids), "semantic_aspects": list(query.semantic_aspects)})
            return {"query_id": query.id, "phase": session.phase, "gt_count": len(query.gt_img_ids)}

    def export_dataset(self, ratio: float = 0.2, seed: int = 0) -> list[dict]:
        """Canonical records with a deterministic validation/test split."""
        with self._lock:
            if not self.completed:
                raise ServiceError("no completed queries to export", status=409)
            if not 0.0 <= ratio <= 1.0:
                raise ServiceError(f"split ratio must lie in [0, 1], got {ratio}", status=422)
            rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xE897]))
            order = rng.permutation(len(self.completed))
            n_val = int(round(ratio * len(self.completed)))
            val_positions = set(order[:n_val].tolist())
            queries = [
                CIRCOQuery(id=q.id, reference_img_id=q.reference_img_id, relative_caption=q.relative_caption,
                           shared_concept=q.shared_concept, gt_img_ids=q.gt_img_ids,
                           semantic_aspects=q.semantic_aspects,
                           split="val" if i in val_positions else "test")
                for i, q in enumerate(self.completed)
            ]
            records = CIRCODataset(queries).to_records()
            if self.data_dir:
                out = self.data_dir / "annotations.json"
                out.write_text(json.dumps(records, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                               encoding="utf-8")
            return records

    def image_bytes(self, image_id: str) -> tuple[bytes, str]:
        if image_id not in self.index:
            raise ServiceError(f"unknown image {image_id!r}", status=404)
        path = self.image_paths.get(image_id)
        if path is None or not path.exists():
            raise ServiceError(f"no stored bytes for image {image_id!r}", status=404)
        suffix = path.suffix.lower().lstrip(".") or "octet-stream"
        media = {"jpg": "image/jpeg", "jpeg": "image/jpeg", "png": "image/png"}.get(suffix, "application/octet-stream")
        return path.read_bytes(), media

    def health(self) -> dict:
        return {
            "status": "ready" if self.net is not None else "degraded",
            "index_size": len(self.index),
            "inversion_network_loaded": self.net is not None,
            "queries_completed": len(self.completed),
            "caption_prefix": CAPTION_PREFIX,
        }


try:
    from pydantic import BaseModel as _BaseModel
except ImportError:  # pragma: no cover - fastapi always brings pydantic
    _BaseModel = object


class TripletSubmission(_BaseModel):
    session_id: str
    target_id: str
    shared_concept: str
    relative_caption: str


class GroundTruthSubmission(_BaseModel):
    triplet_id: str
    gt_ids: list[str]
    semantic_aspects: list[str] = []


def create_app(service: AnnotationService):
    """Wrap an AnnotationService in the HTTP endpoint surface."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="annotation-service")

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return service.health()

    @app.get("/session")
    def session():
        created = service.create_session()
        return {"session_id": created.session_id, "phase": created.phase}

    @app.get("/reference")
    def reference(session_id: str, skip: bool = False):
        return service.sample_reference(session_id, skip=skip)

    @app.get("/candidates/{reference_id}")
    def candidates(reference_id: str, session_id: str):
        gallery = service.candidate_gallery(session_id, reference_id)
        return {"reference_id": reference_id, "candidates": gallery,
                "caption_prefix": CAPTION_PREFIX,
                "guidance": "describe only differences; do not re-state subjects already in the shared concept"}

    @app.post("/triplet")
    def triplet(body: TripletSubmission):
        return service.submit_triplet(body.session_id, body.target_id, body.shared_concept, body.relative_caption)

    @app.get("/gt-candidates/{triplet_id}")
    def gt_candidates(triplet_id: str):
        gallery = service.gt_gallery(triplet_id)
        stored = service.triplets[triplet_id]
        return {"triplet_id": triplet_id, "target_id": stored.target_id,
                "semantic_aspects": list(SEMANTIC_ASPECTS), "candidates": gallery}

    @app.post("/ground-truths")
    def ground_truths(body: GroundTruthSubmission):
        return service.submit_ground_truths(body.triplet_id, body.gt_ids, body.semantic_aspects)

    @app.get("/export")
    def export(ratio: float = 0.2, seed: int = 0):
        return service.export_dataset(ratio=ratio, seed=seed)

    @app.get("/images/{image_id}")
    def image(image_id: str):
        payload, media = service.image_bytes(image_id)
        return Response(content=payload, media_type=media)

    return app
