"""Per-image pseudo-token optimization.

Each image is mapped to a single pseudo-word token by gradient descent: a
cosine loss ties the encoded marker template to the image feature, and a
phrase-alignment loss keeps the token usable inside natural sentences by
matching the encoding of a generated concept phrase against the same phrase
with the concept swapped for the pseudo-word. The optimizer steps the raw
token with AdamW while an exponential moving average accumulates the returned
token.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .backbone import PSEUDO_MARKER, DualEncoder
from .errors import InputError, NumericError, TrainingAborted
from .phrases import ConceptClassifier, ConceptVocabulary, PhraseBank, sample_phrase, substitute_pseudo
from .storage import load_feature_store, load_manifest, load_matrix, save_matrix
from .validation import check_vector, stable_seed_words

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES = (
    f"a photo of {PSEUDO_MARKER}",
    f"a cropped photo of {PSEUDO_MARKER}",
    f"a close-up photo of {PSEUDO_MARKER}",
    f"a dark photo of {PSEUDO_MARKER}",
    f"a bright photo of {PSEUDO_MARKER}",
    f"a photo of one {PSEUDO_MARKER}",
    f"a photo of the {PSEUDO_MARKER}",
    f"a rendition of {PSEUDO_MARKER}",
)

_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class InversionConfig:
    """Hyperparameters of the iterative inversion."""

    iterations: int = 350
    learning_rate: float = 2e-2
    weight_decay: float = 0.01
    lambda_cos: float = 1.0
    lambda_reg: float = 0.5
    ema_decay: float = 0.99
    k_concepts: int = 15
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 < self.ema_decay < 1:
            raise InputError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.lambda_cos < 0 or self.lambda_reg < 0:
            raise InputError("loss weights must be non-negative")
        if self.learning_rate <= 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.k_concepts < 1:
            raise InputError(f"k_concepts must be >= 1, got {self.k_concepts}")
        if not self.templates:
            raise InputError("at least one template is required")
        object.__setattr__(self, "templates", tuple(self.templates))
        for template in self.templates:
            if template.split().count(PSEUDO_MARKER) != 1:
                raise InputError(f"template {template!r} must contain exactly one pseudo-word marker")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PseudoToken:
    """A learned vector in token-embedding space, tied to one image."""

    values: np.ndarray
    source_image_id: str = ""

    def __post_init__(self):
        self.values = check_vector(self.values, name="pseudo token values")


class PseudoTokenSet:
    """Image id -> pseudo token, persisted as a float32 row matrix."""

    def __init__(self, tokens: dict[str, PseudoToken] | None = None, config_digest: str = ""):
        self.tokens: dict[str, PseudoToken] = dict(tokens or {})
        self.config_digest = config_digest

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, image_id) -> bool:
        return image_id in self.tokens

    def __getitem__(self, image_id: str) -> PseudoToken:
        return self.tokens[image_id]

    def add(self, token: PseudoToken) -> None:
        if token.source_image_id in self.tokens:
            raise InputError(f"duplicate token for image {token.source_image_id!r}")
        self.tokens[token.source_image_id] = token

    def ids(self) -> list[str]:
        return list(self.tokens)

    def matrix(self) -> np.ndarray:
        return np.stack([self.tokens[i].values for i in self.tokens])

    def save(self, path: str | Path) -> None:
        ids = self.ids()
        matrix = self.matrix() if ids else np.zeros((0, 0))
        save_matrix(path, matrix, {
            "image_ids": ids,
            "token_dim": int(matrix.shape[1]) if ids else 0,
            "config_digest": self.config_digest,
        })

    @classmethod
    def load(cls, path: str | Path) -> "PseudoTokenSet":
        manifest = load_manifest(path)
        ids = [str(i) for i in manifest["image_ids"]]
        dim = int(manifest["token_dim"])
        matrix = load_matrix(path, len(ids), dim)
        tokens = {i: PseudoToken(values=matrix[j], source_image_id=i) for j, i in enumerate(ids)}
        return cls(tokens, config_digest=str(manifest.get("config_digest", "")))


# --- losses ----------------------------------------------------------------


def _cosine_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise NumericError("cosine of a zero vector is undefined")
    return (a @ b) / (na * nb)


def cosine_loss(a, b):
    """1 - cos(a, b); accepts tensors (differentiable) or array-likes."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = a if isinstance(a, torch.Tensor) else torch.from_numpy(check_vector(a))
        b = b if isinstance(b, torch.Tensor) else torch.from_numpy(check_vector(b))
        if a.shape != b.shape:
            raise InputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        return 1.0 - _cosine_t(a.to(torch.float64), b.to(torch.float64))
    a, b = check_vector(a, name="a"), check_vector(b, name="b")
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(1.0 - _cosine_t(torch.from_numpy(a), torch.from_numpy(b)))


def phrase_regularization_loss(pseudo, concept: str, phrase: str, backbone: DualEncoder, phrase_feature=None):
    """Cosine gap between a concept phrase and its pseudo-word substitution.

    ``phrase_feature`` may carry a precomputed encoding of the unmodified
    phrase to avoid re-encoding it inside optimization loops.
    """
    substituted = substitute_pseudo(phrase, concept)
    if phrase_feature is None:
        phrase_feature = backbone.encode_text(phrase)
    as_tensor = isinstance(pseudo, torch.Tensor)
    pseudo_t = pseudo if as_tensor else torch.from_numpy(check_vector(getattr(pseudo, "values", pseudo), dim=backbone.token_dim))
    target = phrase_feature if isinstance(phrase_feature, torch.Tensor) else torch.from_numpy(np.asarray(phrase_feature, dtype=np.float64))
    out = 1.0 - _cosine_t(target, backbone.encode_template_rows_t(substituted, pseudo_t))
    return out if as_tensor else float(out)


def inversion_objective(pseudo, image_feature, template: str, concept: str, phrase: str,
                        config: InversionConfig, backbone: DualEncoder, phrase_feature=None):
    """Weighted sum of the image-alignment and phrase-alignment losses."""
    as_tensor = isinstance(pseudo, torch.Tensor)
    pseudo_t = pseudo if as_tensor else torch.from_numpy(check_vector(getattr(pseudo, "values", pseudo), dim=backbone.token_dim))
    image_t = image_feature if isinstance(image_feature, torch.Tensor) else torch.from_numpy(
        check_vector(image_feature, dim=backbone.feature_dim, name="image feature"))
    total = config.lambda_cos * cosine_loss(image_t, backbone.encode_template_rows_t(template, pseudo_t))
    if config.lambda_reg != 0.0:
        total = total + config.lambda_reg * phrase_regularization_loss(
            pseudo_t, concept, phrase, backbone, phrase_feature=phrase_feature)
    elif not as_tensor:
        total = float(total)
    return total if as_tensor else float(total)


class ExponentialMovingAverage:
    """Shadow value tracking ``decay * shadow + (1 - decay) * update``."""

    def __init__(self, initial: np.ndarray, decay: float):
        if not 0 < decay < 1:
            raise InputError(f"decay must lie in (0, 1), got {decay}")
        self.decay = decay
        self.value = np.array(initial, dtype=np.float64, copy=True)

    def update(self, current: np.ndarray) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * np.asarray(current, dtype=np.float64)


@dataclass
class InversionResult:
    token: PseudoToken
    history: list[dict] = field(default_factory=list)

    @property
    def initial_cos_loss(self) -> float:
        return self.history[0]["loss_cos"] if self.history else float("nan")

    @property
    def final_cos_loss(self) -> float:
        return self.history[-1]["loss_cos"] if self.history else float("nan")


def _image_rng(config: InversionConfig, image_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [config.seed & 0xFFFFFFFF] + stable_seed_words("invert", image_id)))


def _embedding_norm_scale(backbone: DualEncoder, vocab: ConceptVocabulary) -> float:
    """Mean word-embedding row norm over a vocabulary probe, for on-manifold init."""
    probes = [c.split()[0] for c in list(vocab)[:64]]
    norms = [float(np.linalg.norm(backbone.word_embedding(tok))) for tok in probes]
    return float(np.mean(norms))


def invert_feature(
    image_feature: np.ndarray,
    image_id: str,
    backbone: DualEncoder,
    classifier: ConceptClassifier,
    bank: PhraseBank,
    config: InversionConfig,
) -> InversionResult:
    """Optimize one pseudo token for a precomputed image feature."""
    feature = check_vector(image_feature, dim=backbone.feature_dim, name="image feature")
    assignment = classifier.assign(feature, config.k_concepts, image_id=image_id)
    missing = [c for c in assignment.concepts if c not in bank]
    if missing:
        raise InputError(f"phrase bank does not cover assigned concepts {missing[:5]} for image {image_id!r}")

    rng = _image_rng(config, image_id)
    scale = _embedding_norm_scale(backbone, classifier.vocab)
    init = rng.standard_normal(backbone.token_dim)
    init *= scale / np.linalg.norm(init)

    token = torch.tensor(init, dtype=torch.float64, requires_grad=True)
    image_t = torch.from_numpy(feature)
    optimizer = torch.optim.AdamW([token], lr=config.learning_rate, weight_decay=config.weight_decay,
                                  betas=_ADAM_BETAS, eps=_ADAM_EPS)
    ema = ExponentialMovingAverage(init, config.ema_decay)
    phrase_features: dict[str, torch.Tensor] = {}
    history: list[dict] = []

    for iteration in range(config.iterations):
        template = config.templates[int(rng.integers(len(config.templates)))]
        concept, phrase = sample_phrase(bank, assignment, rng)
        cached = phrase_features.get(phrase)
        if cached is None:
            cached = torch.from_numpy(backbone.encode_text(phrase))
            phrase_features[phrase] = cached

        loss_cos = cosine_loss(image_t, backbone.encode_template_rows_t(template, token))
        loss = config.lambda_cos * loss_cos
        if config.lambda_reg != 0.0:
            loss_reg = phrase_regularization_loss(token, concept, phrase, backbone, phrase_feature=cached)
            loss = loss + config.lambda_reg * loss_reg
        else:
            loss_reg = torch.zeros(())

        if not torch.isfinite(loss):
            raise TrainingAborted(
                f"non-finite loss at iteration {iteration} for image {image_id!r}", history=history)
        history.append({
            "iteration": iteration,
            "loss": float(loss.detach()),
            "loss_cos": float(loss_cos.detach()),
            "loss_reg": float(loss_reg.detach()),
            "template": template,
            "concept": concept,
        })

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        ema.update(token.detach().numpy())

    return InversionResult(token=PseudoToken(values=ema.value, source_image_id=image_id), history=history)


def invert_image(image, backbone: DualEncoder, vocab: ConceptVocabulary, bank: PhraseBank,
                 config: InversionConfig, image_id: str = "", classifier: ConceptClassifier | None = None) -> PseudoToken:
    """Encode an image and optimize its pseudo token."""
    classifier = classifier or ConceptClassifier(vocab, backbone)
    feature = backbone.encode_image(image)
    return invert_feature(feature, image_id, backbone, classifier, bank, config).token


def invert_batch(
    images,
    backbone: DualEncoder,
    vocab: ConceptVocabulary,
    bank: PhraseBank,
    config: InversionConfig,
    workers: int = 1,
    skip_ids=(),
) -> tuple[PseudoTokenSet, dict[str, str]]:
    """Invert a whole image collection; failures are collected, not fatal.

    Each image draws its own seed from (config seed, image id), so results
    are identical regardless of worker count or input order.
    """
    items = list(images.items()) if isinstance(images, dict) else list(images)
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image ids in batch")
    skip = set(skip_ids)
    work = [(i, img) for i, img in items if i not in skip]

    classifier = ConceptClassifier(vocab, backbone)
    failures: dict[str, str] = {}
    results: dict[str, PseudoToken] = {}

    def run(item):
        image_id, image = item
        feature = backbone.encode_image(image)
        return image_id, invert_feature(feature, image_id, backbone, classifier, bank, config).token

    if workers <= 1:
        for item in work:
            try:
                image_id, token = run(item)
                results[image_id] = token
            except Exception as exc:  # noqa: BLE001 - collected per image
                failures[item[0]] = f"{type(exc).__name__}: {exc}"
                logger.warning("inversion failed for %r: %s", item[0], exc)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run, item): item[0] for item in work}
            for future, image_id in futures.items():
                try:
                    _, token = future.result()
                    results[image_id] = token
                except Exception as exc:  # noqa: BLE001
                    failures[image_id] = f"{type(exc).__name__}: {exc}"
                    logger.warning("inversion failed for %r: %s", image_id, exc)

    ordered = {i: results[i] for i, _ in items if i in results}
    return PseudoTokenSet(ordered, config_digest=config.digest()), failures


class IterativeInverter(BaseEstimator, TransformerMixin):
    """sklearn-style transformer mapping image features to pseudo tokens.

    Stateless apart from its hyperparameters: ``fit`` only validates, and
    ``transform`` runs one optimization per input row.
    """

    def __init__(self, backbone=None, vocabulary=None, phrase_bank=None, iterations=350,
                 learning_rate=2e-2, weight_decay=0.01, lambda_cos=1.0, lambda_reg=0.5,
                 ema_decay=0.99, k_concepts=15, templates=DEFAULT_TEMPLATES, seed=0, workers=1):
        self.backbone = backbone
        self.vocabulary = vocabulary
        self.phrase_bank = phrase_bank
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_cos = lambda_cos
        self.lambda_reg = lambda_reg
        self.ema_decay = ema_decay
        self.k_concepts = k_concepts
        self.templates = templates
        self.seed = seed
        self.workers = workers

    def _config(self) -> InversionConfig:
        return InversionConfig(
            iterations=self.iterations, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, lambda_cos=self.lambda_cos, lambda_reg=self.lambda_reg,
            ema_decay=self.ema_decay, k_concepts=self.k_concepts,
            templates=tuple(self.templates), seed=self.seed)

    def fit(self, X=None, y=None):
        if self.backbone is None or self.vocabulary is None or self.phrase_bank is None:
            raise InputError("backbone, vocabulary and phrase_bank are required")
        self._config()
        return self

    def transform(self, X, image_ids=None) -> np.ndarray:
        self.fit()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.backbone.feature_dim:
            raise InputError(f"X must be (n, {self.backbone.feature_dim}), got {X.shape}")
        if image_ids is None:
            image_ids = [str(i) for i in range(X.shape[0])]
        if len(image_ids) != X.shape[0]:
            raise InputError("image_ids length must match X rows")
        config = self._config()
        classifier = ConceptClassifier(self.vocabulary, self.backbone)
        rows = [
            invert_feature(X[i], image_ids[i], self.backbone, classifier, self.phrase_bank, config).token.values
            for i in range(X.shape[0])
        ]
        return np.stack(rows) if rows else np.zeros((0, self.backbone.token_dim))


def load_features(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read an id-addressed feature store (ignoring the normalized flag)."""
    ids, matrix, _ = load_feature_store(path)
    return ids, matrix
