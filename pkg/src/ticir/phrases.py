"""Concept vocabulary, zero-shot concept assignment and the phrase bank.

Regularization phrases all extend the prompt ``a photo of {concept}``. A real
deployment generates them once with a large language model; the bundled
:class:`TemplatePhraseGenerator` produces deterministic stand-ins from a slot
grammar so that the rest of the pipeline can run without one. Any callable
with the signature ``(prompt, max_tokens, temperature, seed) -> str`` can be
plugged in instead.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import PSEUDO_MARKER, DualEncoder
from .errors import FormatError, InputError, MissingConceptError
from .validation import check_positive_int, check_vector, stable_seed_words, unit_normalize

CONCEPT_PROMPT = "a photo of {concept}"
_PROMPT_PREFIX = "a photo of "

DEFAULT_PHRASES_PER_CONCEPT = 256
DEFAULT_PHRASE_MAX_TOKENS = 35
DEFAULT_PHRASE_TEMPERATURE = 0.5


@dataclass(frozen=True)
class ConceptVocabulary:
    """Ordered, duplicate-free list of concept names."""

    concepts: tuple[str, ...]

    def __post_init__(self):
        if len(self.concepts) < 1:
            raise InputError("vocabulary must contain at least one concept")
        seen = set()
        for concept in self.concepts:
            if not concept or not concept.strip():
                raise InputError("vocabulary entries must be nonempty")
            if concept in seen:
                raise FormatError(f"duplicate concept {concept!r}")
            seen.add(concept)

    def __len__(self) -> int:
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __contains__(self, concept) -> bool:
        return concept in set(self.concepts)


def load_vocabulary(path: str | Path) -> ConceptVocabulary:
    """Read a newline-delimited UTF-8 concept list, preserving order."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [line.strip() for line in text.splitlines()]
    concepts = [line for line in lines if line]
    if not concepts:
        raise FormatError(f"vocabulary file {path} contains no concepts")
    try:
        return ConceptVocabulary(tuple(concepts))
    except FormatError as exc:
        raise FormatError(f"vocabulary file {path}: {exc}") from exc


def save_vocabulary(vocab: ConceptVocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.concepts) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ConceptAssignment:
    """The k vocabulary concepts most similar to one image, best first."""

    image_id: str
    concepts: tuple[str, ...]
    scores: tuple[float, ...] = field(default=())


class ConceptClassifier:
    """Zero-shot classifier scoring images against concept prompts.

    Prompt features ("a photo of {concept}") are encoded once at
    construction, so repeated assignments over a large vocabulary are a
    single matrix product.
    """

    def __init__(self, vocab: ConceptVocabulary, backbone: DualEncoder, prompt: str = CONCEPT_PROMPT):
        self.vocab = vocab
        self.backbone = backbone
        rows = [unit_normalize(backbone.encode_text(prompt.format(concept=c)), name=f"prompt for {c!r}") for c in vocab]
        self._prompt_features = np.stack(rows)

    def assign(self, image_feature, k: int, image_id: str = "") -> ConceptAssignment:
        check_positive_int(k, "k")
        if k > len(self.vocab):
            raise InputError(f"k={k} exceeds vocabulary size {len(self.vocab)}")
        feature = unit_normalize(check_vector(image_feature, dim=self.backbone.feature_dim, name="image feature"))
        scores = self._prompt_features @ feature
        # ties broken by vocabulary order
        order = np.lexsort((np.arange(len(scores)), -scores))[:k]
        return ConceptAssignment(
            image_id=image_id,
            concepts=tuple(self.vocab.concepts[i] for i in order),
            scores=tuple(float(scores[i]) for i in order),
        )


def classify_concepts(image_feature, vocab: ConceptVocabulary, k: int, backbone: DualEncoder, image_id: str = "") -> ConceptAssignment:
    """One-shot convenience wrapper; build a ConceptClassifier for bulk use."""
    return ConceptClassifier(vocab, backbone).assign(image_feature, k, image_id=image_id)


# --- phrase bank -----------------------------------------------------------


@dataclass
class PhraseBank:
    """Concept -> regularization phrases, each extending the concept prompt."""

    entries: dict[str, list[str]]

    def __post_init__(self):
        for concept, phrases in self.entries.items():
            if not phrases:
                raise FormatError(f"concept {concept!r} has an empty phrase list")
            prefix = CONCEPT_PROMPT.format(concept=concept)
            for phrase in phrases:
                if not phrase.startswith(prefix):
                    raise FormatError(f"phrase {phrase!r} does not start with {prefix!r}")

    def __contains__(self, concept) -> bool:
        return concept in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def phrases(self, concept: str) -> list[str]:
        try:
            return self.entries[concept]
        except KeyError:
            raise MissingConceptError(concept) from None

    def validate_against(self, vocab: ConceptVocabulary) -> None:
        unknown = [c for c in self.entries if c not in vocab]
        if unknown:
            raise FormatError(f"bank concepts missing from vocabulary: {unknown[:5]}")


def save_phrase_bank(bank: PhraseBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank.entries, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def load_phrase_bank(path: str | Path, vocab: ConceptVocabulary | None = None) -> PhraseBank:
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"phrase bank {path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, dict):
        raise FormatError(f"phrase bank {path} must be a JSON object")
    bank = PhraseBank({str(c): [str(p) for p in ps] for c, ps in entries.items()})
    if vocab is not None:
        bank.validate_against(vocab)
    return bank


def substitute_pseudo(phrase: str, concept: str) -> str:
    """Replace the concept occurrence in a bank phrase with the pseudo-word marker.

    The concept sits right after the fixed prompt prefix, so substitution is
    position-aware and never clobbers an accidental earlier substring match.
    """
    if phrase.startswith(_PROMPT_PREFIX) and phrase[len(_PROMPT_PREFIX):].startswith(concept):
        start = len(_PROMPT_PREFIX)
    else:
        start = phrase.find(concept)
        if start < 0:
            raise InputError(f"concept {concept!r} not found in phrase {phrase!r}")
    return phrase[:start] + PSEUDO_MARKER + phrase[start + len(concept):]


def restore_concept(phrase: str, concept: str) -> str:
    """Inverse of :func:`substitute_pseudo` (first marker back to the concept)."""
    start = phrase.find(PSEUDO_MARKER)
    if start < 0:
        raise InputError(f"no pseudo-word marker in {phrase!r}")
    return phrase[:start] + concept + phrase[start + len(PSEUDO_MARKER):]


def sample_phrase(bank: PhraseBank, assignment: ConceptAssignment, rng: np.random.Generator) -> tuple[str, str]:
    """Uniformly pick one assigned concept, then one of its phrases."""
    if not assignment.concepts:
        raise InputError("assignment has no concepts")
    concept = assignment.concepts[int(rng.integers(len(assignment.concepts)))]
    phrases = bank.phrases(concept)
    return concept, phrases[int(rng.integers(len(phrases)))]


# --- phrase generation -----------------------------------------------------


class TemplatePhraseGenerator:
    """Deterministic drop-in for a generative language model.

    Continuations are assembled from a small slot grammar; the temperature
    controls how much of the skeleton pool is in play and the seed makes
    every draw reproducible.
    """

    _SKELETONS = (
        "that was taken {place}",
        "that was taken {place} {time}",
        "that shows {detail}",
        "that was captured {time} by {person}",
        "standing next to {object}",
        "seen from {viewpoint} {time}",
        "that looks {adjective} and {adjective2}",
        "with {lighting} lighting in the background",
        "that was photographed {place} by {person}",
        "surrounded by {detail}",
    )
    _SLOTS = {
        "place": ("at the beach", "in a park", "on a city street", "inside a small studio",
                  "near the river", "in the mountains", "at a crowded market", "in the backyard"),
        "time": ("early in the morning", "at sunset", "on a cloudy day", "late at night",
                 "during winter", "last summer"),
        "person": ("a professional photographer", "its owner", "a tourist", "a friend of mine"),
        "detail": ("many vivid colors", "a blurred background", "interesting textures",
                   "a reflection in the water", "tall grass and flowers"),
        "object": ("a wooden fence", "an old car", "a tall tree", "a brick wall"),
        "viewpoint": ("above", "a low angle", "far away", "up close"),
        "adjective": ("bright", "old", "small", "large", "colorful", "unusual"),
        "adjective2": ("detailed", "shiny", "worn", "elegant"),
        "lighting": ("soft", "harsh", "warm", "natural", "dramatic"),
    }

    def __call__(self, prompt: str, max_tokens: int, temperature: float, seed: int) -> str:
        if temperature <= 0:
            raise InputError(f"temperature must be positive, got {temperature}")
        rng = np.random.default_rng(np.random.SeedSequence(stable_seed_words("phrase", prompt, seed)))
        pool = max(1, math.ceil(len(self._SKELETONS) * min(1.0, temperature * 2.0)))
        skeleton = self._SKELETONS[int(rng.integers(pool))]
        fillers = {slot: options[int(rng.integers(len(options)))] for slot, options in self._SLOTS.items()}
        phrase = prompt + " " + skeleton.format(**fillers)
        words = phrase.split()
        if len(words) > max_tokens:
            words = words[:max_tokens]
        return " ".join(words)


def generate_phrases(
    concept: str,
    generator,
    n: int = DEFAULT_PHRASES_PER_CONCEPT,
    max_tokens: int = DEFAULT_PHRASE_MAX_TOKENS,
    temperature: float = DEFAULT_PHRASE_TEMPERATURE,
    seed: int = 0,
    vocab: ConceptVocabulary | None = None,
) -> list[str]:
    """Generate ``n`` regularization phrases for one concept."""
    check_positive_int(n, "n")
    check_positive_int(max_tokens, "max_tokens")
    if vocab is not None and concept not in vocab:
        raise InputError(f"concept {concept!r} is not in the vocabulary")
    prompt = CONCEPT_PROMPT.format(concept=concept)
    phrases = []
    for i in range(n):
        try:
            phrase = generator(prompt, max_tokens, temperature, seed + i)
        except Exception as exc:
            raise FormatError(f"phrase generator failed for concept {concept!r}: {exc}") from exc
        if not phrase.startswith(prompt):
            raise FormatError(f"generator output for {concept!r} does not extend the prompt: {phrase!r}")
        words = phrase.split()
        if len(words) > max_tokens:
            phrase = " ".join(words[:max_tokens])
        phrases.append(phrase)
    return phrases


def build_phrase_bank(
    vocab: ConceptVocabulary,
    generator=None,
    n: int = DEFAULT_PHRASES_PER_CONCEPT,
    max_tokens: int = DEFAULT_PHRASE_MAX_TOKENS,
    temperature: float = DEFAULT_PHRASE_TEMPERATURE,
    seed: int = 0,
) -> PhraseBank:
    """Pre-generate phrases for every vocabulary concept."""
    generator = generator or TemplatePhraseGenerator()
    entries = {
        concept: generate_phrases(concept, generator, n=n, max_tokens=max_tokens, temperature=temperature, seed=seed)
        for concept in vocab
    }
    return PhraseBank(entries)
