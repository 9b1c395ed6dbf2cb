"""Composed image retrieval with textual inversion.

Maps a reference image into a pseudo-word token that slots into text
prompts, composes it with a relative caption, and retrieves targets by
cosine similarity. Ships an iterative per-image optimizer, a distilled
feed-forward inversion network, retrieval baselines, an evaluation
harness, dataset tooling and a human-in-the-loop annotation service.
"""

from .backbone import (
    PSEUDO_MARKER,
    BackboneConfig,
    DualEncoder,
    MockDualEncoder,
    TokenSequence,
    load_backbone,
    save_mock_backbone,
)
from .datasets import (
    SEMANTIC_ASPECTS,
    CIRCODataset,
    CIRCOQuery,
    CIRRDataset,
    CIRRTriplet,
    CoverageEstimate,
    FashionIQDataset,
    FashionIQTriplet,
    coverage_estimate,
    dataset_stats,
    load_dataset,
    save_dataset,
)
from .distill import (
    DistillConfig,
    DistilledInverter,
    InversionMLP,
    distillation_loss,
    load_checkpoint,
    network_objective,
    save_checkpoint,
    train_inversion_network,
)
from .errors import (
    ConfigError,
    DatasetValidationError,
    FormatError,
    InputError,
    MissingConceptError,
    NumericError,
    TicirError,
    TrainingAborted,
)
from .invert import (
    DEFAULT_TEMPLATES,
    ExponentialMovingAverage,
    InversionConfig,
    IterativeInverter,
    PseudoToken,
    PseudoTokenSet,
    cosine_loss,
    inversion_objective,
    invert_batch,
    invert_image,
    phrase_regularization_loss,
)
from .metrics import (
    MetricsReport,
    RelevanceJudgment,
    evaluate,
    map_at_k,
    recall_at_k,
    recall_subset_at_k,
)
from .phrases import (
    ConceptAssignment,
    ConceptClassifier,
    ConceptVocabulary,
    PhraseBank,
    TemplatePhraseGenerator,
    build_phrase_bank,
    classify_concepts,
    generate_phrases,
    load_phrase_bank,
    load_vocabulary,
    sample_phrase,
    save_phrase_bank,
    save_vocabulary,
    substitute_pseudo,
)
from .retrieval import (
    EmbeddingIndex,
    QuerySpec,
    build_index,
    compose_baseline_query,
    compose_dual_caption_query,
    compose_inversion_query,
    compose_pseudo_query,
    near_duplicate_filter,
    search,
)

__version__ = "0.1.0"
