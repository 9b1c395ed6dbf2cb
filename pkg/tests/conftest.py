import numpy as np
import pytest
from PIL import Image

from ticir import (
    BackboneConfig,
    ConceptVocabulary,
    MockDualEncoder,
    build_phrase_bank,
)

CONCEPTS = ("dog", "cat", "red car", "bicycle", "stop sign", "lamp")


def synthetic_image(key: str, size=(24, 28)) -> np.ndarray:
    """Deterministic RGB pixel array derived from the key."""
    seed = int.from_bytes(key.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)


@pytest.fixture(scope="session")
def backbone():
    return MockDualEncoder(BackboneConfig(feature_dim=16, token_dim=16, context_length=32, seed=7))


@pytest.fixture(scope="session")
def vocab():
    return ConceptVocabulary(CONCEPTS)


@pytest.fixture(scope="session")
def bank(vocab):
    return build_phrase_bank(vocab, n=6, seed=11)


@pytest.fixture(scope="session")
def image_arrays():
    return {f"img{i:02d}": synthetic_image(f"img{i:02d}") for i in range(8)}


@pytest.fixture(scope="session")
def png_dir(tmp_path_factory, image_arrays):
    directory = tmp_path_factory.mktemp("corpus")
    for image_id, pixels in image_arrays.items():
        Image.fromarray(pixels).save(directory / f"{image_id}.png")
    return directory


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
