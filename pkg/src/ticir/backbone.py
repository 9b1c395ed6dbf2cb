"""Dual-encoder backbone abstraction with a deterministic mock implementation.

A backbone bundles four pieces: an image encoder producing features in R^d,
a tokenizer, a word-embedding table mapping tokens to rows in R^{d_w}, and a
text encoder mapping a row sequence back to R^d. Text containing the reserved
pseudo-word marker (``PSEUDO_MARKER``) yields placeholder positions where a
learned pseudo-token vector can be spliced in; the text encoding must be
differentiable with respect to every row so that splice positions can be
optimized or predicted by a network.

The bundled :class:`MockDualEncoder` is fully deterministic given its config
seed and differentiable through torch, so gradient-based components can be
exercised without any pretrained weights:

* image encoder: the decoded, resized and center-cropped pixels are hashed;
  the digest seeds a pseudo-random statistics vector which is sent through a
  fixed seeded projection and tanh.
* text encoder: position-weighted mean of the token rows, then a fixed seeded
  affine map and tanh. The position weights make it sensitive to token order
  and to every individual row.
* tokenizer: lowercase + whitespace split; the pseudo-word marker is a single
  token.
"""
from __future__ import annotations

import io
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, InputError
from .validation import check_positive_int, check_vector, stable_seed_words

PSEUDO_MARKER = "⟨*⟩"

_IMAGE_STATS_DIM = 64
_CROP_SIZE = 32


@dataclass(frozen=True)
class BackboneConfig:
    """Dimensions and seed of a backbone instance."""

    feature_dim: int = 32
    token_dim: int = 32
    context_length: int = 77
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.feature_dim, "feature_dim", minimum=8)
        check_positive_int(self.token_dim, "token_dim", minimum=8)
        check_positive_int(self.context_length, "context_length", minimum=8)
        check_positive_int(int(self.seed), "seed", minimum=-(2**63))

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "token_dim": self.token_dim,
            "context_length": self.context_length,
            "seed": self.seed,
        }


@dataclass
class TokenSequence:
    """Embedded token rows plus the positions of any pseudo-word markers."""

    rows: np.ndarray
    placeholder_positions: tuple[int, ...] = ()
    truncated: bool = False
    tokens: tuple[str, ...] = field(default=())

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise InputError(f"token rows must be a non-empty 2-D matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise InputError("token rows contain non-finite entries")
        for pos in self.placeholder_positions:
            if not 0 <= pos < rows.shape[0]:
                raise InputError(f"placeholder position {pos} outside sequence of length {rows.shape[0]}")
        self.rows = rows

    def __len__(self) -> int:
        return self.rows.shape[0]


class DualEncoder(ABC):
    """Abstract image/text dual encoder.

    Implementations must be immutable after construction and deterministic:
    every method is a pure function of its inputs and the instance config.
    ``encode_rows_t`` is the differentiable core; the ndarray-facing methods
    are thin wrappers around it so both routes share one implementation.
    """

    @property
    @abstractmethod
    def feature_dim(self) -> int: ...

    @property
    @abstractmethod
    def token_dim(self) -> int: ...

    @property
    @abstractmethod
    def context_length(self) -> int: ...

    @abstractmethod
    def encode_image(self, image) -> np.ndarray:
        """Encode an image (path, PIL image or pixel array) to a (d,) feature."""

    @abstractmethod
    def tokenize(self, text: str) -> list[str]: ...

    @abstractmethod
    def word_embedding(self, token: str) -> np.ndarray:
        """Embedding-table row for a single token."""

    @abstractmethod
    def encode_rows_t(self, rows: torch.Tensor) -> torch.Tensor:
        """Differentiable text encoding of an (n, d_w) float64 row tensor."""

    def embed_text(self, text: str) -> TokenSequence:
        """Tokenize and embed text; marker tokens become placeholder positions."""
        tokens = self.tokenize(text)
        if not tokens:
            raise InputError("text is empty after normalization")
        truncated = len(tokens) > self.context_length
        tokens = tokens[: self.context_length]
        rows = np.stack([self.word_embedding(tok) for tok in tokens])
        placeholders = tuple(i for i, tok in enumerate(tokens) if tok == PSEUDO_MARKER)
        return TokenSequence(rows=rows, placeholder_positions=placeholders, truncated=truncated, tokens=tuple(tokens))

    def encode_token_sequence(self, seq: TokenSequence) -> np.ndarray:
        with torch.no_grad():
            return self.encode_rows_t(torch.from_numpy(np.ascontiguousarray(seq.rows))).numpy()

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode_token_sequence(self.embed_text(text))

    def encode_template_rows_t(self, template: str, pseudo: torch.Tensor, allow_multiple: bool = False) -> torch.Tensor:
        """Differentiable encoding of a marker template with ``pseudo`` spliced in.

        Gradient flows to ``pseudo``. The template must contain exactly one
        marker unless ``allow_multiple`` is set.
        """
        seq = self.embed_text(template)
        positions = seq.placeholder_positions
        if not positions:
            raise InputError(f"template {template!r} contains no pseudo-word marker")
        if len(positions) > 1 and not allow_multiple:
            raise InputError(f"template {template!r} contains {len(positions)} markers, expected exactly one")
        if pseudo.shape != (self.token_dim,):
            raise InputError(f"pseudo token must have shape ({self.token_dim},), got {tuple(pseudo.shape)}")
        base = torch.from_numpy(np.ascontiguousarray(seq.rows))
        pieces, prev = [], 0
        for pos in positions:
            pieces.append(base[prev:pos])
            pieces.append(pseudo.reshape(1, -1))
            prev = pos + 1
        pieces.append(base[prev:])
        return self.encode_rows_t(torch.cat(pieces, dim=0))

    def encode_text_with_pseudo(self, template: str, pseudo, allow_multiple: bool = False) -> np.ndarray:
        pseudo = check_vector(getattr(pseudo, "values", pseudo), dim=self.token_dim, name="pseudo token")
        with torch.no_grad():
            out = self.encode_template_rows_t(template, torch.from_numpy(pseudo.copy()), allow_multiple=allow_multiple)
        return out.numpy()


class MockDualEncoder(DualEncoder):
    """Seeded, differentiable stand-in for a pretrained dual encoder."""

    def __init__(self, config: BackboneConfig | None = None, **kwargs):
        if config is None:
            config = BackboneConfig(**kwargs)
        elif kwargs:
            raise InputError("pass either a BackboneConfig or keyword fields, not both")
        self.config = config
        d, dw = config.feature_dim, config.token_dim
        rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0x7E47]))
        self._text_weight = rng.standard_normal((d, dw)) * (2.0 / np.sqrt(dw))
        self._text_bias = rng.standard_normal(d) * 0.3
        self._image_proj = rng.standard_normal((d, _IMAGE_STATS_DIM)) * (2.0 / np.sqrt(_IMAGE_STATS_DIM))
        self._text_weight_t = torch.from_numpy(self._text_weight)
        self._text_bias_t = torch.from_numpy(self._text_bias)
        self._row_cache: dict[str, np.ndarray] = {}

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def token_dim(self) -> int:
        return self.config.token_dim

    @property
    def context_length(self) -> int:
        return self.config.context_length

    def tokenize(self, text: str) -> list[str]:
        if not isinstance(text, str):
            raise InputError(f"text must be a string, got {type(text).__name__}")
        return text.lower().split()

    def word_embedding(self, token: str) -> np.ndarray:
        token = token.lower()
        row = self._row_cache.get(token)
        if row is None:
            words = stable_seed_words("token", token)
            rng = np.random.default_rng(np.random.SeedSequence([self.config.seed & 0xFFFFFFFF, 0x70CE] + words))
            row = rng.standard_normal(self.config.token_dim) / np.sqrt(self.config.token_dim)
            row.setflags(write=False)
            self._row_cache[token] = row
        return row.copy()

    def encode_rows_t(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.ndim != 2 or rows.shape[1] != self.config.token_dim:
            raise InputError(f"rows must be (n, {self.config.token_dim}), got {tuple(rows.shape)}")
        rows = rows.to(torch.float64)
        weights = 1.0 / (1.0 + torch.arange(rows.shape[0], dtype=torch.float64))
        mean = (weights @ rows) / weights.sum()
        return torch.tanh(self._text_weight_t @ mean + self._text_bias_t)

    def encode_image(self, image) -> np.ndarray:
        pixels = _preprocess_image(image)
        words = stable_seed_words("image", pixels.tobytes())
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed & 0xFFFFFFFF, 0x1A6E] + words))
        stats = rng.standard_normal(_IMAGE_STATS_DIM)
        return np.tanh(self._image_proj @ stats)


def _preprocess_image(image) -> np.ndarray:
    """Decode, resize the short side and center-crop to a fixed RGB patch."""
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                pil = im.convert("RGB")
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise InputError(f"cannot decode image {image!r}: {exc}") from exc
    elif isinstance(image, Image.Image):
        pil = image.convert("RGB")
    elif isinstance(image, (bytes, bytearray)):
        try:
            with Image.open(io.BytesIO(image)) as im:
                pil = im.convert("RGB")
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise InputError(f"cannot decode image bytes: {exc}") from exc
    elif isinstance(image, np.ndarray):
        pil = _array_to_pil(image)
    else:
        raise InputError(f"unsupported image input of type {type(image).__name__}")

    w, h = pil.size
    if w < 1 or h < 1:
        raise InputError("image has zero extent")
    scale = _CROP_SIZE / min(w, h)
    pil = pil.resize((max(_CROP_SIZE, round(w * scale)), max(_CROP_SIZE, round(h * scale))), Image.BILINEAR)
    w, h = pil.size
    left, top = (w - _CROP_SIZE) // 2, (h - _CROP_SIZE) // 2
    pil = pil.crop((left, top, left + _CROP_SIZE, top + _CROP_SIZE))
    return np.asarray(pil, dtype=np.uint8)


def _array_to_pil(arr: np.ndarray) -> Image.Image:
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise InputError(f"pixel array must be HxW or HxWxC, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)):
            raise InputError("pixel array contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0) * 255.0
    arr = arr.astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


# --- adapter loading -------------------------------------------------------

_BACKBONE_FILE = "backbone.json"


def save_mock_backbone(directory: str | Path, config: BackboneConfig) -> Path:
    """Write a loadable mock-backbone directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = {"type": "mock", **config.to_dict()}
    path = directory / _BACKBONE_FILE
    path.write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_mock(spec: dict) -> MockDualEncoder:
    fields = {k: int(spec[k]) for k in ("feature_dim", "token_dim", "context_length", "seed") if k in spec}
    return MockDualEncoder(BackboneConfig(**fields))


BACKBONE_LOADERS = {"mock": _load_mock}


def load_backbone(directory: str | Path) -> DualEncoder:
    """Load a backbone from a directory containing ``backbone.json``.

    The JSON object must carry a ``type`` key naming a registered adapter;
    adapters for real pretrained encoders can be added to
    ``BACKBONE_LOADERS`` without touching any caller.
    """
    directory = Path(directory)
    path = directory / _BACKBONE_FILE
    if not path.exists():
        raise FormatError(f"no {_BACKBONE_FILE} in {directory}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    kind = spec.get("type")
    loader = BACKBONE_LOADERS.get(kind)
    if loader is None:
        raise FormatError(f"unknown backbone type {kind!r} (registered: {sorted(BACKBONE_LOADERS)})")
    return loader(spec)
