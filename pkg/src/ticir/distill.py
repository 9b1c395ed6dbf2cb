"""Feed-forward inversion network and its distillation training loop.

The network regresses pseudo tokens from image features in one pass. It is
trained to mimic tokens produced by the iterative optimizer through a
symmetric contrastive loss over each batch: for every pair index k the target
token must match its predicted counterpart more closely than any other token
in the batch, in both directions, with cross- and intra-batch similarities in
the denominators. A phrase-alignment term regularizes the predictions exactly
as in the iterative optimizer.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from .backbone import DualEncoder
from .errors import FormatError, InputError, NumericError, TrainingAborted
from .invert import PseudoTokenSet, phrase_regularization_loss
from .phrases import ConceptClassifier, ConceptVocabulary, PhraseBank, sample_phrase
from .validation import check_in_unit_interval, check_matrix

logger = logging.getLogger(__name__)

_MAGIC = b"TICIRNET1\n"


@dataclass(frozen=True)
class DistillConfig:
    """Training hyperparameters for the inversion network."""

    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 256
    temperature: float = 0.25
    lambda_distill: float = 1.0
    lambda_reg: float = 0.75
    weight_decay: float = 0.01
    k_concepts: int = 150
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.temperature <= 0:
            raise InputError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_distill < 0 or self.lambda_reg < 0:
            raise InputError("loss weights must be non-negative")
        if self.learning_rate <= 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        check_in_unit_interval(self.dropout, "dropout", open_right=True)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class InversionMLP(nn.Module):
    """Three affine layers with GELU and dropout, features in, token out.

    Dropout masks are drawn from an explicitly supplied numpy generator so
    training runs are reproducible end to end; eval mode is deterministic.
    """

    def __init__(self, input_dim: int, output_dim: int, dropout: float = 0.5, seed: int = 0):
        super().__init__()
        if input_dim < 1 or output_dim < 1:
            raise InputError("dimensions must be positive")
        check_in_unit_interval(dropout, "dropout", open_right=True)
        self.input_dim = input_dim
        self.hidden_dim = 4 * input_dim
        self.output_dim = output_dim
        self.dropout_rate = dropout
        self.fc_in = nn.Linear(self.input_dim, self.hidden_dim).to(torch.float64)
        self.fc_hidden = nn.Linear(self.hidden_dim, self.hidden_dim).to(torch.float64)
        self.fc_out = nn.Linear(self.hidden_dim, self.output_dim).to(torch.float64)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x3117]))
        for layer in (self.fc_in, self.fc_hidden, self.fc_out):
            fan_in = layer.weight.shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
                layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))

    def _dropout(self, x: torch.Tensor, rng: np.random.Generator | None) -> torch.Tensor:
        if not self.training or self.dropout_rate == 0.0:
            return x
        if rng is None:
            raise InputError("train-mode forward needs an rng for dropout masks")
        keep = 1.0 - self.dropout_rate
        mask = torch.from_numpy((rng.random(tuple(x.shape)) < keep).astype(np.float64))
        return x * mask / keep

    def forward(self, x: torch.Tensor, rng: np.random.Generator | None = None) -> torch.Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.input_dim:
            raise InputError(f"expected features of dim {self.input_dim}, got {x.shape[1]}")
        h = self._dropout(torch.nn.functional.gelu(self.fc_in(x.to(torch.float64))), rng)
        h = self._dropout(torch.nn.functional.gelu(self.fc_hidden(h)), rng)
        out = self.fc_out(h)
        return out.squeeze(0) if squeeze else out

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Deterministic eval-mode inference on an (n, d) or (d,) array."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                out = self.forward(torch.from_numpy(np.asarray(features, dtype=np.float64)))
            return out.numpy()
        finally:
            self.train(was_training)


def distillation_loss(predicted, targets, temperature: float):
    """Symmetric contrastive loss between predicted and target token batches.

    Collapses to exactly zero for a single-element batch, where both
    denominators reduce to the matching numerator.
    """
    if temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    as_tensor = isinstance(predicted, torch.Tensor)
    pred = predicted if as_tensor else torch.from_numpy(check_matrix(predicted, name="predicted"))
    targ = targets if isinstance(targets, torch.Tensor) else torch.from_numpy(check_matrix(targets, name="targets"))
    if pred.shape != targ.shape:
        raise InputError(f"batch shapes differ: {tuple(pred.shape)} vs {tuple(targ.shape)}")
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise InputError(f"batches must be non-empty 2-D, got {tuple(pred.shape)}")
    batch = pred.shape[0]
    if batch == 1:
        out = pred.sum() * 0.0
        return out if as_tensor else float(out)

    pred = pred.to(torch.float64)
    targ = targ.to(torch.float64)
    pred_norm = torch.linalg.vector_norm(pred, dim=1)
    targ_norm = torch.linalg.vector_norm(targ, dim=1)
    if float(pred_norm.min().detach()) == 0.0 or float(targ_norm.min().detach()) == 0.0:
        raise NumericError("zero-norm token in contrastive batch")
    p = pred / pred_norm.unsqueeze(1)
    t = targ / targ_norm.unsqueeze(1)

    sim_tp = (t @ p.T) / temperature  # row k: c(target_k, predicted_j)
    sim_pp = (p @ p.T) / temperature
    sim_pt = sim_tp.T  # row k: c(predicted_k, target_j)
    sim_tt = (t @ t.T) / temperature
    off_diag = 1.0 - torch.eye(batch, dtype=torch.float64)

    denom_a = torch.exp(sim_tp).sum(dim=1) + (torch.exp(sim_pp) * off_diag).sum(dim=1)
    denom_b = torch.exp(sim_pt).sum(dim=1) + (torch.exp(sim_tt) * off_diag).sum(dim=1)
    term_a = -(torch.diagonal(sim_tp) - torch.log(denom_a))
    term_b = -(torch.diagonal(sim_pt) - torch.log(denom_b))
    out = (term_a + term_b).sum() / batch
    return out if as_tensor else float(out)


def network_objective(
    features,
    target_tokens,
    image_ids,
    assignments,
    bank: PhraseBank | None,
    net: InversionMLP,
    config: DistillConfig,
    backbone: DualEncoder,
    rng: np.random.Generator | None = None,
    phrase_cache: dict | None = None,
):
    """Full training objective for one batch; returns (total, distill, reg) tensors.

    Both loss terms see the same train-mode forward pass. The reg term is
    averaged over per-image sampled (concept, phrase) pairs and skipped
    entirely when its weight is zero.
    """
    feats = features if isinstance(features, torch.Tensor) else torch.from_numpy(check_matrix(features, name="features"))
    targs = target_tokens if isinstance(target_tokens, torch.Tensor) else torch.from_numpy(check_matrix(target_tokens, name="targets"))
    if feats.shape[0] != targs.shape[0] or len(image_ids) != feats.shape[0]:
        raise InputError("features, targets and image_ids must be aligned")
    predicted = net.forward(feats, rng=rng)
    loss_distill = distillation_loss(predicted, targs, config.temperature)
    if config.lambda_reg == 0.0:
        zero = torch.zeros((), dtype=torch.float64)
        return config.lambda_distill * loss_distill, loss_distill, zero

    if bank is None or rng is None:
        raise InputError("phrase bank and rng are required when lambda_reg > 0")
    cache = phrase_cache if phrase_cache is not None else {}
    reg_terms = []
    for row, image_id in enumerate(image_ids):
        try:
            assignment = assignments[image_id]
        except KeyError:
            raise InputError(f"no concept assignment for image {image_id!r}") from None
        concept, phrase = sample_phrase(bank, assignment, rng)
        cached = cache.get(phrase)
        if cached is None:
            cached = torch.from_numpy(backbone.encode_text(phrase))
            cache[phrase] = cached
        reg_terms.append(phrase_regularization_loss(predicted[row], concept, phrase, backbone, phrase_feature=cached))
    loss_reg = torch.stack(reg_terms).mean()
    total = config.lambda_distill * loss_distill + config.lambda_reg * loss_reg
    return total, loss_distill, loss_reg


def train_inversion_network(
    image_ids,
    features,
    token_set: PseudoTokenSet,
    vocab: ConceptVocabulary | None,
    bank: PhraseBank | None,
    config: DistillConfig,
    backbone: DualEncoder,
    net: InversionMLP | None = None,
) -> tuple[InversionMLP, list[dict]]:
    """Distill a token set into the inversion network.

    Returns the trained network and a per-epoch log of mean losses. A
    non-finite loss aborts with the last epoch's good weights attached.
    """
    image_ids = list(image_ids)
    feats = check_matrix(features, cols=backbone.feature_dim, name="features")
    if len(image_ids) != feats.shape[0]:
        raise InputError("image_ids length must match feature rows")
    missing = [i for i in image_ids if i not in token_set]
    if missing:
        raise InputError(f"token set does not cover images {missing[:5]}")
    targets = np.stack([token_set[i].values for i in image_ids]) if image_ids else np.zeros((0, backbone.token_dim))

    if net is None:
        net = InversionMLP(backbone.feature_dim, backbone.token_dim, dropout=config.dropout, seed=config.seed)

    assignments = {}
    if config.lambda_reg > 0.0:
        if vocab is None or bank is None:
            raise InputError("vocabulary and phrase bank are required when lambda_reg > 0")
        classifier = ConceptClassifier(vocab, backbone)
        for i, image_id in enumerate(image_ids):
            assignments[image_id] = classifier.assign(feats[i], config.k_concepts, image_id=image_id)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0xD157]))
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay, betas=(0.9, 0.999), eps=1e-8)
    feats_t = torch.from_numpy(feats)
    targets_t = torch.from_numpy(targets)
    log: list[dict] = []
    last_good = copy.deepcopy(net.state_dict())
    phrase_cache: dict = {}

    net.train()
    for epoch in range(config.epochs):
        perm = rng.permutation(len(image_ids))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # contrastive term degenerates below two samples
            batch_ids = [image_ids[j] for j in idx]
            total, l_distill, l_reg = network_objective(
                feats_t[idx], targets_t[idx], batch_ids, assignments, bank, net, config, backbone,
                rng=rng, phrase_cache=phrase_cache)
            if not torch.isfinite(total):
                net.load_state_dict(last_good)
                raise TrainingAborted(
                    f"non-finite loss in epoch {epoch}", last_good_state=last_good, history=log)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums += np.array([float(total.detach()), float(l_distill.detach()), float(l_reg.detach())])
            n_batches += 1
        means = sums / max(n_batches, 1)
        entry = {"epoch": epoch, "loss": means[0], "loss_distil": means[1], "loss_gpt": means[2]}
        log.append(entry)
        last_good = copy.deepcopy(net.state_dict())
        logger.debug("epoch %d: loss=%.6f distil=%.6f gpt=%.6f", epoch, *means)
    net.eval()
    return net, log


def write_training_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(net: InversionMLP, path: str | Path, config_digest: str = "") -> None:
    """Versioned binary checkpoint: magic, JSON header, float64 tensors."""
    state = net.state_dict()
    header = {
        "version": 1,
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "dropout": net.dropout_rate,
        "config_digest": config_digest,
        "tensors": [[name, list(tensor.shape)] for name, tensor in state.items()],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, tensor in state.items():
            fh.write(np.ascontiguousarray(tensor.numpy(), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expected_digest: str | None = None) -> tuple[InversionMLP, dict]:
    """Restore a checkpoint; eval-mode outputs match the saved network bitwise."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise FormatError(f"{path} is not an inversion-network checkpoint")
    body = raw[len(_MAGIC):]
    newline = body.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")

    blob = body[newline + 1:]
    expected_floats = sum(int(np.prod(shape)) for _, shape in header["tensors"])
    if len(blob) != expected_floats * 8:
        raise FormatError(f"{path}: payload holds {len(blob)} bytes, expected {expected_floats * 8}")

    net = InversionMLP(int(header["input_dim"]), int(header["output_dim"]), dropout=float(header["dropout"]))
    state = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset += count * 8
    net.load_state_dict(state)
    net.eval()

    if expected_digest is not None and header.get("config_digest") and header["config_digest"] != expected_digest:
        import warnings

        warnings.warn(
            f"checkpoint {path} was trained with config digest {header['config_digest']}, expected {expected_digest}",
            stacklevel=2)
    return net, header


class DistilledInverter(BaseEstimator, TransformerMixin):
    """sklearn-style estimator: fit on (features, target tokens), predict tokens."""

    def __init__(self, backbone=None, vocabulary=None, phrase_bank=None, epochs=100,
                 learning_rate=1e-4, batch_size=256, temperature=0.25, lambda_distill=1.0,
                 lambda_reg=0.75, weight_decay=0.01, k_concepts=150, dropout=0.5, seed=0):
        self.backbone = backbone
        self.vocabulary = vocabulary
        self.phrase_bank = phrase_bank
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.temperature = temperature
        self.lambda_distill = lambda_distill
        self.lambda_reg = lambda_reg
        self.weight_decay = weight_decay
        self.k_concepts = k_concepts
        self.dropout = dropout
        self.seed = seed

    def _config(self) -> DistillConfig:
        return DistillConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            temperature=self.temperature, lambda_distill=self.lambda_distill,
            lambda_reg=self.lambda_reg, weight_decay=self.weight_decay,
            k_concepts=self.k_concepts, dropout=self.dropout, seed=self.seed)

    def fit(self, X, y, image_ids=None):
        if self.backbone is None:
            raise InputError("a backbone is required")
        X = check_matrix(X, cols=self.backbone.feature_dim, name="X")
        y = check_matrix(y, cols=self.backbone.token_dim, name="y")
        if X.shape[0] != y.shape[0]:
            raise InputError("X and y must have the same number of rows")
        if image_ids is None:
            image_ids = [str(i) for i in range(X.shape[0])]
        token_set = PseudoTokenSet()
        from .invert import PseudoToken

        for i, image_id in enumerate(image_ids):
            token_set.add(PseudoToken(values=y[i], source_image_id=image_id))
        self.network_, self.log_ = train_inversion_network(
            image_ids, X, token_set, self.vocabulary, self.phrase_bank,
            self._config(), self.backbone)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "network_"):
            raise InputError("estimator is not fitted")
        X = check_matrix(X, cols=self.backbone.feature_dim, name="X")
        return self.network_.predict(X)

    def transform(self, X) -> np.ndarray:
        return self.predict(X)
