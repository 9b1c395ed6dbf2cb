"""Command-line front door for the batch workflows.

Every command validates its full configuration before touching any output
file, exits 2 on configuration errors and 1 on runtime failures, and writes
results only to files; logs go to stderr. A TOML config file can supply any
option (flat keys named like the flags); explicit flags win.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .annotation import AnnotationService, create_app
from .backbone import load_backbone
from .datasets import load_dataset
from .distill import (
    DistillConfig,
    load_checkpoint,
    save_checkpoint,
    train_inversion_network,
    write_training_log,
)
from .errors import ConfigError, TicirError
from .invert import InversionConfig, PseudoTokenSet, invert_batch
from .metrics import evaluate
from .phrases import TemplatePhraseGenerator, build_phrase_bank, load_phrase_bank, load_vocabulary, save_phrase_bank
from .retrieval import (
    EmbeddingIndex,
    QuerySpec,
    compose_baseline_query,
    compose_inversion_query,
    search,
)
from .storage import save_feature_store, load_feature_store

logger = logging.getLogger("ticir")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _fail(code: int, message: str):
    logger.error(message)
    sys.exit(code)


def _guarded(fn):
    """Map toolkit exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(2, f"configuration error: {exc}")
        except TicirError as exc:
            _fail(1, f"runtime failure: {exc}")
        except OSError as exc:
            _fail(1, f"io failure: {exc}")

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


class Settings:
    """Flag > config-file > builtin default resolution."""

    def __init__(self, config_path: str | None):
        self.values = {}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            try:
                self.values = tomllib.loads(path.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc

    def get(self, key: str, flag_value, default):
        if flag_value is not None:
            return flag_value
        if key in self.values:
            return self.values[key]
        return default


def _require_path(value, name: str) -> Path:
    if value is None:
        raise ConfigError(f"--{name} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"--{name} path {path} does not exist")
    return path


def _load_images_arg(value, name="images") -> dict[str, Path]:
    """Accept a directory of images or a JSON manifest {id: path}."""
    path = _require_path(value, name)
    if path.is_dir():
        images = {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
        if not images:
            raise ConfigError(f"no images found under {path}")
        return images
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"image manifest {path} is not valid JSON: {exc}") from exc
    base = path.parent
    out = {}
    for image_id, rel in manifest.items():
        target = Path(rel)
        if not target.is_absolute():
            target = base / target
        if not target.exists():
            raise ConfigError(f"image manifest entry {image_id!r} points to missing file {target}")
        out[str(image_id)] = target
    if not out:
        raise ConfigError(f"image manifest {path} is empty")
    return out


@click.group()
@click.version_option(version=__version__, prog_name="ticir")
def main():
    """Composed-image-retrieval toolkit."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-phrases")
@click.option("--vocab", "vocab_path", type=str, default=None, help="newline-delimited concept list")
@click.option("--out", "out_path", type=str, required=True)
@click.option("--n", type=int, default=None, help="phrases per concept [256]")
@click.option("--temperature", type=float, default=None, help="[0.5]")
@click.option("--max-tokens", type=int, default=None, help="[35]")
@click.option("--seed", type=int, default=None, help="[0]")
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_gen_phrases(vocab_path, out_path, n, temperature, max_tokens, seed, config_path):
    """Pre-generate the regularization phrase bank for a vocabulary."""
    settings = Settings(config_path)
    vocab = load_vocabulary(_require_path(settings.get("vocab", vocab_path, None), "vocab"))
    n = int(settings.get("n", n, 256))
    temperature = float(settings.get("temperature", temperature, 0.5))
    max_tokens = int(settings.get("max_tokens", max_tokens, 35))
    seed = int(settings.get("seed", seed, 0))
    if n < 1 or max_tokens < 1 or temperature <= 0:
        raise ConfigError(f"invalid generation parameters n={n} max_tokens={max_tokens} temperature={temperature}")

    bank = build_phrase_bank(vocab, TemplatePhraseGenerator(), n=n, max_tokens=max_tokens,
                             temperature=temperature, seed=seed)
    save_phrase_bank(bank, out_path)
    logger.info("wrote %d concepts x %d phrases to %s", len(bank), n, out_path)


def _inversion_config(settings: Settings, **flags) -> InversionConfig:
    defaults = InversionConfig()
    return InversionConfig(
        iterations=int(settings.get("iterations", flags.get("iterations"), defaults.iterations)),
        learning_rate=float(settings.get("learning_rate", flags.get("learning_rate"), defaults.learning_rate)),
        weight_decay=float(settings.get("weight_decay", flags.get("weight_decay"), defaults.weight_decay)),
        lambda_cos=float(settings.get("lambda_cos", flags.get("lambda_cos"), defaults.lambda_cos)),
        lambda_reg=float(settings.get("lambda_reg", flags.get("lambda_reg"), defaults.lambda_reg)),
        ema_decay=float(settings.get("ema_decay", flags.get("ema_decay"), defaults.ema_decay)),
        k_concepts=int(settings.get("k_concepts", flags.get("k_concepts"), defaults.k_concepts)),
        seed=int(settings.get("seed", flags.get("seed"), defaults.seed)),
    )


@main.command("invert")
@click.option("--backbone", "backbone_dir", type=str, default=None)
@click.option("--images", "images_path", type=str, default=None, help="image directory or JSON manifest")
@click.option("--vocab", "vocab_path", type=str, default=None)
@click.option("--bank", "bank_path", type=str, default=None)
@click.option("--out", "out_path", type=str, required=True)
@click.option("--iterations", type=int, default=None, help="[350]")
@click.option("--learning-rate", type=float, default=None, help="[2e-2]")
@click.option("--weight-decay", type=float, default=None, help="[0.01]")
@click.option("--lambda-cos", type=float, default=None, help="[1.0]")
@click.option("--lambda-reg", type=float, default=None, help="[0.5]")
@click.option("--ema-decay", type=float, default=None, help="[0.99]")
@click.option("--k-concepts", type=int, default=None, help="[15]")
@click.option("--seed", type=int, default=None, help="[0]")
@click.option("--workers", type=int, default=None, help="[1]")
@click.option("--resume", is_flag=True, default=False, help="skip ids already in the output token set")
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_invert(backbone_dir, images_path, vocab_path, bank_path, out_path, resume, config_path, workers, **flags):
    """Optimize a pseudo token for every image."""
    settings = Settings(config_path)
    backbone = load_backbone(_require_path(settings.get("backbone", backbone_dir, None), "backbone"))
    images = _load_images_arg(settings.get("images", images_path, None))
    vocab = load_vocabulary(_require_path(settings.get("vocab", vocab_path, None), "vocab"))
    bank = load_phrase_bank(_require_path(settings.get("bank", bank_path, None), "bank"), vocab)
    config = _inversion_config(settings, **flags)
    workers = int(settings.get("workers", workers, 1))

    existing = None
    skip = ()
    out = Path(out_path)
    if resume and out.exists():
        existing = PseudoTokenSet.load(out)
        skip = tuple(i for i in existing.ids() if i in images)
        logger.info("resume: %d of %d images already inverted", len(skip), len(images))

    tokens, failures = invert_batch(images, backbone, vocab, bank, config, workers=workers, skip_ids=skip)
    if existing is not None:
        for image_id in skip:
            tokens.add(existing[image_id])
    for image_id, reason in failures.items():
        logger.warning("failed %s: %s", image_id, reason)
    if not tokens.ids():
        raise TicirError("no images were inverted successfully")
    tokens.save(out)
    logger.info("wrote %d tokens to %s (%d failures)", len(tokens), out, len(failures))


@main.command("train-inverter")
@click.option("--backbone", "backbone_dir", type=str, default=None)
@click.option("--images", "images_path", type=str, default=None, help="encode features from these images")
@click.option("--features", "features_path", type=str, default=None, help="or load a precomputed feature store")
@click.option("--tokens", "tokens_path", type=str, default=None)
@click.option("--vocab", "vocab_path", type=str, default=None)
@click.option("--bank", "bank_path", type=str, default=None)
@click.option("--out", "out_path", type=str, required=True)
@click.option("--log", "log_path", type=str, default=None, help="JSON-lines training log")
@click.option("--features-out", type=str, default=None, help="also persist computed features here")
@click.option("--epochs", type=int, default=None, help="[100]")
@click.option("--learning-rate", type=float, default=None, help="[1e-4]")
@click.option("--batch-size", type=int, default=None, help="[256]")
@click.option("--temperature", type=float, default=None, help="[0.25]")
@click.option("--lambda-distill", type=float, default=None, help="[1.0]")
@click.option("--lambda-reg", type=float, default=None, help="[0.75]")
@click.option("--weight-decay", type=float, default=None, help="[0.01]")
@click.option("--k-concepts", type=int, default=None, help="[150]")
@click.option("--dropout", type=float, default=None, help="[0.5]")
@click.option("--seed", type=int, default=None, help="[0]")
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_train_inverter(backbone_dir, images_path, features_path, tokens_path, vocab_path, bank_path,
                       out_path, log_path, features_out, config_path, **flags):
    """Distill an optimized token set into the feed-forward inversion network."""
    settings = Settings(config_path)
    backbone = load_backbone(_require_path(settings.get("backbone", backbone_dir, None), "backbone"))
    defaults = DistillConfig()
    config = DistillConfig(
        epochs=int(settings.get("epochs", flags.get("epochs"), defaults.epochs)),
        learning_rate=float(settings.get("learning_rate", flags.get("learning_rate"), defaults.learning_rate)),
        batch_size=int(settings.get("batch_size", flags.get("batch_size"), defaults.batch_size)),
        temperature=float(settings.get("temperature", flags.get("temperature"), defaults.temperature)),
        lambda_distill=float(settings.get("lambda_distill", flags.get("lambda_distill"), defaults.lambda_distill)),
        lambda_reg=float(settings.get("lambda_reg", flags.get("lambda_reg"), defaults.lambda_reg)),
        weight_decay=float(settings.get("weight_decay", flags.get("weight_decay"), defaults.weight_decay)),
        k_concepts=int(settings.get("k_concepts", flags.get("k_concepts"), defaults.k_concepts)),
        dropout=float(settings.get("dropout", flags.get("dropout"), defaults.dropout)),
        seed=int(settings.get("seed", flags.get("seed"), defaults.seed)),
    )

    features_path = settings.get("features", features_path, None)
    images_path = settings.get("images", images_path, None)
    if (features_path is None) == (images_path is None):
        raise ConfigError("exactly one of --features or --images is required")
    if features_path is not None:
        ids, matrix, _ = load_feature_store(_require_path(features_path, "features"))
    else:
        images = _load_images_arg(images_path)
        ids = list(images)
        matrix = np.stack([backbone.encode_image(path) for path in images.values()])
        if features_out:
            save_feature_store(features_out, ids, matrix, normalized=False)

    tokens = PseudoTokenSet.load(_require_path(settings.get("tokens", tokens_path, None), "tokens"))
    vocab = bank = None
    if config.lambda_reg > 0:
        vocab_path = settings.get("vocab", vocab_path, None)
        bank_path = settings.get("bank", bank_path, None)
        if vocab_path is None or bank_path is None:
            raise ConfigError("--vocab and --bank are required when lambda_reg > 0")
        vocab = load_vocabulary(_require_path(vocab_path, "vocab"))
        bank = load_phrase_bank(_require_path(bank_path, "bank"), vocab)

    net, log = train_inversion_network(ids, matrix, tokens, vocab, bank, config, backbone)
    save_checkpoint(net, out_path, config_digest=config.digest())
    if log_path:
        write_training_log(log, log_path)
    logger.info("trained %d epochs on %d samples -> %s", config.epochs, len(ids), out_path)


@main.command("build-index")
@click.option("--backbone", "backbone_dir", type=str, default=None)
@click.option("--images", "images_path", type=str, default=None)
@click.option("--out", "out_path", type=str, required=True)
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_build_index(backbone_dir, images_path, out_path, config_path):
    """Encode an image collection into a unit-norm retrieval index."""
    from .retrieval import build_index

    settings = Settings(config_path)
    backbone = load_backbone(_require_path(settings.get("backbone", backbone_dir, None), "backbone"))
    images = _load_images_arg(settings.get("images", images_path, None))
    index = build_index(images, backbone)
    index.save(out_path)
    logger.info("indexed %d images -> %s", len(index), out_path)


@main.command("retrieve")
@click.option("--backbone", "backbone_dir", type=str, default=None)
@click.option("--index", "index_path", type=str, default=None)
@click.option("--queries", "queries_path", type=str, default=None)
@click.option("--mode", type=str, default=None,
              help="inversion | text_only | image_only | image_plus_text | captioning")
@click.option("--checkpoint", "checkpoint_path", type=str, default=None, help="inversion network for pseudo tokens")
@click.option("--tokens", "tokens_path", type=str, default=None, help="precomputed pseudo-token set")
@click.option("--images", "images_path", type=str, default=None, help="reference images (inversion via checkpoint)")
@click.option("--captioner-output", type=str, default=None, help="JSON {reference_id: generated caption}")
@click.option("-k", "--k", type=int, default=None, help="[50]")
@click.option("--exclude-reference", is_flag=True, default=False)
@click.option("--out", "out_path", type=str, required=True)
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_retrieve(backbone_dir, index_path, queries_path, mode, checkpoint_path, tokens_path,
                 images_path, captioner_output, k, exclude_reference, out_path, config_path):
    """Compose query features and rank the index by cosine similarity."""
    settings = Settings(config_path)
    backbone = load_backbone(_require_path(settings.get("backbone", backbone_dir, None), "backbone"))
    index = EmbeddingIndex.load(_require_path(settings.get("index", index_path, None), "index"))
    queries_file = _require_path(settings.get("queries", queries_path, None), "queries")
    mode = settings.get("mode", mode, "inversion")
    k = int(settings.get("k", k, 50))

    try:
        raw_queries = json.loads(queries_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"queries file {queries_file} is not valid JSON: {exc}") from exc
    if not isinstance(raw_queries, list) or not raw_queries:
        raise ConfigError("queries file must hold a nonempty JSON list")

    specs = []
    for i, raw in enumerate(raw_queries):
        try:
            specs.append(QuerySpec(
                mode=raw.get("mode", mode),
                query_id=str(raw.get("query_id", f"q{i}")),
                reference_id=raw.get("reference_id"),
                captions=tuple(raw.get("captions", ())),
                shared_concept=raw.get("shared_concept"),
            ))
        except TicirError as exc:
            raise ConfigError(f"query {i}: {exc}") from exc

    if not 1 <= k <= len(index):
        raise ConfigError(f"k={k} outside 1..{len(index)}")

    net = token_set = images = captions_by_ref = None
    if any(s.mode == "inversion" for s in specs):
        checkpoint_path = settings.get("checkpoint", checkpoint_path, None)
        tokens_path = settings.get("tokens", tokens_path, None)
        if (checkpoint_path is None) == (tokens_path is None):
            raise ConfigError("inversion mode needs exactly one of --checkpoint or --tokens")
        if checkpoint_path is not None:
            net, _ = load_checkpoint(_require_path(checkpoint_path, "checkpoint"))
            images = _load_images_arg(settings.get("images", images_path, None))
        else:
            token_set = PseudoTokenSet.load(_require_path(tokens_path, "tokens"))
    if any(s.mode == "captioning" for s in specs):
        captioner_file = settings.get("captioner_output", captioner_output, None)
        if captioner_file is None:
            raise ConfigError("captioning mode requires --captioner-output (offline captioner results)")
        captions_by_ref = json.loads(_require_path(captioner_file, "captioner-output").read_text(encoding="utf-8"))

    rankings = {}
    for spec in specs:
        if spec.mode == "inversion":
            if token_set is not None:
                if spec.reference_id not in token_set:
                    raise TicirError(f"no pseudo token for reference {spec.reference_id!r}")
                pseudo = token_set[spec.reference_id].values
            else:
                if spec.reference_id not in images:
                    raise TicirError(f"no image available for reference {spec.reference_id!r}")
                pseudo = net.predict(backbone.encode_image(images[spec.reference_id]))
            query = compose_inversion_query(spec, pseudo, backbone)
        else:
            captioner = (lambda ref: captions_by_ref[ref]) if captions_by_ref is not None else None
            query = compose_baseline_query(spec, backbone, index, captioner=captioner)
        exclude = {spec.reference_id} if exclude_reference and spec.reference_id else None
        effective_k = min(k, len(index) - (1 if exclude and spec.reference_id in index else 0))
        rankings[spec.query_id] = [[image_id, score] for image_id, score in
                                   search(query, index, k=effective_k, exclude=exclude)]

    payload = {"mode": mode, "k": k, "rankings": rankings}
    Path(out_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote rankings for %d queries to %s", len(rankings), out_path)


@main.command("evaluate")
@click.option("--dataset", "dataset_path", type=str, default=None)
@click.option("--format", "dataset_format", type=str, default=None, help="circo | cirr | fashioniq")
@click.option("--rankings", "rankings_path", type=str, default=None)
@click.option("--plan", type=str, default=None, help="defaults to the dataset format")
@click.option("--out", "out_path", type=str, required=True)
@click.option("--csv", "csv_path", type=str, default=None)
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_evaluate(dataset_path, dataset_format, rankings_path, plan, out_path, csv_path, config_path):
    """Score rankings against an annotation file."""
    settings = Settings(config_path)
    dataset_format = settings.get("format", dataset_format, None)
    if dataset_format not in ("circo", "cirr", "fashioniq"):
        raise ConfigError(f"--format must be circo, cirr or fashioniq, got {dataset_format!r}")
    dataset = load_dataset(_require_path(settings.get("dataset", dataset_path, None), "dataset"), dataset_format)
    rankings_file = _require_path(settings.get("rankings", rankings_path, None), "rankings")
    payload = json.loads(rankings_file.read_text(encoding="utf-8"))
    rankings = payload.get("rankings", payload)
    rankings = {qid: [entry[0] if isinstance(entry, list) else entry for entry in ranked]
                for qid, ranked in rankings.items()}

    report = evaluate(dataset, rankings, plan=settings.get("plan", plan, dataset_format))
    Path(out_path).write_text(report.to_json() + "\n", encoding="utf-8")
    if csv_path:
        Path(csv_path).write_text(report.to_csv(), encoding="utf-8")
    logger.info("evaluated %d queries (%s plan) -> %s", report.query_count, report.plan, out_path)


def build_service(backbone_dir, images_path, index_path, checkpoint_path=None, seed=0, data_dir=None) -> AnnotationService:
    """Assemble the annotation service from CLI-style path arguments."""
    backbone = load_backbone(_require_path(backbone_dir, "backbone"))
    images = _load_images_arg(images_path)
    index = EmbeddingIndex.load(_require_path(index_path, "index"))
    missing = [i for i in index.ids if i not in images]
    if missing:
        raise ConfigError(f"index ids missing from the image collection: {missing[:5]}")
    net = None
    if checkpoint_path is not None:
        net, _ = load_checkpoint(_require_path(checkpoint_path, "checkpoint"))
    raw = {image_id: backbone.encode_image(images[image_id]) for image_id in index.ids}
    return AnnotationService(backbone, index, raw_features=raw,
                             image_paths=images, net=net, seed=seed, data_dir=data_dir)


@main.command("serve")
@click.option("--backbone", "backbone_dir", type=str, default=None)
@click.option("--images", "images_path", type=str, default=None)
@click.option("--index", "index_path", type=str, default=None)
@click.option("--checkpoint", "checkpoint_path", type=str, default=None)
@click.option("--host", type=str, default=None, help="[127.0.0.1]")
@click.option("--port", type=int, default=None, help="[8008]")
@click.option("--data-dir", type=str, default=None, help="event log and export directory")
@click.option("--seed", type=int, default=None, help="[0]")
@click.option("--config", "config_path", type=str, default=None)
@_guarded
def cmd_serve(backbone_dir, images_path, index_path, checkpoint_path, host, port, data_dir, seed, config_path):
    """Run the annotation service."""
    import uvicorn

    settings = Settings(config_path)
    service = build_service(
        settings.get("backbone", backbone_dir, None),
        settings.get("images", images_path, None),
        settings.get("index", index_path, None),
        checkpoint_path=settings.get("checkpoint", checkpoint_path, None),
        seed=int(settings.get("seed", seed, 0)),
        data_dir=settings.get("data_dir", data_dir, None),
    )
    app = create_app(service)
    uvicorn.run(app, host=settings.get("host", host, "127.0.0.1"), port=int(settings.get("port", port, 8008)),
                log_level="info")


if __name__ == "__main__":
    main()
