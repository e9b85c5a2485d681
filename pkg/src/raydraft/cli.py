"""Command-line lifecycle: prepare, train, interpret, evaluate, serve.

Every artifact-producing command embeds a provenance block (resolved
configuration, seeds, model hashes). Exit codes: 0 success, 1 user error,
2 internal error.
"""

from __future__ import annotations

import json
import shutil
import sys
import traceback
from collections import Counter
from pathlib import Path

import click

from . import __version__
from .captioner import (
    DecoderConfig,
    DecoderRegistry,
    EncoderConfig,
    abnormal_role,
    build_encoder,
    encode,
    load_encoder,
    normality_role,
    save_encoder,
    train_decoder,
)
from .classifier import (
    ClassifierConfig,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    write_training_log,
)
from .config import UserError, load_config_file, provenance_block, resolve
from .corpus import (
    DEFAULT_DISEASES,
    CorpusError,
    SplitSpec,
    Vocabulary,
    build_vocabulary,
    filter_studies,
    preprocess_report,
    read_manifest,
    split_dataset,
    write_manifest,
)
from .localization import crop_roi, extract_bbox, grad_cam
from .pipeline import InterpretConfig, evaluate_pipeline, interpret, load_bundle, load_study_image


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise UserError(f"expected three comma-separated ratios, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise UserError(f"ratios must be numbers: {text!r}") from exc


def _load_disease_config(path: str | None):
    if path is None:
        return list(DEFAULT_DISEASES), None
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return list(doc["diseases"]), doc.get("synonyms")


@click.group()
@click.version_option(version=__version__, prog_name="raydraft")
def cli():
    """Chest X-ray interpretation toolkit."""


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ratios", default="0.7,0.1,0.2", show_default=True)
@click.option("--diseases", "diseases_file", type=click.Path(exists=True), default=None,
              help="JSON file with a diseases list and optional synonym table.")
def prepare(manifest, out_dir, seed, ratios, diseases_file):
    """Filter studies, split patient-disjoint, and build the vocabulary."""
    diseases, synonyms = _load_disease_config(diseases_file)
    studies = read_manifest(manifest)
    kept = filter_studies(studies, diseases, synonyms)
    if not kept:
        raise UserError("no study maps to the configured diseases or to normal")
    spec = SplitSpec(ratios=_parse_ratios(ratios), seed=seed)
    train, val, test = split_dataset(kept, spec)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_manifest(out / f"{name}.jsonl", part)

    train_reports = [preprocess_report(s.impression, s.findings) for s in train]
    vocab = build_vocabulary(train_reports)
    vocab.save(out / "vocab.json")

    counts = Counter()
    for study in train:
        for disease, flag in zip(diseases, study.labels):
            counts[disease] += int(flag)
    summary = {
        "sizes": {"train": len(train), "val": len(val), "test": len(test)},
        "train_disease_counts": dict(counts),
        "diseases": diseases,
        "vocab_hash": vocab.sha256(),
        "provenance": provenance_block(
            {"manifest": str(manifest), "ratios": list(spec.ratios), "seed": seed},
            seed=seed,
        ),
    }
    (out / "prepare.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    click.echo(f"prepared {len(kept)} studies -> {out} (train/val/test = "
               f"{len(train)}/{len(val)}/{len(test)})")


def _resolved_training_settings(config_file, **flags):
    file_values = load_config_file(config_file) if config_file else {}
    settings = {
        "seed": resolve("seed", flags.get("seed"), file_values, 0, int),
        "epochs": resolve("epochs", flags.get("epochs"), file_values, 100, int),
        "lr": resolve("lr", flags.get("lr"), file_values, 1e-3, float),
        "batch_size": resolve("batch_size", flags.get("batch_size"), file_values, 16, int),
        "patience": resolve("patience", flags.get("patience"), file_values, 20, int),
        "backbone": resolve("backbone", flags.get("backbone"), file_values, "densenet121"),
        "input_size": resolve("input_size", flags.get("input_size"), file_values, 224, int),
        "feature_channels": resolve("feature_channels", flags.get("feature_channels"), file_values, 32, int),
        "encoder": resolve("encoder", flags.get("encoder"), file_values, "resnet101"),
        "encoder_dim": resolve("encoder_dim", flags.get("encoder_dim"), file_values, 2048, int),
        "encoder_spatial": resolve("encoder_spatial", flags.get("encoder_spatial"), file_values, 14, int),
        "hidden_dim": resolve("hidden_dim", flags.get("hidden_dim"), file_values, 512, int),
        "embed_dim": resolve("embed_dim", flags.get("embed_dim"), file_values, 512, int),
        "attention_dim": resolve("attention_dim", flags.get("attention_dim"), file_values, 512, int),
        "max_len": resolve("max_len", flags.get("max_len"), file_values, 60, int),
        "freeze_backbone": resolve("freeze_backbone", flags.get("freeze_backbone"), file_values, False,
                                   lambda v: str(v).lower() in ("1", "true", "yes")),
    }
    return settings


def _valid_roles():
    roles = ["normal", "shared"]
    for disease in DEFAULT_DISEASES:
        roles += [abnormal_role(disease), normality_role(disease)]
    return roles


def _studies_for_role(role: str, studies, diseases):
    if role == "normal":
        return [s for s in studies if not any(s.labels)]
    if role == "shared":
        return [s for s in studies if any(s.labels)]
    disease = role.rsplit("-", 1)[0]
    m = diseases.index(disease)
    return [s for s in studies if s.labels[m] == 1]


def _decoder_inputs(role, studies, encoder, models_dir, settings):
    """Region features per study; abnormal roles train on classifier crops
    when a classifier checkpoint is available."""
    use_crops = role.endswith("-abnormal")
    clf = None
    clf_path = Path(models_dir) / "classifier.pt"
    if use_crops and clf_path.exists():
        clf, _ = load_checkpoint(clf_path)
    elif use_crops:
        click.echo("warning: no classifier checkpoint; training abnormal decoder on originals", err=True)
    disease = role.rsplit("-", 1)[0] if use_crops else None

    pairs = []
    for study in studies:
        image = load_study_image(study)
        if clf is not None:
            m = list(DEFAULT_DISEASES).index(disease)
            heat = grad_cam(clf, image, m, upsample_to=image.shape)
            box = extract_bbox(heat)
            if box is not None:
                image = crop_roi(image, box, output_size=encoder.config.input_size)
        feats = encode(encoder, image)
        pairs.append((feats, preprocess_report(study.impression, study.findings)))
    return pairs


@cli.command()
@click.option("--component", required=True,
              help="'classifier' or 'decoder:<role>' (roles: normal, shared, <Disease>-abnormal, <Disease>-normality).")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory produced by 'prepare'.")
@click.option("--models", "models_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--backbone", default=None)
@click.option("--input-size", type=int, default=None)
@click.option("--feature-channels", type=int, default=None)
@click.option("--encoder", default=None)
@click.option("--encoder-dim", type=int, default=None)
@click.option("--encoder-spatial", type=int, default=None)
@click.option("--hidden-dim", type=int, default=None)
@click.option("--embed-dim", type=int, default=None)
@click.option("--attention-dim", type=int, default=None)
@click.option("--max-len", type=int, default=None)
@click.option("--freeze-backbone", is_flag=True, default=None,
              help="Train only the final classifier layer (no-fine-tune mode).")
def train(component, data_dir, models_dir, config_file, **flags):
    """Train the classifier or one decoder role on a prepared dataset."""
    settings = _resolved_training_settings(config_file, **flags)
    data = Path(data_dir)
    models = Path(models_dir)
    models.mkdir(parents=True, exist_ok=True)

    vocab_path = data / "vocab.json"
    if not vocab_path.exists():
        raise UserError(f"{data} is not a prepared dataset (missing vocab.json)")
    vocab = Vocabulary.load(vocab_path)
    if not (models / "vocab.json").exists():
        shutil.copy(vocab_path, models / "vocab.json")
    elif Vocabulary.load(models / "vocab.json").sha256() != vocab.sha256():
        raise UserError("models directory already holds a different vocabulary")

    prep = json.loads((data / "prepare.json").read_text(encoding="utf-8"))
    diseases = prep["diseases"]
    train_studies = filter_studies(read_manifest(data / "train.jsonl"), diseases)
    val_studies = filter_studies(read_manifest(data / "val.jsonl"), diseases)

    if component == "classifier":
        cfg = ClassifierConfig(
            backbone=settings["backbone"], input_size=settings["input_size"],
            feature_channels=settings["feature_channels"], num_classes=len(diseases),
            lr=settings["lr"], batch_size=settings["batch_size"],
            patience=settings["patience"], max_epochs=settings["epochs"],
            freeze_backbone=settings["freeze_backbone"], seed=settings["seed"],
        )
        train_set = [(load_study_image(s), s.labels) for s in train_studies]
        val_set = [(load_study_image(s), s.labels) for s in val_studies] or train_set
        model, log = train_classifier(train_set, val_set, cfg)
        save_checkpoint(
            models / "classifier.pt", model, diseases, vocab.sha256(),
            extra={"provenance": provenance_block(settings, seed=settings["seed"])},
        )
        write_training_log(models / "classifier_log.jsonl", log)
        click.echo(f"classifier -> {models / 'classifier.pt'} ({len(log)} epochs)")
        return

    if not component.startswith("decoder:"):
        raise UserError(f"unknown component {component!r}; use 'classifier' or 'decoder:<role>'")
    role = component.split(":", 1)[1]
    if role not in _valid_roles():
        raise UserError(f"unknown decoder role {role!r}; valid roles: {', '.join(_valid_roles())}")

    encoder_path = models / "encoder.pt"
    if encoder_path.exists():
        encoder = load_encoder(encoder_path)
    else:
        encoder = build_encoder(EncoderConfig(
            kind=settings["encoder"], feature_dim=settings["encoder_dim"],
            spatial=settings["encoder_spatial"], input_size=settings["input_size"],
            seed=settings["seed"],
        ))
        save_encoder(encoder_path, encoder)

    role_train = _studies_for_role(role, train_studies, diseases)
    if not role_train:
        raise UserError(f"no training study matches decoder role {role!r}")
    role_val = _studies_for_role(role, val_studies, diseases)

    pairs = _decoder_inputs(role, role_train, encoder, models, settings)
    val_pairs = _decoder_inputs(role, role_val, encoder, models, settings) or None
    cfg = DecoderConfig(
        vocab_size=len(vocab), feature_dim=encoder.config.feature_dim,
        embed_dim=settings["embed_dim"], hidden_dim=settings["hidden_dim"],
        attention_dim=settings["attention_dim"], max_len=settings["max_len"],
        lr=settings["lr"], batch_size=settings["batch_size"],
        patience=settings["patience"], max_epochs=settings["epochs"], seed=settings["seed"],
    )
    decoder, log = train_decoder(pairs, vocab, cfg, val_pairs=val_pairs)
    registry = DecoderRegistry(models / "decoders")
    registry.save(role, decoder, vocab.sha256())
    registry.set_train_counts(prep["train_disease_counts"])
    write_training_log(models / f"decoder_{role}_log.jsonl", log)
    click.echo(f"decoder:{role} -> {models / 'decoders'} ({len(log)} epochs)")


@cli.command("interpret")
@click.argument("image_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", type=float, default=0.8, show_default=True)
@click.option("--mode", type=click.Choice(["greedy", "sample"]), default="greedy", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def interpret_cmd(image_path, models_dir, out_dir, threshold, mode, seed):
    """Interpret one X-ray image and write the result artifacts."""
    if not 0.0 < threshold < 1.0:
        raise UserError(f"threshold must lie strictly between 0 and 1, got {threshold}")
    bundle = load_bundle(models_dir)
    from .pipeline import _load_image

    image = _load_image(image_path)
    cfg = InterpretConfig(threshold=threshold, mode=mode, seed=seed)
    result = interpret(image, bundle, cfg)
    path = result.save(out_dir, image=image)
    click.echo(f"{'normal' if result.is_normal else ', '.join(result.present)} -> {path}")


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path())
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False))
@click.option("--threshold", type=float, default=0.8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def evaluate(manifest, models_dir, out_file, threshold, seed):
    """Score generated reports against references over a labeled manifest."""
    bundle = load_bundle(models_dir)
    studies = filter_studies(read_manifest(manifest), bundle.diseases)
    if not studies:
        raise UserError("empty test manifest after filtering")
    cfg = InterpretConfig(threshold=threshold, seed=seed)
    evaluation = evaluate_pipeline(studies, bundle, cfg)
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(evaluation, indent=1), encoding="utf-8")
    click.echo(f"bleu-1 {evaluation['bleu'][0]:.3f} rouge-l {evaluation['rouge_l']:.3f} "
               f"cider {evaluation['cider']:.3f} -> {out}")


@cli.command()
@click.option("--port", type=int, default=None)
@click.option("--host", default=None)
@click.option("--models", "models_dir", type=click.Path(), default=None)
@click.option("--storage", "storage_dir", type=click.Path(file_okay=False), default=None)
@click.option("--threshold", type=float, default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
def serve(port, host, models_dir, storage_dir, threshold, config_file):
    """Run the HTTP review service."""
    import uvicorn

    from .service.app import ServiceSettings, create_app

    file_values = load_config_file(config_file) if config_file else {}
    settings = ServiceSettings(
        models_dir=resolve("models", models_dir, file_values, None),
        storage_dir=resolve("storage", storage_dir, file_values, "./storage"),
        default_threshold=resolve("threshold", threshold, file_values, 0.8, float),
    )
    if settings.models_dir is None:
        raise UserError("no models directory configured (flag --models, env RAYDRAFT_MODELS, or config file)")
    app = create_app(settings)
    try:
        uvicorn.run(
            app,
            host=resolve("host", host, file_values, "127.0.0.1"),
            port=resolve("port", port, file_values, 8000, int),
        )
    except SystemExit as exc:
        if exc.code:
            raise UserError(f"server failed to start (exit {exc.code})") from exc


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except (UserError, CorpusError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
