"""Synthetic desk-scale data and model bundles shared across test modules.

Images are 32x32 grayscale with a bright square marker whose position is
disease-specific, so a tiny classifier can separate them perfectly.
Reports are short templated sentences per disease.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from raydraft.captioner import (
    AttentiveDecoder,
    DecoderConfig,
    DecoderRegistry,
    EncoderConfig,
    abnormal_role,
    build_encoder,
    normality_role,
    save_encoder,
)
from raydraft.classifier import ClassifierConfig, DiseaseClassifier, save_checkpoint
from raydraft.corpus import DEFAULT_DISEASES, Study, build_vocabulary, preprocess_report, write_manifest

IMAGE_SIZE = 32

# one marker slot per disease, (row, col) of an 8x8 bright square
MARKER_SLOTS = {
    "Atelectasis": (0, 0),
    "Cardiomegaly": (0, 12),
    "Effusion": (0, 24),
    "Infiltration": (12, 0),
    "Mass": (12, 24),
    "Nodule": (24, 0),
    "Pneumonia": (24, 12),
    "Pneumothorax": (24, 24),
}

REPORT_TEXTS = {
    None: ("Heart size is normal.", "Lungs are clear without effusion."),
    "Atelectasis": ("Left basilar atelectasis.", "Lung volumes are low."),
    "Cardiomegaly": ("The heart is enlarged.", "Cardiac silhouette is increased."),
    "Effusion": ("Small pleural effusion.", "Blunting of the costophrenic angle."),
    "Infiltration": ("Patchy infiltration noted.", "Airspace opacity in the lung."),
    "Mass": ("A mass is present.", "Large opacity in the lung field."),
    "Nodule": ("A small nodule is seen.", "Rounded density in the lung."),
    "Pneumonia": ("Findings consistent with pneumonia.", "Focal consolidation is present."),
    "Pneumothorax": ("Pneumothorax on the left.", "The lung edge is visible."),
}


def synthetic_image(disease: str | None, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.0, 0.15, size=(IMAGE_SIZE, IMAGE_SIZE))
    if disease is not None:
        r, c = MARKER_SLOTS[disease]
        img[r : r + 8, c : c + 8] = rng.uniform(0.9, 1.0, size=(8, 8))
    return img.astype(np.float32)


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def make_dataset(
    root: Path,
    per_disease: int = 2,
    normals: int = 4,
    diseases=("Cardiomegaly", "Effusion"),
    seed: int = 0,
) -> Path:
    """Images plus a manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    studies = []
    counter = 0

    def add(disease, mesh):
        nonlocal counter
        name = f"im{counter:04d}.png"
        write_png(images / name, synthetic_image(disease, rng))
        impression, findings = REPORT_TEXTS[disease]
        studies.append(
            Study(
                patient_id=f"pat{counter:04d}",
                image_path=str(images / name),
                impression=impression,
                findings=findings,
                mesh_terms=mesh,
            )
        )
        counter += 1

    for disease in diseases:
        for _ in range(per_disease):
            add(disease, [disease])
    for _ in range(normals):
        add(None, ["normal"])

    manifest = root / "manifest.jsonl"
    write_manifest(manifest, studies)
    return manifest


def corpus_vocabulary():
    reports = []
    for disease in list(MARKER_SLOTS) + [None]:
        impression, findings = REPORT_TEXTS[disease]
        reports.append(preprocess_report(impression, findings))
    return build_vocabulary(reports * 2)  # duplicate so every token clears the frequency cut


def build_tiny_bundle(
    root: Path,
    dedicated=("Cardiomegaly",),
    counts: dict | None = None,
    seed: int = 0,
) -> Path:
    """Untrained desk-scale bundle: tiny classifier and encoder, a decoder
    registry with normal/shared plus dedicated pairs for `dedicated`."""
    root.mkdir(parents=True, exist_ok=True)
    vocab = corpus_vocabulary()
    vocab.save(root / "vocab.json")

    clf = DiseaseClassifier(
        ClassifierConfig(
            backbone="tiny", input_size=IMAGE_SIZE, in_channels=1, feature_channels=16,
            num_classes=len(DEFAULT_DISEASES), seed=seed,
        )
    )
    save_checkpoint(root / "classifier.pt", clf, DEFAULT_DISEASES, vocab.sha256())

    encoder = build_encoder(
        EncoderConfig(kind="tiny", feature_dim=32, spatial=4, in_channels=1, input_size=IMAGE_SIZE, seed=seed)
    )
    save_encoder(root / "encoder.pt", encoder)

    registry = DecoderRegistry(root / "decoders")
    decoder_cfg = DecoderConfig(
        vocab_size=len(vocab), feature_dim=32, embed_dim=16, hidden_dim=16,
        attention_dim=16, max_len=12, seed=seed,
    )
    roles = ["normal", "shared"]
    for disease in dedicated:
        roles += [abnormal_role(disease), normality_role(disease)]
    for role in roles:
        registry.save(role, AttentiveDecoder(decoder_cfg), vocab.sha256())
    if counts is None:
        counts = {d: (120 if d in dedicated else 10) for d in DEFAULT_DISEASES}
    registry.set_train_counts(counts)
    return root


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
