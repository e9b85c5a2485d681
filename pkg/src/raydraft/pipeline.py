"""End-to-end interpretation workflow.

classify -> threshold annotation -> per-disease localization and cropping
-> decoder routing -> report assembly with visual-support artifacts. A
normal study takes the single-pass path: one decoder run on the original
image. An abnormal study gets, per annotated disease, a heatmap, a
bounding box and a crop whose decoder produces the abnormality sentences,
while normality sentences come from the original image once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .captioner import (
    ABNORMALITY_SOURCE,
    NORMALITY_SOURCE,
    DecoderRegistry,
    DecoderSelection,
    Report,
    ReportSentence,
    encode,
    generate_report,
    load_encoder,
    select_decoder,
)
from .classifier import ClassifierOutput, annotate, auroc_per_class, classify, load_checkpoint, mean_auroc
from .config import UserError, provenance_block, sha256_file
from .corpus import Study, TokenizedReport, Vocabulary, preprocess_report
from .localization import (
    BoundingBox,
    crop_roi,
    extract_bbox,
    grad_cam,
    render_overlay,
    save_heatmap,
)
from .metrics import score_corpus


@dataclass
class InterpretConfig:
    threshold: float = 0.8
    mode: str = "greedy"
    seed: int = 0
    bbox_fraction: float = 0.9
    bbox_mode: str = "largest"
    crop_padding: float = 0.1
    max_len: int = 60

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold, "mode": self.mode, "seed": self.seed,
            "bbox_fraction": self.bbox_fraction, "bbox_mode": self.bbox_mode,
            "crop_padding": self.crop_padding, "max_len": self.max_len,
        }


class InterpretationBundle(Protocol):
    """Model surface the workflow needs; satisfied by ModelBundle and by
    the stub bundles used in tests."""

    diseases: Sequence[str]

    def score(self, image) -> ClassifierOutput: ...

    def heatmap(self, image, disease_index: int) -> np.ndarray: ...

    def select(self, present: Sequence[str]) -> DecoderSelection: ...

    def sentences(self, role: str, image, config: InterpretConfig) -> list[list[str]]: ...

    def crop_for(self, image, box: BoundingBox | None, config: InterpretConfig) -> np.ndarray: ...

    def model_hashes(self) -> dict[str, str]: ...


class ModelBundle:
    """Artifacts loaded from a models directory:

    classifier.pt, encoder.pt, vocab.json and decoders/ (registry manifest
    plus role checkpoints). Refuses to load when the decoder registry was
    built against a different vocabulary.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise UserError(f"models directory {self.root} does not exist")
        for name in ("classifier.pt", "encoder.pt", "vocab.json"):
            if not (self.root / name).exists():
                raise UserError(f"missing model artifact: {self.root / name}")
        self.classifier, payload = load_checkpoint(self.root / "classifier.pt")
        self.diseases: list[str] = payload["diseases"]
        self.encoder = load_encoder(self.root / "encoder.pt")
        self.vocab = Vocabulary.load(self.root / "vocab.json")
        self.registry = DecoderRegistry(self.root / "decoders")
        bound = self.registry.manifest.get("vocab_hash")
        if bound and bound != self.vocab.sha256():
            raise UserError("decoder registry is bound to a different vocabulary than vocab.json")

    def score(self, image) -> ClassifierOutput:
        return classify(self.classifier, image)

    def heatmap(self, image, disease_index: int) -> np.ndarray:
        img = np.asarray(image)
        return grad_cam(self.classifier, image, disease_index, upsample_to=img.shape[:2])

    def select(self, present: Sequence[str]) -> DecoderSelection:
        return select_decoder(self.registry, list(present))

    def sentences(self, role: str, image, config: InterpretConfig) -> list[list[str]]:
        decoder = self.registry.load(role)
        report = generate_report(
            decoder, encode(self.encoder, image), self.vocab,
            mode=config.mode, max_len=config.max_len, seed=config.seed,
        )
        return report.sentences

    def crop_for(self, image, box: BoundingBox | None, config: InterpretConfig) -> np.ndarray:
        img = np.asarray(image)
        if box is None:
            box = BoundingBox(0, 0, img.shape[0] - 1, img.shape[1] - 1)
        return crop_roi(img, box, padding=config.crop_padding, output_size=self.encoder.config.input_size)

    def model_hashes(self) -> dict[str, str]:
        hashes = {}
        for path in sorted(self.root.rglob("*")):
            if path.is_file() and path.suffix in (".pt", ".json"):
                hashes[str(path.relative_to(self.root))] = sha256_file(path)
        return hashes


def load_bundle(models_dir: str | Path) -> ModelBundle:
    return ModelBundle(models_dir)


@dataclass
class DiseaseFinding:
    """Visual support and generated description for one annotated disease."""

    disease: str
    probability: float
    heatmap: np.ndarray
    bbox: BoundingBox | None
    crop: np.ndarray
    sentences: list[list[str]]
    used_shared_decoder: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "disease": self.disease,
            "probability": self.probability,
            "bbox": self.bbox.to_dict() if self.bbox else None,
            "sentences": [list(s) for s in self.sentences],
            "used_shared_decoder": self.used_shared_decoder,
            "warnings": list(self.warnings),
        }


@dataclass
class InterpretationResult:
    probabilities: dict[str, float]
    present: list[str]  # descending probability
    is_normal: bool
    findings: list[DiseaseFinding]
    report: Report
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "probabilities": self.probabilities,
            "present": list(self.present),
            "is_normal": self.is_normal,
            "findings": [f.to_dict() for f in self.findings],
            "report": self.report.to_dict(),
            "provenance": self.provenance,
        }

    def save(self, out_dir: str | Path, image: np.ndarray | None = None) -> Path:
        """result.json plus overlay/crop/raw-heatmap artifacts per disease."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.to_dict()
        for finding, entry in zip(self.findings, doc["findings"]):
            stem = finding.disease.lower()
            if image is not None:
                overlay = render_overlay(image, finding.heatmap, finding.bbox)
                overlay.save(out / f"heatmap_{stem}.png")
                entry["heatmap_png"] = f"heatmap_{stem}.png"
            save_heatmap(out / f"heatmap_{stem}.npy", finding.heatmap)
            entry["heatmap_npy"] = f"heatmap_{stem}.npy"
            crop = np.clip(np.asarray(finding.crop, dtype=np.float64), 0.0, 1.0)
            Image.fromarray((crop * 255).astype(np.uint8)).save(out / f"crop_{stem}.png")
            entry["crop_png"] = f"crop_{stem}.png"
        path = out / "result.json"
        path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
        return path


def assemble_from_parts(
    parts: Sequence[tuple[str, float, Sequence[list[str]]]],
    normality_sentences: Sequence[list[str]],
) -> Report:
    """Abnormality sentences in descending-probability order, then the
    deduplicated normality sentences (exact token-sequence matches dropped)."""
    sentences: list[ReportSentence] = []
    for disease, _, disease_sentences in sorted(parts, key=lambda p: -p[1]):
        seen_in_disease: set[tuple] = set()
        for tokens in disease_sentences:
            key = tuple(tokens)
            if key in seen_in_disease:
                continue
            seen_in_disease.add(key)
            sentences.append(ReportSentence(list(tokens), ABNORMALITY_SOURCE, disease))
    seen = {tuple(s.tokens) for s in sentences}
    for tokens in normality_sentences:
        key = tuple(tokens)
        if key in seen:
            continue
        seen.add(key)
        sentences.append(ReportSentence(list(tokens), NORMALITY_SOURCE))
    return Report(sentences=sentences)


def assemble_report(
    findings: Sequence[DiseaseFinding], normality_sentences: Sequence[list[str]]
) -> Report:
    return assemble_from_parts(
        [(f.disease, f.probability, f.sentences) for f in findings], normality_sentences
    )


def disease_finding(
    bundle: InterpretationBundle,
    image,
    disease: str,
    probability: float,
    role: str,
    config: InterpretConfig,
    used_shared: bool,
) -> DiseaseFinding:
    """Heatmap, box, crop and abnormality sentences for one disease."""
    warnings: list[str] = []
    index = list(bundle.diseases).index(disease)
    heat = bundle.heatmap(image, index)
    box = extract_bbox(heat, fraction=config.bbox_fraction, mode=config.bbox_mode)
    if box is None:
        warnings.append(f"zero heatmap for {disease}; using the whole image as the crop")
    crop = bundle.crop_for(image, box, config)
    sentences = bundle.sentences(role, crop, config)
    if not sentences:
        warnings.append(f"empty generation for {disease}; emitting the disease name only")
        sentences = [[disease.lower()]]
    return DiseaseFinding(
        disease=disease, probability=probability, heatmap=heat, bbox=box,
        crop=crop, sentences=sentences, used_shared_decoder=used_shared, warnings=warnings,
    )


def interpret(image, bundle: InterpretationBundle, config: InterpretConfig | None = None) -> InterpretationResult:
    config = config or InterpretConfig()
    image = np.asarray(image)
    output = bundle.score(image)
    annotation = annotate(output, config.threshold)
    probabilities = {
        name: float(output.probabilities[m]) for m, name in enumerate(bundle.diseases)
    }
    present = sorted(
        (bundle.diseases[m] for m in annotation.present),
        key=lambda name: -probabilities[name],
    )
    selection = bundle.select(present)

    findings: list[DiseaseFinding] = []
    for disease in present:
        role = selection.abnormal[disease]
        findings.append(
            disease_finding(
                bundle, image, disease, probabilities[disease], role, config,
                used_shared=disease in selection.shared_fallback,
            )
        )
    normality = bundle.sentences(selection.normality, image, config)

    report = assemble_report(findings, normality)
    warnings = [w for f in findings for w in f.warnings]
    provenance = provenance_block(
        config.to_dict(), model_hashes=bundle.model_hashes(), seed=config.seed, warnings=warnings,
    )
    provenance["package_version"] = __version__
    return InterpretationResult(
        probabilities=probabilities,
        present=present,
        is_normal=annotation.is_normal,
        findings=findings,
        report=report,
        provenance=provenance,
    )


def _load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def load_study_image(study: Study) -> np.ndarray:
    return _load_image(study.image_path)


def evaluate_pipeline(
    studies: Sequence[Study], bundle: InterpretationBundle, config: InterpretConfig | None = None
) -> dict:
    """Corpus caption metrics plus per-disease AUROC over a labeled test set."""
    if not studies:
        raise UserError("cannot evaluate on an empty test set")
    config = config or InterpretConfig()
    candidates = []
    references = []
    score_rows = []
    label_rows = []
    for study in studies:
        image = load_study_image(study)
        result = interpret(image, bundle, config)
        candidates.append(
            [tok for sentence in result.report.sentences for tok in sentence.tokens]
        )
        reference: TokenizedReport = preprocess_report(study.impression, study.findings)
        references.append(reference.flat_tokens())
        if study.labels is not None:
            score_rows.append([result.probabilities[d] for d in bundle.diseases])
            label_rows.append(list(study.labels))

    scores = score_corpus(candidates, references)
    evaluation = scores.to_dict()
    if score_rows:
        per_class = auroc_per_class(np.array(score_rows), np.array(label_rows))
        evaluation["auroc"] = {
            name: (None if v is None else float(v)) for name, v in zip(bundle.diseases, per_class)
        }
        evaluation["auroc"]["mean"] = mean_auroc(per_class)
    evaluation["provenance"] = provenance_block(
        config.to_dict(), model_hashes=bundle.model_hashes(), seed=config.seed
    )
    evaluation["provenance"]["package_version"] = __version__
    return evaluation
