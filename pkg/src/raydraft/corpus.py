"""Dataset ingestion: report normalization, vocabulary, disease labels, splits.

A dataset is a JSON-lines manifest (one study per line, one study per
patient) plus a directory of PNG images. Reports are normalized to
lowercase alphanumeric tokens with sentence boundaries encoded as a
reserved separator token; tokens seen only once in the training split
encode to the unknown token.
"""

from __future__ import annotations

import json
import hashlib
import os
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class CorpusError(ValueError):
    """Raised for unusable datasets or malformed manifests."""


PAD = "<pad>"
UNK = "<unk>"
SEP = "<sep>"
STOP = "<stop>"
RESERVED = (PAD, UNK, SEP, STOP)

DEFAULT_DISEASES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
)

# Substring patterns (lowercase) matched against MeSH terms. Kept as data so
# deployments can audit and extend the label mapping without code changes.
DEFAULT_SYNONYMS: dict[str, tuple[str, ...]] = {
    "Atelectasis": ("atelectasis", "atelectases", "pulmonary atelectasis"),
    "Cardiomegaly": ("cardiomegaly", "enlarged heart", "heart enlargement"),
    "Effusion": ("effusion", "pleural effusion", "hydrothorax"),
    "Infiltration": ("infiltrate", "infiltration"),
    "Mass": ("mass", "neoplasm", "tumor"),
    "Nodule": ("nodule", "nodular", "granuloma"),
    "Pneumonia": ("pneumonia", "pneumonitis"),
    "Pneumothorax": ("pneumothorax", "pneumothoraces"),
}

NORMAL_MARKERS = ("normal", "no indexing")

_SENTENCE_SPLIT = re.compile(r"[.!?]+(?:\s+|$)")


@dataclass
class Study:
    """One patient's frontal X-ray with its report text and labels."""

    patient_id: str
    image_path: str
    impression: str = ""
    findings: str = ""
    mesh_terms: list[str] = field(default_factory=list)
    labels: list[int] | None = None

    def to_manifest_record(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "image": self.image_path,
            "impression": self.impression,
            "findings": self.findings,
            "mesh": list(self.mesh_terms),
        }


@dataclass
class TokenizedReport:
    """Ordered sentences of lowercase alphanumeric tokens."""

    sentences: list[list[str]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.sentences)

    def flat_tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise CorpusError("split ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise CorpusError(f"split ratios must sum to 1, got {sum(self.ratios)}")


def _tokenize_sentence(sentence: str) -> list[str]:
    tokens = []
    for raw in sentence.split():
        tok = "".join(ch for ch in raw.lower() if ch.isalnum())
        if tok:
            tokens.append(tok)
    return tokens


def preprocess_report(impression: str, findings: str) -> TokenizedReport:
    """Normalize raw report text: impression sentences then findings sentences.

    Lowercases everything, keeps only alphanumeric characters inside tokens,
    drops tokens left empty, and treats '.', '!', '?' followed by whitespace
    or end-of-text as sentence boundaries.
    """
    sentences = []
    for section in (impression or "", findings or ""):
        for chunk in _SENTENCE_SPLIT.split(section):
            tokens = _tokenize_sentence(chunk)
            if tokens:
                sentences.append(tokens)
    return TokenizedReport(sentences=sentences)


def detokenize(report: TokenizedReport) -> str:
    """Render a tokenized report back to plain text, one period per sentence."""
    return " ".join(" ".join(sent) + "." for sent in report.sentences)


class Vocabulary:
    """Token index built from a training corpus.

    Reserved tokens occupy fixed low indices; every other index maps to a
    token that occurred at least twice in training. Single-occurrence
    training tokens (and anything unseen) encode to the unknown token.
    """

    def __init__(self, tokens: Sequence[str]):
        self.index_to_token: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_index: dict[str, int] = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    pad_index = 0
    unk_index = 1
    sep_index = 2
    stop_index = 3

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_index.get(t, self.unk_index) for t in tokens]

    def encode_report(self, report: TokenizedReport) -> list[int]:
        """Flatten to indices with separators between sentences, stop at end."""
        out: list[int] = []
        for i, sent in enumerate(report.sentences):
            if i > 0:
                out.append(self.sep_index)
            out.extend(self.encode_tokens(sent))
        out.append(self.stop_index)
        return out

    def decode(self, indices: Iterable[int]) -> TokenizedReport:
        sentences: list[list[str]] = [[]]
        for idx in indices:
            if idx == self.stop_index:
                break
            if idx == self.sep_index:
                sentences.append([])
                continue
            if idx == self.pad_index:
                continue
            sentences[-1].append(self.index_to_token[idx])
        return TokenizedReport(sentences=[s for s in sentences if s])

    def sha256(self) -> str:
        payload = json.dumps(self.index_to_token, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.index_to_token}, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))["tokens"]
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise CorpusError(f"vocabulary file {path} lacks the reserved token prefix")
        return cls(tokens[len(RESERVED) :])


def build_vocabulary(train_reports: Sequence[TokenizedReport]) -> Vocabulary:
    """Index every training token that occurs at least twice.

    An empty list of reports is an unusable corpus; reports that are all
    empty still yield the reserved-only vocabulary.
    """
    if not train_reports:
        raise CorpusError("cannot build a vocabulary from an empty training set")
    counts: Counter[str] = Counter()
    for report in train_reports:
        counts.update(report.flat_tokens())
    kept = sorted(t for t, c in counts.items() if c >= 2)
    return Vocabulary(kept)


def _mesh_matches(mesh_terms: Sequence[str], patterns: Sequence[str]) -> bool:
    lowered = [t.lower() for t in mesh_terms]
    return any(p in term for term in lowered for p in patterns)


def extract_labels(
    mesh_terms: Sequence[str],
    diseases: Sequence[str] = DEFAULT_DISEASES,
    synonyms: dict[str, Sequence[str]] | None = None,
) -> list[int]:
    """Binary label vector from MeSH terms by case-insensitive substring match."""
    table = dict(DEFAULT_SYNONYMS)
    if synonyms:
        table.update({k: tuple(v) for k, v in synonyms.items()})
    labels = []
    for name in diseases:
        if name not in table:
            raise CorpusError(f"unknown disease name in config: {name!r}")
        labels.append(1 if _mesh_matches(mesh_terms, table[name]) else 0)
    return labels


def filter_studies(
    dataset: Sequence[Study],
    diseases: Sequence[str] = DEFAULT_DISEASES,
    synonyms: dict[str, Sequence[str]] | None = None,
) -> list[Study]:
    """Keep studies labeled with a target disease or explicitly normal.

    Retained studies get their label vector populated; "normal" studies
    (MeSH contains a normal marker) keep the all-zero vector.
    """
    kept = []
    for study in dataset:
        labels = extract_labels(study.mesh_terms, diseases, synonyms)
        is_normal = _mesh_matches(study.mesh_terms, NORMAL_MARKERS)
        if any(labels) or is_normal:
            study.labels = labels
            kept.append(study)
    return kept


def split_dataset(
    dataset: Sequence[Study], spec: SplitSpec = SplitSpec()
) -> tuple[list[Study], list[Study], list[Study]]:
    """Patient-disjoint train/val/test partition, seed-deterministic.

    Sizes follow the ratios by largest-remainder rounding, so each split is
    within one patient of its exact share.
    """
    by_patient: dict[str, list[Study]] = {}
    for study in dataset:
        by_patient.setdefault(study.patient_id, []).append(study)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise CorpusError(f"need at least 3 patients to split, got {len(patients)}")

    rng = random.Random(spec.seed)
    rng.shuffle(patients)

    n = len(patients)
    exact = [r * n for r in spec.ratios]
    sizes = [int(x) for x in exact]
    remainders = sorted(range(3), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1

    splits: list[list[Study]] = []
    start = 0
    for size in sizes:
        chunk = patients[start : start + size]
        splits.append([s for p in chunk for s in by_patient[p]])
        start += size
    return splits[0], splits[1], splits[2]


def read_manifest(path: str | Path, image_root: str | Path | None = None) -> list[Study]:
    """Parse a JSON-lines manifest; enforces one study per patient."""
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    studies = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            pid = str(record["patient_id"])
            if pid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate patient_id {pid!r} (one study per patient)")
            seen.add(pid)
            studies.append(
                Study(
                    patient_id=pid,
                    image_path=str(root / record["image"]),
                    impression=record.get("impression", ""),
                    findings=record.get("findings", ""),
                    mesh_terms=[str(t) for t in record.get("mesh", [])],
                )
            )
    return studies


def write_manifest(path: str | Path, studies: Sequence[Study]) -> None:
    """Write a manifest with image paths relative to the manifest location."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for study in studies:
            record = study.to_manifest_record()
            record["image"] = os.path.relpath(study.image_path, path.parent)
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
