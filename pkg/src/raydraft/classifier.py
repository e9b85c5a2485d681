"""Multi-label thoracic disease classification.

A convolutional backbone produces the final feature maps; a global-average
pool plus one linear layer maps them to M per-disease logits. Probabilities
come from an independent sigmoid per class, an image is annotated with
every disease whose probability clears the threshold, and a study with no
annotated disease counts as normal.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import DEFAULT_DISEASES

PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite during training."""


@dataclass
class ClassifierConfig:
    backbone: str = "densenet121"
    input_size: int = 224
    in_channels: int = 1
    feature_channels: int = 32  # tiny backbone only
    num_classes: int = len(DEFAULT_DISEASES)
    threshold: float = 0.8
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 20
    max_epochs: int = 100
    freeze_backbone: bool = False
    normalize_mean: float = 0.5
    normalize_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie strictly between 0 and 1, got {self.threshold}")


@dataclass
class ClassifierOutput:
    """Per-disease logits z and probabilities g = sigmoid(z)."""

    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class DiseaseAnnotation:
    present: set[int] = field(default_factory=set)

    @property
    def is_normal(self) -> bool:
        return not self.present


class _TinyBackbone(nn.Module):
    """Small conv stack for desk-scale runs; final maps are input_size/4."""

    def __init__(self, in_channels: int, feature_channels: int):
        super().__init__()
        mid = max(8, feature_channels // 2)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(mid, feature_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(feature_channels, feature_channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out_channels = feature_channels

    def forward(self, x):
        return self.net(x)


def _densenet_backbone(in_channels: int):
    from torchvision.models import densenet121

    model = densenet121(weights=None)
    if in_channels != 3:
        first = model.features.conv0
        model.features.conv0 = nn.Conv2d(
            in_channels, first.out_channels, kernel_size=first.kernel_size,
            stride=first.stride, padding=first.padding, bias=False,
        )
    backbone = model.features
    backbone.out_channels = model.classifier.in_features
    return backbone


class DiseaseClassifier(nn.Module):
    """Backbone + pooled linear head, split so feature maps stay reachable
    for gradient-based localization."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        if config.backbone == "tiny":
            self.backbone = _TinyBackbone(config.in_channels, config.feature_channels)
        elif config.backbone == "densenet121":
            self.backbone = _densenet_backbone(config.in_channels)
        else:
            raise ValueError(f"unknown backbone {config.backbone!r}")
        self.fc = nn.Linear(self.backbone.out_channels, config.num_classes)
        if config.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Final convolutional feature maps, shape (B, K, H, W)."""
        maps = self.backbone(x)
        if self.config.backbone == "densenet121":
            maps = F.relu(maps)
        return maps

    def head(self, maps: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(maps, 1).flatten(1)
        return self.fc(pooled)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def normalize(self, image: torch.Tensor) -> torch.Tensor:
        return (image - self.config.normalize_mean) / self.config.normalize_std


def prepare_image(image: np.ndarray | torch.Tensor, config: ClassifierConfig) -> torch.Tensor:
    """Validate and shape one image to (C, H, W) float in [0, 1]."""
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] != config.in_channels:
        raise ValueError(
            f"expected image of shape ({config.in_channels}, H, W) or (H, W), got {tuple(t.shape)}"
        )
    if t.shape[1] != config.input_size or t.shape[2] != config.input_size:
        t = F.interpolate(
            t.unsqueeze(0), size=(config.input_size, config.input_size),
            mode="bilinear", align_corners=False,
        ).squeeze(0)
    return t


def classify(model: DiseaseClassifier, image: np.ndarray | torch.Tensor) -> ClassifierOutput:
    """Deterministic inference on one preprocessed image."""
    t = prepare_image(image, model.config).to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        logits = model(model.normalize(t).unsqueeze(0))[0]
    z = logits.detach().cpu().numpy().astype(np.float64)
    return ClassifierOutput(logits=z, probabilities=1.0 / (1.0 + np.exp(-z)))


def bce_loss(output: ClassifierOutput, labels: Sequence[int], eps: float = PROB_EPS) -> float:
    """Summed binary cross-entropy over classes, probabilities clamped away
    from 0 and 1 so the loss stays finite."""
    g = np.clip(np.asarray(output.probabilities, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    if g.shape != y.shape:
        raise ValueError(f"labels shape {y.shape} does not match probabilities {g.shape}")
    return float(-(y * np.log(g) + (1.0 - y) * np.log(1.0 - g)).sum())


def annotate(output: ClassifierOutput, threshold: float = 0.8) -> DiseaseAnnotation:
    """Diseases whose probability strictly exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly between 0 and 1, got {threshold}")
    present = {int(m) for m, g in enumerate(output.probabilities) if g > threshold}
    return DiseaseAnnotation(present=present)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Probability a random positive outscores a random negative, ties
    half-credited. None when the labels are single-class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_per_class(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return [auroc(scores[:, m], labels[:, m]) for m in range(scores.shape[1])]


def mean_auroc(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _batch_loss(model: DiseaseClassifier, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    logits = model(images)
    per_class = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    return per_class.sum(dim=1).mean()


def train_classifier(
    train: Sequence[tuple[np.ndarray, Sequence[int]]],
    val: Sequence[tuple[np.ndarray, Sequence[int]]],
    config: ClassifierConfig,
) -> tuple[DiseaseClassifier, list[dict]]:
    """Adam training with early stopping on mean validation AUROC.

    Stops once validation fails to improve for more than `patience`
    consecutive epochs and restores the best-on-validation weights.
    Returns the model and the per-epoch log.
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    model = DiseaseClassifier(config)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=config.lr
    )

    def stack(dataset):
        images = torch.stack([model.normalize(prepare_image(img, config)) for img, _ in dataset])
        labels = torch.tensor([list(y) for _, y in dataset], dtype=torch.float32)
        return images, labels

    train_x, train_y = stack(train)
    val_x, val_y = stack(val)

    shuffler = random.Random(config.seed)
    log: list[dict] = []
    best_metric = -math.inf
    best_state = None
    stale = 0
    for epoch in range(config.max_epochs):
        model.train()
        order = list(range(len(train_x)))
        shuffler.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = _batch_loss(model, train_x[idx], train_y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        model.eval()
        with torch.no_grad():
            val_scores = torch.sigmoid(model(val_x)).numpy()
        metric = mean_auroc(auroc_per_class(val_scores, val_y.numpy()))
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auroc": metric})
        metric = -math.inf if metric is None else metric

        if metric > best_metric:
            best_metric = metric
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


def write_training_log(path: str | Path, log: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")


def save_checkpoint(
    path: str | Path,
    model: DiseaseClassifier,
    diseases: Sequence[str] = DEFAULT_DISEASES,
    vocab_hash: str = "",
    extra: dict | None = None,
) -> None:
    """Self-describing archive: weights, config echo, disease order, vocab hash."""
    torch.save(
        {
            "kind": "classifier",
            "state_dict": model.state_dict(),
            "config": asdict(model.config),
            "diseases": list(diseases),
            "vocab_hash": vocab_hash,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[DiseaseClassifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    model = DiseaseClassifier(ClassifierConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
