"""Attentive encoder-decoder report generation.

A frozen convolutional encoder turns an image (original X-ray or disease
crop) into a matrix of region feature vectors. At every decode step an
additive-attention MLP scores each region against the previous hidden
state, the softmax-weighted feature sum and the embedding of the last word
form the LSTM input, and a linear head over the hidden state yields the
next-word distribution. Generation runs until the stop token.

Decoders are trained per role: one for normal studies, a dedicated
abnormality/normality pair per sufficiently-frequent disease, and one
shared decoder for rare classes.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import TokenizedReport, Vocabulary

SHARED_ROLE = "shared"
NORMAL_ROLE = "normal"
RARE_CLASS_CUTOFF = 50


class DecoderMissing(KeyError):
    """A routing decision points at a decoder artifact that does not exist."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "resnet101"
    feature_dim: int = 2048
    spatial: int = 14
    in_channels: int = 1
    input_size: int = 224
    frozen: bool = True
    seed: int = 0

    @property
    def num_regions(self) -> int:
        return self.spatial**2


@dataclass
class DecoderConfig:
    vocab_size: int = 0
    feature_dim: int = 2048
    embed_dim: int = 512
    hidden_dim: int = 512
    attention_dim: int = 512
    max_len: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0


@dataclass
class RegionFeatures:
    """Feature matrix with one column per spatial region.

    `regions` is (R, D) for the attention math; `matrix` exposes the
    documented D x R layout.
    """

    regions: torch.Tensor

    @property
    def matrix(self) -> np.ndarray:
        return self.regions.detach().cpu().numpy().T

    @property
    def shape(self) -> tuple[int, int]:
        return (self.regions.shape[1], self.regions.shape[0])


@dataclass
class AttentionStep:
    scores: torch.Tensor  # (R,) unnormalized
    alpha: torch.Tensor  # (R,) softmax weights
    attended: torch.Tensor  # (D,) weighted feature sum


@dataclass
class DecoderState:
    hidden: torch.Tensor
    cell: torch.Tensor
    last_word: int


class TinyImageEncoder(nn.Module):
    """Small conv encoder for desk-scale runs (default D=32 over a 4x4 grid)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        mid = max(8, config.feature_dim // 2)
        self.net = nn.Sequential(
            nn.Conv2d(config.in_channels, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(mid, config.feature_dim, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        if config.frozen:
            self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self.net(x)
        return F.adaptive_avg_pool2d(maps, self.config.spatial)


class ResNetEncoder(nn.Module):
    """Residual encoder pooled to a spatial grid (2048 x 14 x 14 default)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        from torchvision.models import resnet101

        torch.manual_seed(config.seed)
        model = resnet101(weights=None)
        if config.in_channels != 3:
            model.conv1 = nn.Conv2d(config.in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.net = nn.Sequential(*list(model.children())[:-2])
        if config.frozen:
            self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.net(x), self.config.spatial)


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.kind == "tiny":
        return TinyImageEncoder(config)
    if config.kind == "resnet101":
        return ResNetEncoder(config)
    raise ValueError(f"unknown encoder kind {config.kind!r}")


def encode(encoder: nn.Module, image: np.ndarray | torch.Tensor) -> RegionFeatures:
    """Region feature matrix for one image; deterministic, no gradients."""
    cfg = encoder.config
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] != cfg.in_channels:
        raise ValueError(f"expected ({cfg.in_channels}, H, W) or (H, W) image, got {tuple(t.shape)}")
    if t.shape[1] != cfg.input_size or t.shape[2] != cfg.input_size:
        t = F.interpolate(
            t.unsqueeze(0), size=(cfg.input_size, cfg.input_size),
            mode="bilinear", align_corners=False,
        ).squeeze(0)
    t = t.to(next(encoder.parameters()).dtype)
    encoder.eval()
    with torch.no_grad():
        maps = encoder(t.unsqueeze(0))[0]  # (D, S, S)
    return RegionFeatures(regions=maps.flatten(1).T.contiguous())  # (R, D)


class AdditiveAttention(nn.Module):
    """One-hidden-layer perceptron scoring each region against the hidden state."""

    def __init__(self, feature_dim: int, hidden_dim: int, attention_dim: int):
        super().__init__()
        self.feature_proj = nn.Linear(feature_dim, attention_dim)
        self.hidden_proj = nn.Linear(hidden_dim, attention_dim)
        self.score = nn.Linear(attention_dim, 1)

    def forward(self, regions: torch.Tensor, hidden: torch.Tensor) -> AttentionStep:
        """Works unbatched (R, D) x (H,) and batched (B, R, D) x (B, H)."""
        h = self.hidden_proj(hidden)
        if regions.dim() == 3:
            h = h.unsqueeze(1)
        e = self.score(torch.tanh(self.feature_proj(regions) + h)).squeeze(-1)
        alpha = torch.softmax(e, dim=-1)
        attended = (alpha.unsqueeze(-1) * regions).sum(dim=-2)
        return AttentionStep(scores=e, alpha=alpha, attended=attended)


def attention(features: RegionFeatures, hidden: torch.Tensor, module: AdditiveAttention) -> AttentionStep:
    return module(features.regions, hidden)


class AttentiveDecoder(nn.Module):
    """LSTM decoder whose input is [word embedding; attended visual feature]."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        if config.vocab_size <= 0:
            raise ValueError("decoder needs a positive vocab_size")
        self.config = config
        torch.manual_seed(config.seed)
        self.embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        self.attention = AdditiveAttention(config.feature_dim, config.hidden_dim, config.attention_dim)
        self.lstm = nn.LSTMCell(config.embed_dim + config.feature_dim, config.hidden_dim)
        self.init_hidden = nn.Linear(config.feature_dim, config.hidden_dim)
        self.init_cell = nn.Linear(config.feature_dim, config.hidden_dim)
        self.word_head = nn.Linear(config.hidden_dim, config.vocab_size)

    def _init_hc(self, regions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean_region = regions.mean(dim=-2)
        return torch.tanh(self.init_hidden(mean_region)), torch.tanh(self.init_cell(mean_region))

    def init_state(self, features: RegionFeatures, start_word: int = Vocabulary.pad_index) -> DecoderState:
        hidden, cell = self._init_hc(features.regions)
        return DecoderState(hidden=hidden, cell=cell, last_word=start_word)

    def step(self, state: DecoderState, features: RegionFeatures) -> tuple[DecoderState, torch.Tensor, AttentionStep]:
        """One decode transition; returns the new state, the word
        distribution (probabilities summing to 1) and the attention used."""
        if not 0 <= state.last_word < self.config.vocab_size:
            raise ValueError(f"token index {state.last_word} outside vocabulary")
        att = self.attention(features.regions, state.hidden)
        embedded = self.embedding(torch.tensor(state.last_word))
        context = torch.cat([embedded, att.attended])
        hidden, cell = self.lstm(context.unsqueeze(0), (state.hidden.unsqueeze(0), state.cell.unsqueeze(0)))
        logits = self.word_head(hidden[0])
        probs = torch.softmax(logits, dim=-1)
        new_state = DecoderState(hidden=hidden[0], cell=cell[0], last_word=state.last_word)
        return new_state, probs, att


def decode_step(
    decoder: AttentiveDecoder, state: DecoderState, features: RegionFeatures
) -> tuple[DecoderState, torch.Tensor]:
    new_state, probs, _ = decoder.step(state, features)
    return new_state, probs


def generate(
    decoder: AttentiveDecoder,
    features: RegionFeatures,
    mode: str = "greedy",
    max_len: int | None = None,
    seed: int = 0,
    alpha_tol: float = 1e-6,
) -> list[int]:
    """Token indices until the stop token (excluded) or the length cap."""
    max_len = decoder.config.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown generation mode {mode!r}")
    rng = torch.Generator().manual_seed(seed)
    decoder.eval()
    out: list[int] = []
    state = decoder.init_state(features)
    with torch.no_grad():
        for _ in range(max_len):
            state, probs, att = decoder.step(state, features)
            assert abs(float(att.alpha.double().sum()) - 1.0) <= alpha_tol, "attention weights must sum to 1"
            if mode == "greedy":
                word = int(probs.argmax())
            else:
                word = int(torch.multinomial(probs, 1, generator=rng))
            if word == Vocabulary.stop_index:
                break
            out.append(word)
            state.last_word = word
    return out


def generate_report(
    decoder: AttentiveDecoder,
    features: RegionFeatures,
    vocab: Vocabulary,
    mode: str = "greedy",
    max_len: int | None = None,
    seed: int = 0,
) -> TokenizedReport:
    return vocab.decode(
        generate(decoder, features, mode=mode, max_len=max_len, seed=seed)
        + [Vocabulary.stop_index]
    )


def _teacher_forced_loss(
    decoder: AttentiveDecoder, features: list[RegionFeatures], streams: list[list[int]]
) -> torch.Tensor:
    """Mean next-word cross-entropy under teacher forcing, batched over pairs."""
    pad = Vocabulary.pad_index
    batch = len(streams)
    horizon = max(len(s) for s in streams)
    regions = torch.stack([f.regions for f in features])  # (B, R, D)
    inputs = torch.full((batch, horizon), pad, dtype=torch.long)
    targets = torch.full((batch, horizon), pad, dtype=torch.long)
    for b, stream in enumerate(streams):
        inputs[b, : len(stream)] = torch.tensor([pad] + stream[:-1])
        targets[b, : len(stream)] = torch.tensor(stream)

    hidden, cell = decoder._init_hc(regions)
    total = regions.new_zeros(())
    for t in range(horizon):
        att = decoder.attention(regions, hidden)
        context = torch.cat([decoder.embedding(inputs[:, t]), att.attended], dim=1)
        hidden, cell = decoder.lstm(context, (hidden, cell))
        logits = decoder.word_head(hidden)
        total = total + F.cross_entropy(logits, targets[:, t], ignore_index=pad, reduction="sum")
    return total / int((targets != pad).sum())


def train_decoder(
    pairs: Sequence[tuple[RegionFeatures, TokenizedReport]],
    vocab: Vocabulary,
    config: DecoderConfig,
    val_pairs: Sequence[tuple[RegionFeatures, TokenizedReport]] | None = None,
) -> tuple[AttentiveDecoder, list[dict]]:
    """Teacher-forced Adam training with early stopping on validation loss.

    Falls back to the training loss when no validation pairs are given
    (overfit smoke runs). Returns the best checkpoint and the loss log.
    """
    if not pairs:
        raise ValueError("cannot train a decoder on an empty pair list")
    config.vocab_size = len(vocab)
    decoder = AttentiveDecoder(config)
    optimizer = torch.optim.Adam(decoder.parameters(), lr=config.lr)

    train_feats = [f for f, _ in pairs]
    train_streams = [vocab.encode_report(r) for _, r in pairs]
    if val_pairs is not None:
        val_feats = [f for f, _ in val_pairs]
        val_streams = [vocab.encode_report(r) for _, r in val_pairs]

    shuffler = random.Random(config.seed)
    log: list[dict] = []
    best = math.inf
    best_state = None
    stale = 0
    for epoch in range(config.max_epochs):
        decoder.train()
        order = list(range(len(pairs)))
        shuffler.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = _teacher_forced_loss(
                decoder, [train_feats[i] for i in idx], [train_streams[i] for i in idx]
            )
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite decoder loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))

        if val_pairs is not None:
            decoder.eval()
            with torch.no_grad():
                metric = float(_teacher_forced_loss(decoder, val_feats, val_streams))
        else:
            metric = train_loss
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": metric})

        if metric < best - 1e-9:
            best = metric
            best_state = {k: v.clone() for k, v in decoder.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    if best_state is not None:
        decoder.load_state_dict(best_state)
    decoder.eval()
    return decoder, log


def save_encoder(path: str | Path, encoder: nn.Module) -> None:
    torch.save(
        {"kind": "encoder", "config": asdict(encoder.config), "state_dict": encoder.state_dict()},
        path,
    )


def load_encoder(path: str | Path) -> nn.Module:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    encoder = build_encoder(EncoderConfig(**payload["config"]))
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    return encoder


NORMALITY_SOURCE = "normality"
ABNORMALITY_SOURCE = "abnormality"


@dataclass
class ReportSentence:
    tokens: list[str]
    source: str  # NORMALITY_SOURCE or ABNORMALITY_SOURCE
    disease: str | None = None  # set for abnormality sentences

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "source": self.source, "disease": self.disease}


@dataclass
class Report:
    """Ordered sentences, each tagged with its generation provenance."""

    sentences: list[ReportSentence]

    def text(self) -> str:
        return " ".join(" ".join(s.tokens) + "." for s in self.sentences)

    def abnormality_diseases(self) -> set[str]:
        return {s.disease for s in self.sentences if s.source == ABNORMALITY_SOURCE}

    def to_dict(self) -> dict:
        return {"sentences": [s.to_dict() for s in self.sentences], "text": self.text()}


# ---------------------------------------------------------------------------
# decoder registry


def abnormal_role(disease: str) -> str:
    return f"{disease}-abnormal"


def normality_role(disease: str) -> str:
    return f"{disease}-normality"


@dataclass
class DecoderSelection:
    """Routing outcome: which decoder role describes what."""

    normality: str
    abnormal: dict[str, str]  # disease name -> role
    shared_fallback: set[str]  # diseases routed to the shared decoder


class DecoderRegistry:
    """Directory of decoder checkpoints named by role plus a manifest that
    binds them to the vocabulary hash and the training-count snapshot."""

    MANIFEST = "registry.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / self.MANIFEST
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        else:
            self.manifest = {"roles": {}, "train_counts": {}, "vocab_hash": ""}
        self._cache: dict[str, AttentiveDecoder] = {}

    def _write(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1), encoding="utf-8")

    def set_train_counts(self, counts: dict[str, int]) -> None:
        self.manifest["train_counts"] = dict(counts)
        self._write()

    @property
    def train_counts(self) -> dict[str, int]:
        return dict(self.manifest["train_counts"])

    def save(self, role: str, decoder: AttentiveDecoder, vocab_hash: str) -> Path:
        if self.manifest["vocab_hash"] and self.manifest["vocab_hash"] != vocab_hash:
            raise ValueError("registry already bound to a different vocabulary")
        self.manifest["vocab_hash"] = vocab_hash
        filename = f"{role}.pt"
        self.root.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": "decoder",
                "role": role,
                "state_dict": decoder.state_dict(),
                "config": asdict(decoder.config),
                "vocab_hash": vocab_hash,
            },
            self.root / filename,
        )
        self.manifest["roles"][role] = filename
        self._write()
        return self.root / filename

    def roles(self) -> list[str]:
        return sorted(self.manifest["roles"])

    def load(self, role: str) -> AttentiveDecoder:
        if role in self._cache:
            return self._cache[role]
        filename = self.manifest["roles"].get(role)
        if filename is None or not (self.root / filename).exists():
            raise DecoderMissing(f"no decoder artifact for role {role!r}")
        payload = torch.load(self.root / filename, map_location="cpu", weights_only=False)
        decoder = AttentiveDecoder(DecoderConfig(**payload["config"]))
        decoder.load_state_dict(payload["state_dict"])
        decoder.eval()
        self._cache[role] = decoder
        return decoder


def select_decoder(
    registry: DecoderRegistry,
    present_diseases: Sequence[str],
    train_counts: dict[str, int] | None = None,
) -> DecoderSelection:
    """Route an annotation to decoder roles.

    Normal studies use the normal decoder. A disease with at least
    RARE_CLASS_CUTOFF training samples uses its dedicated pair; rarer
    classes fall back to the shared decoder (flagged in the selection).
    Missing artifacts raise DecoderMissing naming the class.
    """
    counts = train_counts if train_counts is not None else registry.train_counts
    if not present_diseases:
        if NORMAL_ROLE not in registry.manifest["roles"]:
            raise DecoderMissing("no decoder artifact for role 'normal'")
        return DecoderSelection(normality=NORMAL_ROLE, abnormal={}, shared_fallback=set())

    abnormal: dict[str, str] = {}
    shared: set[str] = set()
    top = present_diseases[0]
    for disease in present_diseases:
        if counts.get(disease, 0) >= RARE_CLASS_CUTOFF:
            role = abnormal_role(disease)
            if role not in registry.manifest["roles"]:
                raise DecoderMissing(f"no decoder artifact for class {disease!r} (role {role!r})")
            abnormal[disease] = role
        else:
            if SHARED_ROLE not in registry.manifest["roles"]:
                raise DecoderMissing(f"no shared decoder artifact for rare class {disease!r}")
            abnormal[disease] = SHARED_ROLE
            shared.add(disease)

    if counts.get(top, 0) >= RARE_CLASS_CUTOFF and normality_role(top) in registry.manifest["roles"]:
        normality = normality_role(top)
    elif SHARED_ROLE in registry.manifest["roles"]:
        normality = SHARED_ROLE
    else:
        raise DecoderMissing(f"no normality decoder available for {top!r}")
    return DecoderSelection(normality=normality, abnormal=abnormal, shared_fallback=shared)
