"""Gradient-based disease localization and ROI cropping.

The heatmap for disease m rectifies a weighted sum of the classifier's
final feature maps, each weighted by the spatial mean of the gradient of
the pre-sigmoid score z_m with respect to that map. Thresholding at a
fraction of the peak intensity yields the bounding box; the box region is
cropped (with padding) as input for abnormality description.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy import ndimage

from .classifier import DiseaseClassifier, prepare_image

DEFAULT_BBOX_FRACTION = 0.9
DEFAULT_CROP_PADDING = 0.1
OVERLAY_ALPHA = 0.4


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel bounds, (row, col) convention."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def to_dict(self) -> dict:
        return {
            "row_min": self.row_min, "col_min": self.col_min,
            "row_max": self.row_max, "col_max": self.col_max,
        }


def cam_weights(gradients: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-map weights: spatial mean of each gradient grid, shape (K,)."""
    g = np.asarray(torch.as_tensor(gradients).detach().cpu().numpy(), dtype=np.float64)
    if g.ndim != 3:
        raise ValueError(f"expected gradients of shape (K, H, W), got {g.shape}")
    return g.mean(axis=(1, 2))


def compute_heatmap(weights: np.ndarray, feature_maps: np.ndarray | torch.Tensor) -> np.ndarray:
    """ReLU of the weighted sum of feature maps, shape (H, W)."""
    a = np.asarray(torch.as_tensor(feature_maps).detach().cpu().numpy(), dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if a.ndim != 3 or w.shape != (a.shape[0],):
        raise ValueError(f"weights {w.shape} do not match feature maps {a.shape}")
    return np.maximum(np.tensordot(w, a, axes=1), 0.0)


def grad_cam(
    model: DiseaseClassifier,
    image: np.ndarray | torch.Tensor,
    disease_index: int,
    upsample_to: tuple[int, int] | None = None,
) -> np.ndarray:
    """Localization heatmap for one disease, upsampled and peak-normalized.

    The gradient of the pre-sigmoid score flows back to the final feature
    maps; an all-zero map (dead gradient path) stays all-zero.
    """
    if not 0 <= disease_index < model.config.num_classes:
        raise ValueError(f"disease index {disease_index} out of range [0, {model.config.num_classes})")
    dtype = next(model.parameters()).dtype
    t = prepare_image(image, model.config).to(dtype)
    if upsample_to is None:
        upsample_to = (t.shape[1], t.shape[2])
    model.eval()
    maps = model.features(model.normalize(t).unsqueeze(0))
    score = model.head(maps)[0, disease_index]
    (grads,) = torch.autograd.grad(score, maps)

    weights = cam_weights(grads[0])
    heat = compute_heatmap(weights, maps[0])
    heat_t = torch.as_tensor(heat).unsqueeze(0).unsqueeze(0)
    heat_up = F.interpolate(heat_t, size=upsample_to, mode="bilinear", align_corners=False)
    out = heat_up[0, 0].numpy().astype(np.float64)
    peak = out.max()
    return out / peak if peak > 0 else out


def extract_bbox(
    heatmap: np.ndarray,
    fraction: float = DEFAULT_BBOX_FRACTION,
    mode: str = "largest",
) -> BoundingBox | None:
    """Tight box around the pixels at or above `fraction` of the peak.

    mode "largest" boxes the biggest 4-connected component of selected
    pixels (ties prefer the component holding the peak, then row-major
    order); mode "union" boxes every selected pixel. Returns None for a
    heatmap with no positive pixel.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max()
    if peak <= 0.0:
        return None
    mask = h >= fraction * peak

    if mode == "union":
        selected = np.argwhere(mask)
    elif mode == "largest":
        labeled, count = ndimage.label(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        argmax_label = labeled[np.unravel_index(int(np.argmax(h)), h.shape)]
        best_label, best_key = None, None
        for lab in range(1, count + 1):
            pixels = np.argwhere(labeled == lab)
            first = pixels[0]
            key = (len(pixels), lab == argmax_label, -int(first[0]), -int(first[1]))
            if best_key is None or key > best_key:
                best_label, best_key = lab, key
        selected = np.argwhere(labeled == best_label)
    else:
        raise ValueError(f"unknown bbox mode {mode!r}")

    return BoundingBox(
        row_min=int(selected[:, 0].min()), col_min=int(selected[:, 1].min()),
        row_max=int(selected[:, 0].max()), col_max=int(selected[:, 1].max()),
    )


def crop_roi(
    image: np.ndarray,
    box: BoundingBox,
    padding: float = DEFAULT_CROP_PADDING,
    output_size: int | None = None,
) -> np.ndarray:
    """Sub-image of the box grown by `padding` of its size per side, clipped
    to the image, optionally resized to a square captioner input."""
    img = np.asarray(image)
    rows, cols = img.shape[0], img.shape[1]
    if box.row_min >= rows or box.col_min >= cols or box.row_max < 0 or box.col_max < 0:
        raise ValueError(f"box {box} lies outside a {rows}x{cols} image")
    pad_r = int(round(padding * box.height))
    pad_c = int(round(padding * box.width))
    r0 = max(0, box.row_min - pad_r)
    c0 = max(0, box.col_min - pad_c)
    r1 = min(rows - 1, box.row_max + pad_r)
    c1 = min(cols - 1, box.col_max + pad_c)
    crop = img[r0 : r1 + 1, c0 : c1 + 1]
    if crop.size == 0:
        raise ValueError(f"empty crop for box {box} on a {rows}x{cols} image")
    if output_size is not None and crop.shape[:2] != (output_size, output_size):
        t = torch.as_tensor(crop, dtype=torch.float32)
        t = t.permute(2, 0, 1) if t.ndim == 3 else t.unsqueeze(0)
        t = F.interpolate(
            t.unsqueeze(0), size=(output_size, output_size), mode="bilinear", align_corners=False
        ).squeeze(0)
        crop = (t.permute(1, 2, 0) if img.ndim == 3 else t[0]).numpy()
    return crop


_JET_STOPS = np.array(
    [(0.0, 0, 0, 143), (0.125, 0, 0, 255), (0.375, 0, 255, 255),
     (0.625, 255, 255, 0), (0.875, 255, 0, 0), (1.0, 128, 0, 0)],
    dtype=np.float64,
)


def _colormap(values: np.ndarray) -> np.ndarray:
    """Jet-style color lookup, values in [0,1] -> uint8 RGB."""
    v = np.clip(values, 0.0, 1.0)
    out = np.zeros(v.shape + (3,), dtype=np.float64)
    for k in range(len(_JET_STOPS) - 1):
        t0, t1 = _JET_STOPS[k, 0], _JET_STOPS[k + 1, 0]
        seg = (v >= t0) & (v <= t1) if k == len(_JET_STOPS) - 2 else (v >= t0) & (v < t1)
        frac = np.zeros_like(v)
        frac[seg] = (v[seg] - t0) / (t1 - t0)
        for ch in range(3):
            out[..., ch][seg] = _JET_STOPS[k, ch + 1] + frac[seg] * (
                _JET_STOPS[k + 1, ch + 1] - _JET_STOPS[k, ch + 1]
            )
    return out.astype(np.uint8)


def render_overlay(
    image: np.ndarray,
    heatmap: np.ndarray,
    box: BoundingBox | None = None,
    alpha: float = OVERLAY_ALPHA,
) -> Image.Image:
    """Image blended with the color-mapped heatmap, box drawn in red."""
    img = np.asarray(image, dtype=np.float64)
    if img.max() <= 1.0:
        img = img * 255.0
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    heat = np.asarray(heatmap, dtype=np.float64)
    if heat.shape != img.shape[:2]:
        t = torch.as_tensor(heat, dtype=torch.float32)
        heat = F.interpolate(
            t.unsqueeze(0).unsqueeze(0), size=img.shape[:2], mode="bilinear", align_corners=False
        )[0, 0].numpy()
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    colored = _colormap(heat).astype(np.float64)
    blended = np.clip((1 - alpha) * img + alpha * colored, 0, 255).astype(np.uint8)
    out = Image.fromarray(blended, mode="RGB")
    if box is not None:
        draw = ImageDraw.Draw(out)
        draw.rectangle(
            [box.col_min, box.row_min, box.col_max, box.row_max], outline=(255, 0, 0), width=2
        )
    return out


def save_heatmap(path, heatmap: np.ndarray) -> None:
    """Raw heatmap as a portable .npy float grid."""
    np.save(path, np.asarray(heatmap, dtype=np.float32))


def load_heatmap(path) -> np.ndarray:
    return np.load(path)
