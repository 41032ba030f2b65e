"""Instance-level weather alignment via self-supervised contrastive learning.

Positive pairs are the same ground-truth instance seen in a clean source
image and in a weather-corrupted copy of it (boxes are identical across
views since corruptions are photometric).  Instance features pooled from
both views are projected onto the unit sphere and pulled together with an
InfoNCE loss against in-batch negatives, making instance features robust
to weather corruption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import seeding
from .corruption import CorruptionRecord, WeatherConfig, corrupt, sample_weather_params
from .detector import FeatureMap, cell_centers
from .scenes import SOURCE_CLEAR, TARGET_ADVERSE, BoundingBox, LabeledImage

NORM_EPS = 1e-8


class ContrastiveBatchError(ValueError):
    """The contrastive batch is malformed (too small or bad temperature)."""


@dataclass
class InstanceFeature:
    vector: torch.Tensor  # (C,)
    source_box: BoundingBox
    image_id: str
    view: str  # clean | weather


def make_views(
    x: LabeledImage, weather_cfg: WeatherConfig, seed: int
) -> tuple[LabeledImage, LabeledImage]:
    """Build (clean, weather) views of a labeled source image.

    The weather view keeps the boxes and is tagged target_adverse since it
    carries a weather corruption.
    """
    if x.domain != SOURCE_CLEAR or x.boxes is None:
        raise ValueError("views are built from labeled source_clear images")
    rng = seeding.rng_from(seed)
    params = sample_weather_params(rng, weather_cfg)
    record = CorruptionRecord(style=None, weather=params, seed=seeding.derive_seed(seed, seeding.VIEWS))
    pixels, record = corrupt(x.pixels, record)
    weather_view = LabeledImage(
        pixels=pixels,
        boxes=list(x.boxes),
        domain=TARGET_ADVERSE,
        corruption=record,
        image_id=x.image_id,
    )
    return x, weather_view


def pool_instance(
    f_values: torch.Tensor,
    box: BoundingBox,
    stride: int,
    image_id: str = "",
    view: str = "clean",
) -> InstanceFeature:
    """Mean feature over cells whose centers fall inside the box.

    With no interior cell center, falls back to the single cell whose
    center is nearest the box center.
    """
    if f_values.ndim != 3:
        raise ValueError(f"expected (C, H_f, W_f) values, got {tuple(f_values.shape)}")
    _, h, w = f_values.shape
    cx, cy = cell_centers((h, w), stride)
    in_x = (cx >= box.x_min) & (cx < box.x_max)
    in_y = (cy >= box.y_min) & (cy < box.y_max)
    mask = in_y[:, None] & in_x[None, :]
    if mask.any():
        sel = torch.from_numpy(mask)
        vector = f_values[:, sel].mean(dim=1)
    else:
        bx, by = (box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2
        d2 = (cx[None, :] - bx) ** 2 + (cy[:, None] - by) ** 2
        i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
        vector = f_values[:, i, j]
    return InstanceFeature(vector=vector, source_box=box, image_id=image_id, view=view)


class ProjectionHead(nn.Module):
    """Two-layer MLP onto the unit sphere."""

    def __init__(self, channels: int, embed_dim: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.fc2(F.relu(self.fc1(x)))
        return z / (z.norm(dim=-1, keepdim=True) + NORM_EPS)


def info_nce(anchors: torch.Tensor, positives: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE over paired embeddings: positives[i] matches anchors[i].

    Similarities are dot products; for each anchor the other positives act
    as negatives: L = mean_i -log( exp(s_ii/t) / sum_j exp(s_ij/t) ).
    """
    if temperature <= 0:
        raise ContrastiveBatchError(f"temperature must be > 0, got {temperature}")
    if anchors.ndim != 2 or anchors.shape != positives.shape:
        raise ContrastiveBatchError("anchors and positives must be equal-shape (B, D) tensors")
    b = anchors.shape[0]
    if b < 2:
        raise ContrastiveBatchError(f"need at least 2 pairs, got {b}")
    sim = anchors @ positives.T / temperature
    return F.cross_entropy(sim, torch.arange(b))


def weather_alignment_loss(
    batch: list[LabeledImage],
    backbone,
    projector: ProjectionHead,
    weather_cfg: WeatherConfig,
    seed: int,
    temperature: float = 0.2,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Symmetric InfoNCE between clean and weather views of source instances.

    Returns (loss, info); with fewer than 2 instances in the batch the loss
    contribution is 0 and info["skipped"] is set.
    """
    views = [make_views(x, weather_cfg, seeding.derive_seed(seed, seeding.VIEWS, i)) for i, x in enumerate(batch)]
    n_instances = sum(len(x.boxes) for x in batch)
    dtype = next(projector.parameters()).dtype
    if n_instances < 2:
        zero = torch.zeros((), dtype=dtype)
        return zero, {"skipped": 1.0, "pos_cosine": math.nan, "n_pairs": float(n_instances)}
    clean_px = torch.from_numpy(np.stack([v[0].pixels for v in views])).to(dtype)
    weather_px = torch.from_numpy(np.stack([v[1].pixels for v in views])).to(dtype)
    f_clean = backbone(clean_px)
    f_weather = backbone(weather_px)
    clean_feats = []
    weather_feats = []
    for idx, (clean_view, weather_view) in enumerate(views):
        for box in clean_view.boxes:
            clean_feats.append(
                pool_instance(f_clean.values[idx], box, f_clean.stride, clean_view.image_id, "clean")
            )
            weather_feats.append(
                pool_instance(f_weather.values[idx], box, f_weather.stride, weather_view.image_id, "weather")
            )
    z_clean = projector(torch.stack([f.vector for f in clean_feats]))
    z_weather = projector(torch.stack([f.vector for f in weather_feats]))
    loss = 0.5 * (info_nce(z_clean, z_weather, temperature) + info_nce(z_weather, z_clean, temperature))
    with torch.no_grad():
        pos_cosine = float((z_clean * z_weather).sum(dim=-1).mean())
    return loss, {"skipped": 0.0, "pos_cosine": pos_cosine, "n_pairs": float(len(clean_feats))}


def mean_positive_cosine(
    items: list[LabeledImage],
    backbone,
    projector: ProjectionHead,
    weather_cfg: WeatherConfig,
    seed: int,
) -> float:
    """Mean clean/weather embedding cosine over all instances of `items`.

    Measurement-only companion to weather_alignment_loss, e.g. for scoring
    weather robustness on held-out source images.
    """
    with torch.no_grad():
        _, info = weather_alignment_loss(items, backbone, projector, weather_cfg, seed)
    return info["pos_cosine"]
