"""Minimal single-stage anchor-free detector.

A small convolutional backbone maps an image to one feature level (default
stride 8, 64 channels).  A per-cell head predicts class logits, an
objectness logit, and four positive box offsets (left/top/right/bottom
distances from the cell center, in stride units, through exp).  Target
assignment uses center sampling: a cell is positive iff its center lies in
the central 50% region of a box, ties going to the smaller box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scenes import BoundingBox

CENTER_FRACTION = 0.5


@dataclass
class FeatureMap:
    """Batched (B, C, H_f, W_f) feature grid with its pixel stride."""

    values: torch.Tensor
    stride: int


@dataclass
class RawPredictions:
    class_logits: torch.Tensor  # (B, K, H_f, W_f)
    objectness_logit: torch.Tensor  # (B, 1, H_f, W_f)
    box_offsets: torch.Tensor  # (B, 4, H_f, W_f), positive (l, t, r, b) in stride units


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    class_id: int


def _norm(width: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, width), width)


class Backbone(nn.Module):
    """Four conv blocks, three of them striding, for an overall stride of 8."""

    def __init__(self, channels: int = 64):
        super().__init__()
        if channels < 8 or channels % 4:
            raise ValueError("channels must be >= 8 and divisible by 4")
        widths = [channels // 4, channels // 2, channels, channels]
        strides = [2, 2, 2, 1]
        layers: list[nn.Module] = []
        in_c = 3
        for width, s in zip(widths, strides):
            layers += [nn.Conv2d(in_c, width, 3, stride=s, padding=1), _norm(width), nn.ReLU()]
            in_c = width
        self.blocks = nn.Sequential(*layers)
        self.channels = channels
        self.stride = 8

    def forward(self, images: torch.Tensor) -> FeatureMap:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] % self.stride or images.shape[3] % self.stride:
            raise ValueError(f"image size {images.shape[2:]} not divisible by stride {self.stride}")
        return FeatureMap(values=self.blocks(images), stride=self.stride)


class DetectionHead(nn.Module):
    """Shared 3x3 conv followed by 1x1 class / objectness / box branches."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.trunk = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU())
        self.class_conv = nn.Conv2d(channels, num_classes, 1)
        self.objectness_conv = nn.Conv2d(channels, 1, 1)
        self.box_conv = nn.Conv2d(channels, 4, 1)
        self.num_classes = num_classes
        # Background prior: start objectness pessimistic, boxes at one stride unit.
        nn.init.constant_(self.objectness_conv.bias, -2.0)
        nn.init.zeros_(self.box_conv.bias)

    def forward(self, fmap: FeatureMap) -> RawPredictions:
        x = self.trunk(fmap.values)
        return RawPredictions(
            class_logits=self.class_conv(x),
            objectness_logit=self.objectness_conv(x),
            box_offsets=torch.exp(self.box_conv(x)),
        )


@dataclass
class TargetMaps:
    """Per-cell assignment for one image."""

    class_ids: np.ndarray  # (H_f, W_f) int64, -1 for negative cells
    offsets: np.ndarray  # (4, H_f, W_f) float64 (l, t, r, b) in stride units
    positive: np.ndarray  # (H_f, W_f) bool


def cell_centers(grid_hw: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of cell centers: (cx row vector, cy column vector)."""
    h, w = grid_hw
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    return cx, cy


def assign_targets(
    boxes: list[BoundingBox], grid_hw: tuple[int, int], stride: int
) -> TargetMaps:
    """Center-sampling assignment; contested cells go to the smaller-area box.

    Equal-area ties resolve to the earlier box in the list.
    """
    h, w = grid_hw
    class_ids = np.full((h, w), -1, dtype=np.int64)
    offsets = np.zeros((4, h, w))
    best_area = np.full((h, w), np.inf)
    cx, cy = cell_centers(grid_hw, stride)
    gx = np.broadcast_to(cx[None, :], (h, w))
    gy = np.broadcast_to(cy[:, None], (h, w))
    for box in boxes:
        bcx, bcy = (box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2
        rx = (box.x_max - box.x_min) * CENTER_FRACTION / 2
        ry = (box.y_max - box.y_min) * CENTER_FRACTION / 2
        inside = (np.abs(gx - bcx) <= rx) & (np.abs(gy - bcy) <= ry)
        take = inside & (box.area < best_area)
        if not take.any():
            continue
        best_area[take] = box.area
        class_ids[take] = box.class_id
        offsets[0][take] = (gx[take] - box.x_min) / stride
        offsets[1][take] = (gy[take] - box.y_min) / stride
        offsets[2][take] = (box.x_max - gx[take]) / stride
        offsets[3][take] = (box.y_max - gy[take]) / stride
    return TargetMaps(class_ids=class_ids, offsets=offsets, positive=class_ids >= 0)


def _offset_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boxes sharing a center point, given by (l, t, r, b) offsets (P, 4)."""
    iw = torch.minimum(pred[:, 0], target[:, 0]) + torch.minimum(pred[:, 2], target[:, 2])
    ih = torch.minimum(pred[:, 1], target[:, 1]) + torch.minimum(pred[:, 3], target[:, 3])
    inter = iw * ih
    area_p = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    area_t = (target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3])
    return inter / (area_p + area_t - inter)


def detection_loss(
    preds: RawPredictions, targets: list[TargetMaps]
) -> tuple[torch.Tensor, dict[str, float]]:
    """Objectness BCE over all cells + class CE and IoU loss over positives.

    The three terms are equally weighted; with zero positive cells the class
    and box components are defined as 0.
    """
    if preds.objectness_logit.shape[0] != len(targets):
        raise ValueError("batch size mismatch between predictions and targets")
    dtype = preds.objectness_logit.dtype
    pos_mask = torch.from_numpy(np.stack([t.positive for t in targets])).to(torch.bool)
    obj_target = pos_mask.to(dtype).unsqueeze(1)
    obj_loss = F.binary_cross_entropy_with_logits(preds.objectness_logit, obj_target)

    n_pos = int(pos_mask.sum())
    if n_pos:
        class_ids = torch.from_numpy(np.stack([t.class_ids for t in targets]))
        tgt_off = torch.from_numpy(np.stack([t.offsets for t in targets])).to(dtype)
        # (B, K, H, W) -> (P, K) rows at positive cells
        logits_pos = preds.class_logits.permute(0, 2, 3, 1)[pos_mask]
        cls_loss = F.cross_entropy(logits_pos, class_ids[pos_mask])
        pred_off = preds.box_offsets.permute(0, 2, 3, 1)[pos_mask]
        tgt_off = tgt_off.permute(0, 2, 3, 1)[pos_mask]
        box_loss = (1.0 - _offset_iou(pred_off, tgt_off)).mean()
    else:
        cls_loss = preds.class_logits.sum() * 0.0
        box_loss = preds.box_offsets.sum() * 0.0

    total = obj_loss + cls_loss + box_loss
    components = {
        "objectness": float(obj_loss.detach()),
        "classification": float(cls_loss.detach()),
        "box_iou": float(box_loss.detach()),
    }
    return total, components


def decode(
    preds: RawPredictions,
    stride: int,
    image_size: tuple[int, int],
    score_threshold: float,
) -> list[list[Detection]]:
    """Per-cell score = sigmoid(objectness) * max softmax(class); boxes clipped."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must lie in [0,1], got {score_threshold}")
    h_img, w_img = image_size
    obj = torch.sigmoid(preds.objectness_logit.detach())[:, 0]
    cls_prob = torch.softmax(preds.class_logits.detach(), dim=1)
    best_prob, best_class = cls_prob.max(dim=1)
    scores = (obj * best_prob).numpy()
    best_class = best_class.numpy()
    offsets = preds.box_offsets.detach().numpy()
    batch, h, w = scores.shape
    cx, cy = cell_centers((h, w), stride)
    results: list[list[Detection]] = []
    for b in range(batch):
        dets: list[Detection] = []
        keep = np.argwhere(scores[b] >= score_threshold)
        for i, j in keep:
            l, t, r, d = offsets[b, :, i, j] * stride
            box = BoundingBox(
                x_min=float(np.clip(cx[j] - l, 0, w_img)),
                y_min=float(np.clip(cy[i] - t, 0, h_img)),
                x_max=float(np.clip(cx[j] + r, 0, w_img)),
                y_max=float(np.clip(cy[i] + d, 0, h_img)),
                class_id=int(best_class[b, i, j]),
            )
            dets.append(Detection(box=box, score=float(scores[b, i, j]), class_id=box.class_id))
        results.append(dets)
    return results


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; stable tie-break by (score, lower index)."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0,1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if suppressed[j] or j == i or dets[j].class_id != dets[i].class_id:
                continue
            if _box_iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return [dets[i] for i in sorted(kept)]
