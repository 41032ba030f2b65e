"""Detection metrics: IoU, greedy matching, per-class AP@0.5, mAP, comparisons.

AP uses all-point interpolation.  Classes with zero ground-truth instances
are excluded from the mean rather than scored 0.  Everything is
deterministic and order-invariant: detections are globally sorted by
(score desc, image id, in-image index).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .scenes import SPLIT_LABELED, BoundingBox, atomic_text_write
from .detector import Detection


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map50: float
    counts: dict[str, int]  # n_images, n_gt, n_det
    split: str
    checkpoint: str = ""

    def to_json(self) -> str:
        d = {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map50": self.map50,
            "counts": self.counts,
            "split": self.split,
            "checkpoint": self.checkpoint,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
            map50=d["map50"],
            counts={k: int(v) for k, v in d["counts"].items()},
            split=d["split"],
            checkpoint=d.get("checkpoint", ""),
        )

    def save(self, path: str) -> None:
        atomic_text_write(path, self.to_json())

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union under the half-open pixel convention."""
    a.validate()
    b.validate()
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match(
    dets: list[Detection], gts: list[BoundingBox], iou_thr: float = 0.5
) -> list[bool]:
    """Greedy single-image, single-class matching; one flag per detection.

    Detections are taken in score-descending order (ties keep input order);
    each claims the highest-IoU unmatched ground truth at or above the
    threshold (IoU ties to the lower GT index).  Flags are returned in the
    original detection order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    flags = [False] * len(dets)
    taken = [False] * len(gts)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, gt)
            if v >= iou_thr and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: list[bool], scores: list[float], n_gt: int) -> float:
    """All-point interpolated AP from TP/FP flags with their scores.

    Returns nan when n_gt = 0 (class excluded from the mean, not scored 0).
    """
    if n_gt < 0:
        raise EvalError("n_gt must be >= 0")
    if n_gt == 0:
        return float("nan")
    if not flags:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum([1.0 if flags[i] else 0.0 for i in order])
    fp = np.cumsum([0.0 if flags[i] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def evaluate_detections(
    detections: dict[str, list[Detection]],
    ground_truth: dict[str, list[BoundingBox]],
    num_classes: int,
    iou_thr: float = 0.5,
    split: str = "",
    checkpoint: str = "",
) -> EvalReport:
    """Aggregate per-image detections into per-class AP@thr and mAP.

    `detections` and `ground_truth` map image ids to that image's entries;
    ids missing from `detections` count as images with no detections.
    """
    per_class_ap: dict[int, float] = {}
    n_det = sum(len(v) for v in detections.values())
    n_gt = sum(len(v) for v in ground_truth.values())
    all_ids = sorted(set(ground_truth) | set(detections))
    for class_id in range(num_classes):
        flags: list[bool] = []
        scores: list[float] = []
        sort_keys: list[tuple] = []
        class_gt = 0
        for image_id in all_ids:
            gts = [b for b in ground_truth.get(image_id, []) if b.class_id == class_id]
            dets = [d for d in detections.get(image_id, []) if d.class_id == class_id]
            class_gt += len(gts)
            image_flags = match(dets, gts, iou_thr)
            for k, det in enumerate(dets):
                flags.append(image_flags[k])
                scores.append(det.score)
                sort_keys.append((-det.score, image_id, k))
        # Global order independent of image iteration order.
        order = sorted(range(len(flags)), key=lambda i: sort_keys[i])
        ap = average_precision([flags[i] for i in order], [scores[i] for i in order], class_gt)
        per_class_ap[class_id] = ap
    valid = [v for v in per_class_ap.values() if not np.isnan(v)]
    map50 = float(np.mean(valid)) if valid else 0.0
    counts = {"n_images": len(all_ids), "n_gt": n_gt, "n_det": n_det}
    return EvalReport(per_class_ap=per_class_ap, map50=map50, counts=counts, split=split, checkpoint=checkpoint)


def evaluate(
    checkpoint_path: str,
    manifest_path: str,
    split: str,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    iou_thr: float = 0.5,
) -> EvalReport:
    """Run a checkpointed model over a labeled split and score it."""
    from .model import AdaptiveDetector
    from .scenes import load_split

    if not SPLIT_LABELED.get(split, False):
        raise EvalError(f"split {split!r} carries no usable labels; evaluation is impossible")
    model, _, _ = AdaptiveDetector.load(checkpoint_path)
    model.eval()
    items = load_split(manifest_path, split)
    detections: dict[str, list[Detection]] = {}
    ground_truth: dict[str, list[BoundingBox]] = {}
    for item in items:
        dets = predict_image(model, item.pixels, score_threshold, nms_iou)
        detections[item.image_id] = dets
        ground_truth[item.image_id] = list(item.boxes)
    return evaluate_detections(
        detections,
        ground_truth,
        num_classes=model.cfg.num_classes,
        iou_thr=iou_thr,
        split=split,
        checkpoint=checkpoint_path,
    )


def predict_image(model, pixels: np.ndarray, score_threshold: float, nms_iou: float) -> list[Detection]:
    """decode + per-class NMS for a single (3, H, W) image."""
    import torch

    from . import detector

    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        fmap, preds = model(torch.from_numpy(pixels[None]).to(dtype))
        dets = detector.decode(preds, fmap.stride, (pixels.shape[1], pixels.shape[2]), score_threshold)[0]
    return detector.nms(dets, nms_iou)


def compare(reports: list[EvalReport], out_csv: str | None = None) -> str:
    """Per-class and overall deltas of each report against the first.

    Returns an aligned text table; optionally writes the same rows as CSV.
    """
    if len(reports) < 2:
        raise EvalError("need at least 2 reports to compare")
    split = reports[0].split
    if any(r.split != split for r in reports):
        raise EvalError("reports evaluate different splits")
    class_ids = sorted(reports[0].per_class_ap)
    header = ["checkpoint", "map50", "delta_map50"] + [f"ap_{c}" for c in class_ids] + [
        f"delta_ap_{c}" for c in class_ids
    ]
    rows: list[list[str]] = []
    base = reports[0]
    for r in reports:
        row = [r.checkpoint or "(unnamed)", f"{r.map50:.4f}", f"{r.map50 - base.map50:+.4f}"]
        for c in class_ids:
            row.append(f"{r.per_class_ap.get(c, float('nan')):.4f}")
        for c in class_ids:
            row.append(f"{r.per_class_ap.get(c, float('nan')) - base.per_class_ap.get(c, float('nan')):+.4f}")
        rows.append(row)
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    text = "\n".join(lines) + "\n"
    if out_csv is not None:
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for row in rows:
            buf.write(",".join(row) + "\n")
        atomic_text_write(out_csv, buf.getvalue())
    return text
