"""sklearn-style estimator wrapping the full training/prediction pipeline.

The detector composes with the wider ecosystem through the familiar
fit/predict/score/get_params surface:

    det = WeatherGapDetector(mode="full", steps=500)
    det.fit(X_source, y_source, X_target=X_adverse)
    detections = det.predict(X_new)       # one (M, 6) array per image
    map50 = det.score(X_test, y_test)

Images are (N, 3, H, W) float arrays in [0, 1] with H and W divisible by
the feature stride; labels are one (M_i, 5) array per image with columns
(x_min, y_min, x_max, y_max, class_id).
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import seeding
from .corruption import WeatherConfig
from .detector import Detection
from .evaluator import evaluate_detections, predict_image
from .model import AdaptiveDetector, ModelConfig, build_model
from .scenes import SOURCE_CLEAR, TARGET_ADVERSE, BoundingBox, LabeledImage
from .trainer import MODES, TrainConfig, Trainer

STRIDE = 8


def check_image_array(X, name: str = "X") -> np.ndarray:
    """Validate a (N, 3, H, W) image batch in [0, 1], stride-divisible."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} contains no images")
    if X.shape[2] % STRIDE or X.shape[3] % STRIDE:
        raise ValueError(f"{name} spatial size {X.shape[2:]} must be divisible by {STRIDE}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_boxes_list(y, n_images: int, num_classes: int) -> list[list[BoundingBox]]:
    """Validate per-image (M, 5) box arrays with class ids in range."""
    if len(y) != n_images:
        raise ValueError(f"y has {len(y)} entries for {n_images} images")
    out: list[list[BoundingBox]] = []
    for i, boxes in enumerate(y):
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 5) if len(boxes) else np.zeros((0, 5))
        image_boxes = []
        for row in arr:
            class_id = int(row[4])
            if row[4] != class_id or not 0 <= class_id < num_classes:
                raise ValueError(f"y[{i}]: class id {row[4]} outside [0, {num_classes})")
            box = BoundingBox(float(row[0]), float(row[1]), float(row[2]), float(row[3]), class_id)
            box.validate()
            image_boxes.append(box)
        out.append(image_boxes)
    return out


class WeatherGapDetector(BaseEstimator):
    """Adverse-weather-robust object detector with two-gap domain alignment.

    mode "source_only" trains on labeled clear images alone; "style_only"
    adds adversarial feature-statistics alignment against the unlabeled
    adverse images; "weather_only" adds contrastive clean/weather instance
    alignment; "full" uses both.
    """

    def __init__(
        self,
        mode: str = "full",
        steps: int = 500,
        batch_size: int = 8,
        lr: float = 0.02,
        lambda_style: float = 1.0,
        lambda_weather: float = 0.5,
        grl_lambda_max: float = 0.1,
        temperature: float = 0.2,
        num_classes: int = 3,
        channels: int = 64,
        embed_dim: int = 32,
        seed: int = 0,
        score_threshold: float = 0.05,
        nms_iou: float = 0.5,
        weather_views: WeatherConfig | None = None,
    ):
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_style = lambda_style
        self.lambda_weather = lambda_weather
        self.grl_lambda_max = grl_lambda_max
        self.temperature = temperature
        self.num_classes = num_classes
        self.channels = channels
        self.embed_dim = embed_dim
        self.seed = seed
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.weather_views = weather_views

    def fit(self, X, y, X_target=None):
        """Train on labeled clear images, optionally with unlabeled adverse ones."""
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        X = check_image_array(X, "X")
        boxes = check_boxes_list(y, X.shape[0], self.num_classes)
        source = [
            LabeledImage(pixels=X[i], boxes=boxes[i], domain=SOURCE_CLEAR, image_id=f"src_{i:05d}")
            for i in range(X.shape[0])
        ]
        target: list[LabeledImage] = []
        if X_target is not None:
            X_target = check_image_array(X_target, "X_target")
            target = [
                LabeledImage(pixels=X_target[i], boxes=None, domain=TARGET_ADVERSE, image_id=f"tgt_{i:05d}")
                for i in range(X_target.shape[0])
            ]
        if self.mode in ("style_only", "full") and not target:
            raise ValueError(f"mode {self.mode!r} requires X_target images")
        train_config = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            lambda_style=self.lambda_style,
            lambda_weather=self.lambda_weather,
            grl_lambda_max=self.grl_lambda_max,
            temperature=self.temperature,
            seed=self.seed,
            mode=self.mode,
        )
        model_config = ModelConfig(
            num_classes=self.num_classes, channels=self.channels, embed_dim=self.embed_dim
        )
        model = build_model(model_config, seeding.derive_seed(self.seed, seeding.INIT))
        trainer = Trainer(
            model,
            train_config,
            source,
            target,
            source_val=None,
            weather_cfg=self.weather_views or WeatherConfig(),
            eval_score_threshold=self.score_threshold,
            eval_nms_iou=self.nms_iou,
        )
        trainer.run(out_dir=None)
        self.model_ = model
        self.trainer_ = trainer
        return self

    def _require_fitted(self) -> AdaptiveDetector:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("this WeatherGapDetector instance is not fitted yet")
        return model

    def predict(self, X) -> list[np.ndarray]:
        """Detections per image: (M, 6) arrays of (x_min, y_min, x_max, y_max, score, class_id)."""
        model = self._require_fitted()
        X = check_image_array(X, "X")
        results = []
        for i in range(X.shape[0]):
            dets = predict_image(model, X[i], self.score_threshold, self.nms_iou)
            results.append(_detections_to_array(dets))
        return results

    def score(self, X, y) -> float:
        """mAP@0.5 of predictions against the given boxes."""
        model = self._require_fitted()
        X = check_image_array(X, "X")
        boxes = check_boxes_list(y, X.shape[0], self.num_classes)
        detections = {}
        ground_truth = {}
        for i in range(X.shape[0]):
            key = f"{i:05d}"
            detections[key] = predict_image(model, X[i], self.score_threshold, self.nms_iou)
            ground_truth[key] = boxes[i]
        report = evaluate_detections(detections, ground_truth, self.num_classes)
        return report.map50


def _detections_to_array(dets: list[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 6))
    return np.array(
        [[d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.score, d.class_id] for d in dets]
    )
