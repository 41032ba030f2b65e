"""Joint training loop: detection on labeled source data plus the two
alignment losses on source/target batches.

One SGD+momentum optimizer owns all parameters; the gradient reversal
layer turns discriminator descent into adversarial backbone training, so
no alternating optimizers are needed.  Every step draws one source batch
and one target batch; the contrastive branch corrupts the source batch's
images for its weather views.  All randomness is derived from the config
seed via counter-based splitting.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import seeding
from .corruption import WeatherConfig
from .detector import assign_targets, detection_loss
from .evaluator import evaluate_detections, predict_image
from .model import AdaptiveDetector, ModelConfig, build_model
from .scenes import SOURCE_CLEAR, TARGET_ADVERSE, BoundingBox, LabeledImage, atomic_text_write
from .style_align import adversarial_style_loss, grl_lambda
from .weather_contrast import weather_alignment_loss

MODES = ("source_only", "style_only", "weather_only", "full")
CSV_COLUMNS = ("step", "L_det", "L_sty", "L_wea", "total", "grl_lambda", "pos_cosine", "val_map")


class LabelLeakError(RuntimeError):
    """Training tried to touch target-domain labels."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8  # per domain
    lr: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 10.0
    lambda_style: float = 1.0
    lambda_weather: float = 0.5
    grl_lambda_max: float = 1.0
    temperature: float = 0.2
    seed: int = 0
    mode: str = "full"
    val_every: int = 250
    checkpoint_every: int = 1000
    # The discriminator must track the moving feature distribution; at the
    # shared lr it lags behind and the reversed gradient degrades to noise.
    discriminator_lr_scale: float = 10.0
    use_target_pseudo_instances: bool = False
    pseudo_score_threshold: float = 0.8

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.lambda_style, self.lambda_weather, self.grl_lambda_max) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def style_active(self) -> bool:
        return self.mode in ("style_only", "full")

    @property
    def weather_active(self) -> bool:
        return self.mode in ("weather_only", "full")


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.10g}"


class Trainer:
    """Owns all mutable training state; one instance per run."""

    def __init__(
        self,
        model: AdaptiveDetector,
        config: TrainConfig,
        source_train: list[LabeledImage],
        target_train: list[LabeledImage] | None,
        source_val: list[LabeledImage] | None = None,
        weather_cfg: WeatherConfig | None = None,
        eval_score_threshold: float = 0.05,
        eval_nms_iou: float = 0.5,
    ):
        config.validate()
        if not source_train:
            raise ValueError("source_train must be non-empty")
        if config.style_active and not target_train:
            raise ValueError(f"mode {config.mode!r} needs target_train images")
        self.model = model
        self.config = config
        self.source_train = source_train
        self.target_train = target_train or []
        self.source_val = source_val
        self.weather_cfg = weather_cfg or WeatherConfig()
        self.eval_score_threshold = eval_score_threshold
        self.eval_nms_iou = eval_nms_iou
        self.dtype = next(model.parameters()).dtype
        fast = list(model.style_discriminator.parameters())
        fast_ids = {id(p) for p in fast}
        base = [p for p in model.parameters() if id(p) not in fast_ids]
        self.optimizer = torch.optim.SGD(
            [{"params": base}, {"params": fast, "lr": config.lr * config.discriminator_lr_scale}],
            lr=config.lr,
            momentum=config.momentum,
        )
        self.sampler = seeding.rng_from(seeding.derive_seed(config.seed, seeding.BATCH))
        self.step = 0
        self.best_val_map = float("-inf")
        self.best_step = -1
        self.rows: list[dict] = []

    # --- data ---------------------------------------------------------------

    def _draw_batches(self) -> tuple[list[LabeledImage], list[LabeledImage]]:
        # Both batches are always drawn so every mode sees the same source
        # batch sequence for a given seed.
        idx_s = self.sampler.integers(0, len(self.source_train), size=self.config.batch_size)
        source = [self.source_train[i] for i in idx_s]
        target: list[LabeledImage] = []
        if self.target_train:
            idx_t = self.sampler.integers(0, len(self.target_train), size=self.config.batch_size)
            target = [self.target_train[i] for i in idx_t]
        return source, target

    def _check_batches(self, source_batch: list[LabeledImage], target_batch: list[LabeledImage]) -> None:
        for item in source_batch:
            if item.domain != SOURCE_CLEAR or item.boxes is None:
                raise LabelLeakError("source batch must consist of labeled source_clear images")
        if self.config.style_active or (self.config.weather_active and self.config.use_target_pseudo_instances):
            for item in target_batch:
                if item.domain != TARGET_ADVERSE:
                    raise LabelLeakError("target batch must consist of target_adverse images")
                if item.boxes is not None:
                    raise LabelLeakError("target batch carries labels; the training path must never see them")

    # --- losses ---------------------------------------------------------------

    def total_loss(
        self, source_batch: list[LabeledImage], target_batch: list[LabeledImage], step: int
    ) -> tuple[torch.Tensor, dict]:
        cfg = self.config
        self._check_batches(source_batch, target_batch)
        pixels = torch.from_numpy(np.stack([x.pixels for x in source_batch])).to(self.dtype)
        fmap, preds = self.model(pixels)
        targets = [
            assign_targets(x.boxes, (fmap.values.shape[2], fmap.values.shape[3]), fmap.stride)
            for x in source_batch
        ]
        det_total, det_parts = detection_loss(preds, targets)
        lam = grl_lambda(step, cfg.steps, cfg.grl_lambda_max)
        components = {
            "L_det": float(det_total.detach()),
            "L_sty": 0.0,
            "L_wea": 0.0,
            "grl_lambda": lam,
            "pos_cosine": None,
            "det_parts": det_parts,
        }
        if cfg.mode == "source_only":
            return det_total, components

        total = det_total
        if cfg.style_active:
            t_pixels = torch.from_numpy(np.stack([x.pixels for x in target_batch])).to(self.dtype)
            target_fmap = self.model.features(t_pixels)
            sty_loss, _ = adversarial_style_loss(
                fmap, target_fmap, self.model.style_attention, self.model.style_discriminator, lam
            )
            components["L_sty"] = float(sty_loss.detach())
            total = total + cfg.lambda_style * sty_loss
        if cfg.weather_active:
            wea_loss, info = weather_alignment_loss(
                source_batch,
                self.model.backbone,
                self.model.projector,
                self.weather_cfg,
                seeding.derive_seed(cfg.seed, seeding.VIEWS, step),
                cfg.temperature,
            )
            if cfg.use_target_pseudo_instances and target_batch:
                extra = self._pseudo_instance_loss(target_batch, step)
                if extra is not None:
                    wea_loss = wea_loss + extra
            components["L_wea"] = float(wea_loss.detach())
            components["pos_cosine"] = info["pos_cosine"] if not info["skipped"] else None
            total = total + cfg.lambda_weather * wea_loss
        return total, components

    def _pseudo_instance_loss(self, target_batch: list[LabeledImage], step: int):
        """Optional extra anchors: high-confidence target detections paired with
        a re-corrupted view of their image."""
        boxes_per_image = [
            pseudo_boxes(
                self.model, item.pixels, self.config.pseudo_score_threshold, self.eval_nms_iou
            )
            for item in target_batch
        ]
        if sum(len(b) for b in boxes_per_image) < 2:
            return None
        pseudo_items = [
            LabeledImage(pixels=item.pixels, boxes=boxes, domain=SOURCE_CLEAR, image_id=item.image_id)
            for item, boxes in zip(target_batch, boxes_per_image)
            if boxes
        ]
        loss, _ = weather_alignment_loss(
            pseudo_items,
            self.model.backbone,
            self.model.projector,
            self.weather_cfg,
            seeding.derive_seed(self.config.seed, seeding.VIEWS, step, 1),
            self.config.temperature,
        )
        return loss

    # --- optimization ---------------------------------------------------------

    def train_step(self, source_batch: list[LabeledImage], target_batch: list[LabeledImage]) -> dict:
        """One optimizer update; returns the logged components."""
        self.optimizer.zero_grad()
        total, components = self.total_loss(source_batch, target_batch, self.step)
        value = float(total.detach())
        if not np.isfinite(value):
            raise TrainingDiverged(self.step, components)
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.clip_norm)
        self.optimizer.step()
        self.step += 1
        components["total"] = value
        return components

    def _validate(self) -> float:
        detections = {}
        ground_truth = {}
        self.model.eval()
        for i, item in enumerate(self.source_val):
            image_id = item.image_id or f"val_{i:05d}"
            detections[image_id] = predict_image(
                self.model, item.pixels, self.eval_score_threshold, self.eval_nms_iou
            )
            ground_truth[image_id] = list(item.boxes)
        self.model.train()
        report = evaluate_detections(detections, ground_truth, self.model.cfg.num_classes)
        return report.map50

    # --- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        momentum_arrays = {}
        state = {p: n for n, p in self.model.named_parameters()}
        for param, opt_state in self.optimizer.state.items():
            buf = opt_state.get("momentum_buffer")
            if buf is not None:
                momentum_arrays[f"momentum/{state[param]}"] = buf.detach().numpy().copy()
        meta = {
            "step": self.step,
            "best_val_map": self.best_val_map,
            "best_step": self.best_step,
            "train_config": asdict(self.config),
            "rng": {
                "sampler": json.dumps(self.sampler.bit_generator.state),
                "torch": torch.get_rng_state().numpy().tobytes().hex(),
            },
        }
        self.model.save(path, meta=meta, extra_arrays=momentum_arrays)

    @classmethod
    def resume(
        cls,
        checkpoint_path: str,
        source_train: list[LabeledImage],
        target_train: list[LabeledImage] | None,
        source_val: list[LabeledImage] | None = None,
        weather_cfg: WeatherConfig | None = None,
        **kwargs,
    ) -> "Trainer":
        model, meta, extra = AdaptiveDetector.load(checkpoint_path)
        config = TrainConfig(**meta["train_config"])
        trainer = cls(model, config, source_train, target_train, source_val, weather_cfg, **kwargs)
        trainer.step = int(meta["step"])
        trainer.best_val_map = float(meta["best_val_map"])
        trainer.best_step = int(meta["best_step"])
        trainer.sampler.bit_generator.state = json.loads(meta["rng"]["sampler"])
        torch.set_rng_state(torch.frombuffer(bytearray.fromhex(meta["rng"]["torch"]), dtype=torch.uint8))
        params = dict(model.named_parameters())
        for name, arr in extra.items():
            if name.startswith("momentum/"):
                p = params[name[len("momentum/") :]]
                trainer.optimizer.state[p] = {"momentum_buffer": torch.from_numpy(arr.copy())}
        return trainer

    # --- main loop ----------------------------------------------------------------

    def run(self, out_dir: str | None = None) -> dict:
        """Train to config.steps, validating and checkpointing along the way.

        Returns {"final_checkpoint", "best_checkpoint", "metrics_csv"} (paths
        are None when out_dir is None).
        """
        cfg = self.config
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        final_path = os.path.join(out_dir, "final.ckpt") if out_dir else None
        best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
        csv_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
        wrote_best = False
        try:
            while self.step < cfg.steps:
                source_batch, target_batch = self._draw_batches()
                components = self.train_step(source_batch, target_batch)
                val_map = None
                is_last = self.step >= cfg.steps
                if self.source_val is not None and (self.step % cfg.val_every == 0 or is_last):
                    val_map = self._validate()
                    if val_map > self.best_val_map:
                        self.best_val_map = val_map
                        self.best_step = self.step
                        if not is_last and out_dir is not None:
                            self.save_checkpoint(best_path)
                            wrote_best = True
                self.rows.append(
                    {
                        "step": self.step,
                        "L_det": components["L_det"],
                        "L_sty": components["L_sty"],
                        "L_wea": components["L_wea"],
                        "total": components["total"],
                        "grl_lambda": components["grl_lambda"],
                        "pos_cosine": components["pos_cosine"],
                        "val_map": val_map,
                    }
                )
                if out_dir is not None and cfg.checkpoint_every > 0 and self.step % cfg.checkpoint_every == 0 and not is_last:
                    self.save_checkpoint(os.path.join(out_dir, f"step_{self.step:06d}.ckpt"))
        finally:
            if out_dir is not None and self.rows:
                self._write_csv(csv_path)
        if out_dir is not None:
            self.save_checkpoint(final_path)
        return {
            "final_checkpoint": final_path,
            "best_checkpoint": best_path if wrote_best else None,
            "metrics_csv": csv_path,
            "best_val_map": self.best_val_map,
        }

    def _write_csv(self, path: str) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(
                ",".join(
                    [
                        str(row["step"]),
                        _fmt(row["L_det"]),
                        _fmt(row["L_sty"]),
                        _fmt(row["L_wea"]),
                        _fmt(row["total"]),
                        _fmt(row["grl_lambda"]),
                        _fmt(row["pos_cosine"]),
                        _fmt(row["val_map"]),
                    ]
                )
            )
        atomic_text_write(path, "\n".join(lines) + "\n")


def pseudo_boxes(
    model: AdaptiveDetector, pixels: np.ndarray, score_threshold: float = 0.8, nms_iou: float = 0.5
) -> list[BoundingBox]:
    """High-confidence detections on an unlabeled image, as surrogate boxes."""
    dets = predict_image(model, pixels, score_threshold, nms_iou)
    return [d.box for d in dets]


def train(
    train_config: TrainConfig,
    model_config: ModelConfig,
    manifest_path: str,
    out_dir: str,
    weather_cfg: WeatherConfig | None = None,
    eval_score_threshold: float = 0.05,
    eval_nms_iou: float = 0.5,
) -> dict:
    """Train from a dataset manifest; writes checkpoints and the metrics CSV."""
    from .scenes import load_split

    source_train = load_split(manifest_path, "source_train")
    target_train = load_split(manifest_path, "target_train")
    source_val = load_split(manifest_path, "source_test")
    model = build_model(model_config, seeding.derive_seed(train_config.seed, seeding.INIT))
    trainer = Trainer(
        model,
        train_config,
        source_train,
        target_train,
        source_val,
        weather_cfg,
        eval_score_threshold,
        eval_nms_iou,
    )
    return trainer.run(out_dir)
