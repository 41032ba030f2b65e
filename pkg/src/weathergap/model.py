"""The full trainable model: detector plus both alignment heads.

All modes build the same module tree from the same seed so that adapted
runs and the source-only baseline start from identical detector weights.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .detector import Backbone, DetectionHead, FeatureMap, RawPredictions
from .style_align import StyleAttention, StyleDiscriminator
from .weather_contrast import ProjectionHead


@dataclass
class ModelConfig:
    num_classes: int = 3
    channels: int = 64
    embed_dim: int = 32
    discriminator_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class AdaptiveDetector(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.backbone = Backbone(self.cfg.channels)
        self.head = DetectionHead(self.cfg.channels, self.cfg.num_classes)
        self.style_attention = StyleAttention(self.cfg.channels)
        self.style_discriminator = StyleDiscriminator(self.cfg.channels, self.cfg.discriminator_hidden)
        self.projector = ProjectionHead(self.cfg.channels, self.cfg.embed_dim)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def features(self, images: torch.Tensor) -> FeatureMap:
        return self.backbone(images)

    def forward(self, images: torch.Tensor) -> tuple[FeatureMap, RawPredictions]:
        fmap = self.backbone(images)
        return fmap, self.head(fmap)

    # --- checkpointing -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"model/{k}": v.detach().numpy().copy() for k, v in self.state_dict().items()}

    def save(self, path: str, meta: dict | None = None, extra_arrays: dict[str, np.ndarray] | None = None) -> None:
        header = dict(meta or {})
        header["model_config"] = self.cfg.to_dict()
        arrays = self.state_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path: str) -> tuple["AdaptiveDetector", dict, dict[str, np.ndarray]]:
        """Rebuild a model from a checkpoint; returns (model, meta, other arrays)."""
        header, arrays = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(header["model_config"]))
        state = {}
        extra = {}
        for name, arr in arrays.items():
            if name.startswith("model/"):
                state[name[len("model/") :]] = torch.from_numpy(arr)
            else:
                extra[name] = arr
        model.load_state_dict(state)
        return model, header, extra


def build_model(cfg: ModelConfig, init_seed: int) -> AdaptiveDetector:
    """Construct a model with reproducible initialization."""
    torch.manual_seed(init_seed & 0x7FFFFFFFFFFFFFFF)
    return AdaptiveDetector(cfg)
