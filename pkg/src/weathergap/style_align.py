"""Image-level style alignment.

The style of a feature map is summarized by its per-channel spatial mean
and standard deviation.  A small attention module gates channels from
those statistics, and a domain discriminator is trained on the gated
style vectors through a gradient reversal layer, so the backbone learns
features whose style statistics do not give the domain away.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .detector import FeatureMap

STYLE_EPS = 1e-5


def style_stats(f: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel spatial mean and std of a batched feature map -> (B, C) each.

    std = sqrt(spatial variance + eps) so constant channels stay differentiable.
    """
    values = f.values
    if values.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) values, got {tuple(values.shape)}")
    if values.shape[2] * values.shape[3] < 2:
        raise ValueError("feature map needs at least 2 spatial cells for style statistics")
    mean = values.mean(dim=(2, 3))
    var = values.var(dim=(2, 3), unbiased=False)
    return mean, torch.sqrt(var + STYLE_EPS)


class GradientReversal(torch.autograd.Function):
    """Identity forward; backward multiplies the upstream gradient by -lambda."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.lam * grad_output, None


def grl(x: torch.Tensor, lam: float) -> torch.Tensor:
    return GradientReversal.apply(x, lam)


def grl_lambda(step: int, total_steps: int, lambda_max: float) -> float:
    """Warmup schedule: 0 at step 0, saturating towards lambda_max."""
    if total_steps <= 0:
        return lambda_max
    progress = step / total_steps
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


class StyleAttention(nn.Module):
    """Bottleneck MLP mapping concat(mean, std) to per-channel gates in (0,1)."""

    def __init__(self, channels: int, bottleneck: int | None = None):
        super().__init__()
        bottleneck = bottleneck or max(channels // 4, 1)
        self.fc1 = nn.Linear(2 * channels, bottleneck)
        self.fc2 = nn.Linear(bottleneck, channels)
        self.channels = channels
        # Neutral gates (w = 0.5) at init.
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
        x = torch.cat([mean, std], dim=-1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x))))


class StyleDiscriminator(nn.Module):
    """Two-layer MLP from a gated style vector (2C) to a single domain logit."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        # Uninformative at init: logit 0 for every input.
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, gated_style: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(gated_style))).squeeze(-1)


def gated_style_vector(
    f: FeatureMap, attention: StyleAttention
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gate the style statistics channelwise: concat(w*mean, w*std) -> (B, 2C)."""
    mean, std = style_stats(f)
    w = attention(mean, std)
    return torch.cat([w * mean, w * std], dim=-1), w


def adversarial_style_loss(
    source_f: FeatureMap,
    target_f: FeatureMap,
    attention: StyleAttention,
    discriminator: StyleDiscriminator,
    lam: float,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Domain BCE on gated style vectors seen through the gradient reversal.

    Source carries label 0, target label 1; the loss is the sum of the two
    per-domain batch means.  The discriminator descends this loss while
    everything upstream of the reversal ascends it, scaled by `lam`.
    """
    if source_f.values.shape[1] != target_f.values.shape[1]:
        raise ValueError("source and target feature maps must share channel count")
    gated_s, w_s = gated_style_vector(source_f, attention)
    gated_t, w_t = gated_style_vector(target_f, attention)
    logit_s = discriminator(grl(gated_s, lam))
    logit_t = discriminator(grl(gated_t, lam))
    loss = F.binary_cross_entropy_with_logits(
        logit_s, torch.zeros_like(logit_s)
    ) + F.binary_cross_entropy_with_logits(logit_t, torch.ones_like(logit_t))
    with torch.no_grad():
        acc = 0.5 * (float((logit_s < 0).double().mean()) + float((logit_t >= 0).double().mean()))
        mean_gate = float(torch.cat([w_s, w_t]).mean())
    info = {
        "discriminator_accuracy": acc,
        "mean_gate": mean_gate,
    }
    return loss, info
