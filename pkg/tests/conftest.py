import numpy as np
import pytest
import torch

from weathergap.model import AdaptiveDetector, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def random_image(rng):
    return rng.uniform(0.0, 1.0, size=(3, 32, 32))


def tiny_model(num_classes: int = 2, channels: int = 8, seed: int = 7) -> AdaptiveDetector:
    """Small double-precision model for gradient checks (a few hundred params)."""
    torch.manual_seed(seed)
    model = AdaptiveDetector(ModelConfig(num_classes=num_classes, channels=channels, embed_dim=4, discriminator_hidden=8))
    return model.double()


def finite_difference_grads(fn, params: list[torch.Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued fn w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(p.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2 * eps)
            grads.append(g.reshape(p.shape))
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
