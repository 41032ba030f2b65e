"""Parametric, replayable image corruptions split into two families.

Style corruptions are global photometric shifts (tone curve, per-channel
color gain, contrast around mid-gray).  Weather corruptions veil scene
content: fog via the atmospheric scattering model, rain streaks, and snow
flakes.  All corruptions are photometric only, so bounding boxes of the
input image remain valid for the output.

Images are real-valued ``(3, H, W)`` arrays in [0, 1]; quantization to
8-bit happens only at file IO so the identity laws below hold bit-exactly
in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .seeding import rng_from

WEATHER_KINDS = ("fog", "rain", "snow")
DEPTH_MODES = ("constant", "vertical_gradient")


class ParameterError(ValueError):
    """A corruption parameter is outside its declared domain."""


@dataclass(frozen=True)
class StyleParams:
    """Global photometric shift: out = ((x**gamma * gain) - 0.5) * contrast + 0.5.

    gamma=1, color_gain=(1,1,1), contrast=1 is the identity element.
    """

    gamma: float = 1.0
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: float = 1.0

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if len(self.color_gain) != 3 or any(not g > 0 for g in self.color_gain):
            raise ParameterError(f"color_gain must be 3 positive reals, got {self.color_gain}")
        if self.contrast < 0:
            raise ParameterError(f"contrast must be >= 0, got {self.contrast}")

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1.0 and tuple(self.color_gain) == (1.0, 1.0, 1.0) and self.contrast == 1.0


@dataclass(frozen=True)
class WeatherParams:
    """Parameters for one weather corruption; which fields matter depends on `kind`.

    Zero-strength parameters (beta=0 / rain_count=0 / snow_density=0) make
    the respective kind an exact identity.
    """

    kind: str = "fog"
    # fog
    beta: float = 0.0
    airlight: tuple[float, float, float] = (0.9, 0.9, 0.9)
    depth_mode: str = "constant"
    depth: float = 1.0
    depth_range: tuple[float, float] = (0.5, 2.0)
    # rain
    rain_count: int = 0
    rain_angle: float = 0.0
    rain_length: float = 8.0
    rain_intensity: float = 0.3
    # snow
    snow_density: float = 0.0
    snow_flake_radius: float = 1.5

    def validate(self) -> None:
        if self.kind not in WEATHER_KINDS:
            raise ParameterError(f"unknown weather kind {self.kind!r}")
        if self.beta < 0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")
        if len(self.airlight) != 3 or any(a < 0 or a > 1 for a in self.airlight):
            raise ParameterError(f"airlight must lie in [0,1]^3, got {self.airlight}")
        if self.depth_mode not in DEPTH_MODES:
            raise ParameterError(f"unknown depth_mode {self.depth_mode!r}")
        if self.depth < 0 or any(d < 0 for d in self.depth_range):
            raise ParameterError("depths must be >= 0")
        if self.rain_count < 0 or int(self.rain_count) != self.rain_count:
            raise ParameterError(f"rain_count must be a non-negative integer, got {self.rain_count}")
        if not -45 <= self.rain_angle <= 45:
            raise ParameterError(f"rain_angle must lie in [-45,45] degrees, got {self.rain_angle}")
        if self.rain_length < 1:
            raise ParameterError(f"rain_length must be >= 1 pixel, got {self.rain_length}")
        if not 0 <= self.rain_intensity <= 1:
            raise ParameterError(f"rain_intensity must lie in [0,1], got {self.rain_intensity}")
        if not 0 <= self.snow_density <= 1:
            raise ParameterError(f"snow_density must lie in [0,1], got {self.snow_density}")
        if self.snow_flake_radius < 1:
            raise ParameterError(f"snow_flake_radius must be >= 1 pixel, got {self.snow_flake_radius}")

    @property
    def is_identity(self) -> bool:
        if self.kind == "fog":
            return self.beta == 0.0
        if self.kind == "rain":
            return self.rain_count == 0 or self.rain_intensity == 0.0
        return self.snow_density == 0.0


@dataclass(frozen=True)
class CorruptionRecord:
    """Everything needed to replay a corruption bit-exactly on the same input."""

    style: StyleParams | None = None
    weather: WeatherParams | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "style": asdict(self.style) if self.style is not None else None,
            "weather": asdict(self.weather) if self.weather is not None else None,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionRecord":
        style = d.get("style")
        weather = d.get("weather")
        if style is not None:
            style = StyleParams(
                gamma=style["gamma"],
                color_gain=tuple(style["color_gain"]),
                contrast=style["contrast"],
            )
        if weather is not None:
            weather = WeatherParams(
                kind=weather["kind"],
                beta=weather["beta"],
                airlight=tuple(weather["airlight"]),
                depth_mode=weather["depth_mode"],
                depth=weather["depth"],
                depth_range=tuple(weather["depth_range"]),
                rain_count=weather["rain_count"],
                rain_angle=weather["rain_angle"],
                rain_length=weather["rain_length"],
                rain_intensity=weather["rain_intensity"],
                snow_density=weather["snow_density"],
                snow_flake_radius=weather["snow_flake_radius"],
            )
        return cls(style=style, weather=weather, seed=int(d.get("seed", 0)))


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ParameterError(f"expected (3, H, W) image, got shape {image.shape}")
    return image


def apply_style(image: np.ndarray, p: StyleParams) -> np.ndarray:
    """Apply the power-law tone curve, color gain, and contrast scaling.

    Identity parameters return a bit-exact copy.
    """
    image = _check_image(image)
    p.validate()
    if p.is_identity:
        return image.copy()
    gain = np.asarray(p.color_gain, dtype=np.float64).reshape(3, 1, 1)
    out = np.power(image, p.gamma) * gain
    out = (out - 0.5) * p.contrast + 0.5
    return np.clip(out, 0.0, 1.0)


def _depth_map(p: WeatherParams, height: int, width: int) -> np.ndarray:
    if p.depth_mode == "constant":
        return np.full((height, width), float(p.depth))
    # Vertical gradient: top of frame is far (d_max), bottom is near (d_min).
    d_min, d_max = p.depth_range
    rows = np.linspace(d_max, d_min, height).reshape(height, 1)
    return np.broadcast_to(rows, (height, width)).copy()


def apply_fog(image: np.ndarray, p: WeatherParams) -> np.ndarray:
    """Atmospheric scattering: I = J*exp(-beta*d) + A*(1 - exp(-beta*d))."""
    image = _check_image(image)
    p.validate()
    if p.kind != "fog":
        raise ParameterError(f"apply_fog requires kind='fog', got {p.kind!r}")
    if p.beta == 0.0:
        return image.copy()
    _, h, w = image.shape
    t = np.exp(-p.beta * _depth_map(p, h, w))[None, :, :]
    airlight = np.asarray(p.airlight, dtype=np.float64).reshape(3, 1, 1)
    out = image * t + airlight * (1.0 - t)
    return np.clip(out, 0.0, 1.0)


def _add_segment(mask: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> None:
    """Accumulate an anti-aliased line segment into `mask` (max-blend).

    One-pixel core (distance <= 0.5) at full weight, linear falloff to zero
    at distance 1.0; pixels touched stay within a 3-pixel-wide band.
    """
    h, w = mask.shape
    r0 = max(int(math.floor(min(y0, y1) - 1)), 0)
    r1 = min(int(math.ceil(max(y0, y1) + 1)), h - 1)
    c0 = max(int(math.floor(min(x0, x1) - 1)), 0)
    c1 = min(int(math.ceil(max(x0, x1) + 1)), w - 1)
    if r0 > r1 or c0 > c1:
        return
    ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    px = xs + 0.5
    py = ys + 0.5
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        dist = np.hypot(px - x0, py - y0)
    else:
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / seg_len2, 0.0, 1.0)
        dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
    weight = np.clip(2.0 * (1.0 - dist), 0.0, 1.0)
    region = mask[r0 : r1 + 1, c0 : c1 + 1]
    np.maximum(region, weight, out=region)


def apply_rain(image: np.ndarray, p: WeatherParams, seed: int) -> np.ndarray:
    """Rasterize `rain_count` bright streaks of the given length/angle."""
    image = _check_image(image)
    p.validate()
    if p.kind != "rain":
        raise ParameterError(f"apply_rain requires kind='rain', got {p.kind!r}")
    if p.is_identity:
        return image.copy()
    _, h, w = image.shape
    rng = rng_from(seed)
    mask = np.zeros((h, w))
    theta = math.radians(p.rain_angle)
    # The soft border adds ~1 px at each end, so the rasterized core is
    # shortened to keep a streak's footprint within rain_length * 3 pixels.
    core = max(p.rain_length - 2.0, 0.0)
    dx = math.sin(theta) * core
    dy = math.cos(theta) * core
    # Midpoints uniform over the frame; streaks are rasterized in draw order
    # so overlaps resolve deterministically (max-blend is order-free anyway).
    starts = rng.uniform(0.0, [w, h], size=(int(p.rain_count), 2))
    for x_mid, y_mid in starts:
        _add_segment(mask, x_mid - dx / 2, y_mid - dy / 2, x_mid + dx / 2, y_mid + dy / 2)
    out = image + p.rain_intensity * mask[None, :, :]
    return np.clip(out, 0.0, 1.0)


def apply_snow(image: np.ndarray, p: WeatherParams, seed: int) -> np.ndarray:
    """Scatter disc-shaped bright flakes; flake count scales with density."""
    image = _check_image(image)
    p.validate()
    if p.kind != "snow":
        raise ParameterError(f"apply_snow requires kind='snow', got {p.kind!r}")
    if p.is_identity:
        return image.copy()
    _, h, w = image.shape
    rng = rng_from(seed)
    n_flakes = int(round(p.snow_density * h * w / 64.0))
    if n_flakes == 0:
        return image.copy()
    mask = np.zeros((h, w))
    centers = rng.uniform(0.0, [w, h], size=(n_flakes, 2))
    brightness = rng.uniform(0.6, 1.0, size=n_flakes)
    radius = float(p.snow_flake_radius)
    for (cx, cy), b in zip(centers, brightness):
        r0 = max(int(math.floor(cy - radius - 1)), 0)
        r1 = min(int(math.ceil(cy + radius + 1)), h - 1)
        c0 = max(int(math.floor(cx - radius - 1)), 0)
        c1 = min(int(math.ceil(cx + radius + 1)), w - 1)
        if r0 > r1 or c0 > c1:
            continue
        ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        dist = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy)
        weight = b * np.clip(radius + 0.5 - dist, 0.0, 1.0)
        region = mask[r0 : r1 + 1, c0 : c1 + 1]
        np.maximum(region, weight, out=region)
    out = image + mask[None, :, :]
    return np.clip(out, 0.0, 1.0)


def apply_weather(image: np.ndarray, p: WeatherParams, seed: int) -> np.ndarray:
    """Dispatch to the corruption for `p.kind` (fog is seed-free)."""
    if p.kind == "fog":
        return apply_fog(image, p)
    if p.kind == "rain":
        return apply_rain(image, p, seed)
    if p.kind == "snow":
        return apply_snow(image, p, seed)
    raise ParameterError(f"unknown weather kind {p.kind!r}")


def corrupt(image: np.ndarray, record: CorruptionRecord) -> tuple[np.ndarray, CorruptionRecord]:
    """Apply style then weather (fixed order) and return the record used.

    Corruptions are photometric only, so geometry (and any ground-truth
    boxes) of the input stays valid for the output.
    """
    out = _check_image(image).copy()
    if record.style is not None:
        out = apply_style(out, record.style)
    if record.weather is not None:
        out = apply_weather(out, record.weather, record.seed)
    return out, record


# --- parameter sampling -----------------------------------------------------
#
# Range configs used by the dataset builder and by contrastive view
# construction; sampling is driven by an explicit Generator so every draw
# is replayable.


@dataclass
class StyleConfig:
    """Uniform sampling ranges for StyleParams."""

    gamma_range: tuple[float, float] = (0.55, 1.8)
    color_gain_range: tuple[float, float] = (0.65, 1.35)
    contrast_range: tuple[float, float] = (0.55, 1.35)


@dataclass
class WeatherConfig:
    """Sampling ranges for WeatherParams; `kinds` picks the active family."""

    kinds: tuple[str, ...] = ("fog", "rain", "snow")
    fog_beta_range: tuple[float, float] = (0.5, 1.6)
    fog_airlight_range: tuple[float, float] = (0.75, 0.95)
    fog_depth_modes: tuple[str, ...] = ("constant", "vertical_gradient")
    fog_depth_range: tuple[float, float] = (0.8, 2.0)
    rain_count_range: tuple[int, int] = (50, 140)
    rain_angle_range: tuple[float, float] = (-30.0, 30.0)
    rain_length_range: tuple[float, float] = (6.0, 14.0)
    rain_intensity_range: tuple[float, float] = (0.3, 0.65)
    snow_density_range: tuple[float, float] = (0.15, 0.5)
    snow_flake_radius_range: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self) -> None:
        unknown = set(self.kinds) - set(WEATHER_KINDS)
        if unknown:
            raise ParameterError(f"unknown weather kinds {sorted(unknown)}")


def sample_style_params(rng: np.random.Generator, cfg: StyleConfig) -> StyleParams:
    gains = tuple(float(g) for g in rng.uniform(*cfg.color_gain_range, size=3))
    return StyleParams(
        gamma=float(rng.uniform(*cfg.gamma_range)),
        color_gain=gains,
        contrast=float(rng.uniform(*cfg.contrast_range)),
    )


def sample_weather_params(rng: np.random.Generator, cfg: WeatherConfig) -> WeatherParams:
    kind = cfg.kinds[int(rng.integers(0, len(cfg.kinds)))]
    if kind == "fog":
        base = float(rng.uniform(*cfg.fog_airlight_range))
        airlight = tuple(float(np.clip(base + rng.uniform(-0.02, 0.02), 0.0, 1.0)) for _ in range(3))
        mode = cfg.fog_depth_modes[int(rng.integers(0, len(cfg.fog_depth_modes)))]
        lo, hi = cfg.fog_depth_range
        d_a, d_b = sorted(float(rng.uniform(lo, hi)) for _ in range(2))
        return WeatherParams(
            kind="fog",
            beta=float(rng.uniform(*cfg.fog_beta_range)),
            airlight=airlight,
            depth_mode=mode,
            depth=d_b,
            depth_range=(d_a, d_b),
        )
    if kind == "rain":
        return WeatherParams(
            kind="rain",
            rain_count=int(rng.integers(cfg.rain_count_range[0], cfg.rain_count_range[1] + 1)),
            rain_angle=float(rng.uniform(*cfg.rain_angle_range)),
            rain_length=float(rng.uniform(*cfg.rain_length_range)),
            rain_intensity=float(rng.uniform(*cfg.rain_intensity_range)),
        )
    return WeatherParams(
        kind="snow",
        snow_density=float(rng.uniform(*cfg.snow_density_range)),
        snow_flake_radius=float(rng.uniform(*cfg.snow_flake_radius_range)),
    )
