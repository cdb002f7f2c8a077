"""Seeded synthetic weather degradations over procedural clean scenes.

Images are float64 arrays shaped [3, H, W] with values in [0, 1]. All fog
and attenuation goes through :func:`apply_scattering`; rain streaks,
raindrops and snowflakes are then composited on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .tasks import Task


class ScatteringError(ValueError):
    pass


@dataclass
class ScatteringParams:
    e_inf: float
    beta: float
    depth_map: np.ndarray

    def validate(self, shape=None) -> None:
        if not 0.0 < self.e_inf <= 1.0:
            raise ScatteringError(f"e_inf must lie in (0, 1], got {self.e_inf}")
        if not self.beta >= 0.0:
            raise ScatteringError(f"beta must be >= 0, got {self.beta}")
        d = np.asarray(self.depth_map, dtype=np.float64)
        if not np.all(np.isfinite(d)):
            raise ScatteringError("depth map contains non-finite values")
        if np.any(d < 0):
            raise ScatteringError("depth map contains negative distances")
        if shape is not None and d.shape != tuple(shape):
            raise ScatteringError(f"depth map shape {d.shape} does not match image {tuple(shape)}")


@dataclass
class RainGeometry:
    count: int = 60
    length: float = 9.0
    angle_deg: float = 15.0
    width: float = 0.8
    brightness: float = 0.8


@dataclass
class RaindropGeometry:
    count: int = 6
    radius: float = 4.0
    blur_sigma: float = 2.0


@dataclass
class SnowGeometry:
    count: int = 40
    radius_min: float = 0.7
    radius_max: float = 2.2


@dataclass
class DegradationSpec:
    task: Task
    seed: int
    scattering: ScatteringParams
    intensity: float = 0.5
    geometry: object = field(default=None)


def apply_scattering(clean: np.ndarray, p: ScatteringParams) -> np.ndarray:
    """Attenuated direct transmission plus airlight, per pixel and channel.

    ``E = e_inf * rho * exp(-beta d) + e_inf * (1 - exp(-beta d))``
    """
    clean = np.asarray(clean, dtype=np.float64)
    p.validate(clean.shape[-2:])
    if not np.all(np.isfinite(clean)):
        raise ScatteringError("clean image contains non-finite values")
    t = np.exp(-p.beta * np.asarray(p.depth_map, dtype=np.float64))
    return p.e_inf * clean * t + p.e_inf * (1.0 - t)


# ---------------------------------------------------------------- clean scenes

def _scene(seed: int, size):
    h, w = size
    if h < 8 or w < 8:
        raise ValueError(f"scene size must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng([int(seed), 0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h - 1
    xx /= w - 1

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    # far at the top of the frame, near at the bottom
    far, near = rng.uniform(2.0, 3.0), rng.uniform(0.3, 0.8)
    depth = far + (near - far) * yy

    for _ in range(rng.integers(3, 8)):
        colour = rng.uniform(0.0, 1.0, 3)
        d_obj = rng.uniform(near, far)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            hh, hw = rng.uniform(0.08, 0.3, 2)
            region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:
            r = rng.uniform(0.08, 0.25)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, region] = colour[:, None]
        depth[region] = d_obj
    return np.clip(img, 0.0, 1.0), depth


def synthesize_clean(seed: int, size=(32, 32)) -> np.ndarray:
    """Procedural scene: a two-colour gradient with random rectangles and discs."""
    return _scene(seed, size)[0]


def scene_depth(seed: int, size=(32, 32)) -> np.ndarray:
    """Optical distance map matching :func:`synthesize_clean` geometry."""
    return _scene(seed, size)[1]


# ---------------------------------------------------------------- artifacts

def _segment_distance(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    L2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def _render_rain(img, g: RainGeometry, rng):
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    alpha = np.zeros((h, w))
    a = np.deg2rad(g.angle_deg)
    # direction of fall: mostly downward, tilted by the angle
    uy, ux = np.cos(a), np.sin(a)
    for _ in range(g.count):
        cy, cx = rng.uniform(-2, h + 2), rng.uniform(-2, w + 2)
        half = 0.5 * g.length * rng.uniform(0.6, 1.4)
        d = _segment_distance(yy, xx, cy - half * uy, cx - half * ux, cy + half * uy, cx + half * ux)
        cover = np.clip(1.0 - d / (g.width + 0.5), 0.0, 1.0)
        alpha = np.maximum(alpha, cover * g.brightness * rng.uniform(0.6, 1.0))
    return img * (1.0 - alpha) + alpha * 0.92


def _render_raindrops(img, g: RaindropGeometry, rng):
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    blurred = np.stack([gaussian_filter(ch, g.blur_sigma, mode="nearest") for ch in img])
    out = img
    for _ in range(g.count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = g.radius * rng.uniform(0.7, 1.3)
        rx = ry * rng.uniform(0.6, 1.0)
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        m = np.clip((1.0 - r) / 0.25, 0.0, 1.0)
        # drops act as small lenses: darker, blurred content plus a highlight near the top-left
        hy, hx = cy - 0.4 * ry, cx - 0.35 * rx
        spec = np.exp(-((yy - hy) ** 2 + (xx - hx) ** 2) / (2 * (0.25 * rx) ** 2 + 1e-12))
        content = np.clip(0.85 * blurred + 0.1 + 0.6 * spec[None], 0.0, 1.0)
        out = out * (1.0 - m) + content * m
    return out


def _render_snow(img, g: SnowGeometry, rng):
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    alpha = np.zeros((h, w))
    for _ in range(g.count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(g.radius_min, g.radius_max)
        d = np.hypot(yy - cy, xx - cx)
        soft = np.clip((r + 0.5 - d) / (0.5 * r + 0.5), 0.0, 1.0)
        alpha = np.maximum(alpha, soft * rng.uniform(0.7, 1.0))
    return img * (1.0 - alpha) + alpha * 0.97


def degrade(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Scatter, then composite the task's artifact layer; result clamped to [0, 1]."""
    try:
        task = Task(spec.task)
    except ValueError:
        raise ValueError(f"unknown task {spec.task!r}") from None
    out = apply_scattering(clean, spec.scattering)
    g = spec.geometry if spec.geometry is not None else _default_geometry(task, spec.intensity)
    rng = np.random.default_rng([int(spec.seed), 1, int(task)])
    if task is Task.RAIN:
        out = _render_rain(out, g, rng)
    elif task is Task.RAINDROP:
        out = _render_raindrops(out, g, rng)
    else:
        out = _render_snow(out, g, rng)
    return np.clip(out, 0.0, 1.0)


def _default_geometry(task: Task, intensity: float):
    if task is Task.RAIN:
        return RainGeometry(count=int(round(80 * intensity)))
    if task is Task.RAINDROP:
        return RaindropGeometry(count=int(round(12 * intensity)))
    return SnowGeometry(count=int(round(60 * intensity)))


_ILLUMINATION_DROP = {Task.RAIN: (0.4, 0.7), Task.RAINDROP: (0.2, 0.5), Task.SNOW: (0.0, 0.1)}


def default_spec(task, seed: int, size=(32, 32), intensity: float = 0.5) -> DegradationSpec:
    """Seeded spec for one sample; fog strength and artifact counts scale with ``intensity``.

    With ``intensity=0`` the spec is an exact no-op (beta=0, e_inf=1, no artifacts).
    """
    task = Task.parse(task)
    if not 0.0 <= intensity <= 1.0:
        raise ValueError(f"intensity must lie in [0, 1], got {intensity}")
    rng = np.random.default_rng([int(seed), 2, int(task)])
    depth = scene_depth(seed, size)
    # outdoor rain carries fog; lens raindrops barely any; snow a light veil
    beta_hi = {Task.RAIN: 0.6, Task.RAINDROP: 0.15, Task.SNOW: 0.35}[task]
    beta = 2.0 * intensity * rng.uniform(0.5, 1.0) * beta_hi
    # sky light differs by weather: overcast rain is dim, snow scenes stay bright
    lo, hi = _ILLUMINATION_DROP[task]
    e_inf = 1.0 - intensity * rng.uniform(lo, hi)
    geom = _default_geometry(task, intensity)
    if task is Task.RAIN:
        geom.angle_deg = rng.uniform(-30.0, 30.0)
        geom.length = rng.uniform(6.0, 12.0)
    elif task is Task.RAINDROP:
        geom.radius = rng.uniform(3.0, 5.5)
        geom.blur_sigma = rng.uniform(1.5, 3.0)
    return DegradationSpec(task, int(seed), ScatteringParams(e_inf, beta, depth), intensity, geom)


def make_pair(task, seed: int, size=(32, 32), intensity: float = 0.5):
    clean = synthesize_clean(seed, size)
    return degrade(clean, default_spec(task, seed, size, intensity)), clean


def make_dataset(task, n: int, seed: int, size=(32, 32), intensity: float = 0.5) -> list:
    """``n`` (degraded, clean) pairs; sample ``i`` uses seed ``seed + i``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [make_pair(task, seed + i, size, intensity) for i in range(n)]


def stack_pairs(pairs) -> tuple:
    """Batch a list of pairs into ([N,3,H,W] degraded, [N,3,H,W] clean) arrays."""
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] in [0,1] -> [H,W,3] uint8 via round(v*255)."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr[..., :3].astype(np.float64).transpose(2, 0, 1) / 255.0
