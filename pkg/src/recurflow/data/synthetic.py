"""Layered sprite scenes with exact flow and occlusion ground truth.

A scene is a textured background plus textured rectangles/ellipses, drawn
back to front (later sprites are nearer).  Each layer translates rigidly, so
the forward flow of a pixel is the displacement of the layer it shows, and a
pixel is occluded when its target position is off-canvas or shows a nearer
layer at the next frame.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import ConfigError

FINAL_BLUR_SIGMA = 1.5
FINAL_NOISE_SIGMA = 0.02


@dataclass
class Sprite:
    shape: str = "rect"  # "rect" or "ellipse"
    size: tuple[int, int] = (8, 8)  # (height, width)
    position: tuple[float, float] = (0.0, 0.0)  # (x, y) of the top-left corner at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) pixels/frame
    acceleration: tuple[float, float] = (0.0, 0.0)

    def offset(self, t: float) -> np.ndarray:
        p = np.asarray(self.position, dtype=np.float64)
        v = np.asarray(self.velocity, dtype=np.float64)
        a = np.asarray(self.acceleration, dtype=np.float64)
        return p + v * t + 0.5 * a * t * t


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    background_seed: int = 0
    background_velocity: tuple[float, float] = (0.0, 0.0)
    sprites: list[Sprite] = field(default_factory=list)
    degradation: str = "none"  # "none", "blur", "noise" or "final"
    blur_sigma: float = FINAL_BLUR_SIGMA
    noise_sigma: float = FINAL_NOISE_SIGMA

    def __post_init__(self):
        self.sprites = [s if isinstance(s, Sprite) else Sprite(**s) for s in self.sprites]
        for s in self.sprites:
            s.size = tuple(int(v) for v in s.size)
            s.position = tuple(float(v) for v in s.position)
            s.velocity = tuple(float(v) for v in s.velocity)
            s.acceleration = tuple(float(v) for v in s.acceleration)
        self.background_velocity = tuple(float(v) for v in self.background_velocity)

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError("canvas must be at least 1x1")
        if self.degradation not in ("none", "blur", "noise", "final"):
            raise ConfigError(f"unknown degradation {self.degradation!r}")
        for i, s in enumerate(self.sprites):
            if s.shape not in ("rect", "ellipse"):
                raise ConfigError(f"sprite {i}: unknown shape {s.shape!r}")
            h, w = s.size
            if h < 1 or w < 1:
                raise ConfigError(f"sprite {i}: size must be positive")
            if h > self.height or w > self.width:
                raise ConfigError(f"sprite {i}: size {s.size} exceeds canvas {(self.height, self.width)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SequenceSample:
    frames: np.ndarray  # (N, 3, H, W) in [0, 1]
    flow: np.ndarray  # (N-1, 2, H, W)
    occ: np.ndarray  # (N-1, 1, H, W) in {0, 1}
    meta: SceneSpec | None = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth random RGB texture in [0, 1] with detail at two scales."""
    coarse = ndimage.gaussian_filter(rng.random((3, h, w)), sigma=(0, 3.0, 3.0), mode="wrap")
    fine = ndimage.gaussian_filter(rng.random((3, h, w)), sigma=(0, 0.8, 0.8), mode="wrap")
    tex = 0.6 * coarse + 0.4 * fine
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-12)


def _bilinear(tex: np.ndarray, ly: np.ndarray, lx: np.ndarray) -> np.ndarray:
    """Sample a (3, h, w) texture at float coords (edge clamped)."""
    _, th, tw = tex.shape
    y0 = np.floor(ly)
    x0 = np.floor(lx)
    ay = ly - y0
    ax = lx - x0
    y0 = np.clip(y0.astype(np.int64), 0, th - 1)
    x0 = np.clip(x0.astype(np.int64), 0, tw - 1)
    y1 = np.clip(y0 + 1, 0, th - 1)
    x1 = np.clip(x0 + 1, 0, tw - 1)
    return (
        tex[:, y0, x0] * ((1 - ay) * (1 - ax))
        + tex[:, y0, x1] * ((1 - ay) * ax)
        + tex[:, y1, x0] * (ay * (1 - ax))
        + tex[:, y1, x1] * (ay * ax)
    )


def _inside(sprite: Sprite, ly: np.ndarray, lx: np.ndarray) -> np.ndarray:
    h, w = sprite.size
    if sprite.shape == "rect":
        return (ly >= 0) & (ly < h) & (lx >= 0) & (lx < w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((ly - cy) / (h / 2.0)) ** 2 + ((lx - cx) / (w / 2.0)) ** 2 <= 1.0


class _Layers:
    """Background + sprites with their textures, evaluable at any time and position."""

    def __init__(self, spec: SceneSpec, n: int, rng: np.random.Generator):
        self.spec = spec
        bv = np.abs(np.asarray(spec.background_velocity))
        self.margin = int(np.ceil(bv.max() * n)) + 2
        m = self.margin
        self.bg_tex = _texture(rng, spec.height + 2 * m, spec.width + 2 * m)
        self.textures = [_texture(rng, s.size[0] + 1, s.size[1] + 1) for s in spec.sprites]

    def bg_offset(self, t: float) -> np.ndarray:
        return np.asarray(self.spec.background_velocity) * t

    def top_layer(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Index of the nearest layer covering (x, y) at time t (0 = background)."""
        top = np.zeros(x.shape, dtype=np.int64)
        for i, s in enumerate(self.spec.sprites):
            ox, oy = s.offset(t)
            top[_inside(s, y - oy, x - ox)] = i + 1
        return top

    def displacement(self, layer: int, t: int) -> np.ndarray:
        if layer == 0:
            return self.bg_offset(t + 1) - self.bg_offset(t)
        s = self.spec.sprites[layer - 1]
        return s.offset(t + 1) - s.offset(t)

    def render(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.spec.height, self.spec.width
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        bx, by = self.bg_offset(t)
        img = _bilinear(self.bg_tex, gy - by + self.margin, gx - bx + self.margin)
        top = np.zeros((h, w), dtype=np.int64)
        for i, (s, tex) in enumerate(zip(self.spec.sprites, self.textures)):
            ox, oy = s.offset(t)
            ly, lx = gy - oy, gx - ox
            m = _inside(s, ly, lx)
            if m.any():
                img[:, m] = _bilinear(tex, ly[m], lx[m])
                top[m] = i + 1
        return img, top


def generate(spec: SceneSpec, n: int, seed: int) -> SequenceSample:
    """Render ``n`` frames of ``spec`` with forward flow and occlusion for each pair."""
    if n < 2:
        raise ConfigError(f"a sequence needs at least 2 frames, got {n}")
    spec.validate()
    rng = np.random.default_rng([seed, spec.background_seed])
    layers = _Layers(spec, n, rng)
    h, w = spec.height, spec.width
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    frames = np.empty((n, 3, h, w))
    tops = []
    for t in range(n):
        frames[t], top = layers.render(t)
        tops.append(top)

    flow = np.zeros((n - 1, 2, h, w))
    occ = np.zeros((n - 1, 1, h, w))
    for t in range(n - 1):
        top = tops[t]
        for layer in np.unique(top):
            m = top == layer
            d = layers.displacement(int(layer), t)
            flow[t, 0][m] = d[0]
            flow[t, 1][m] = d[1]
        tx = gx + flow[t, 0]
        ty = gy + flow[t, 1]
        outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
        covered = layers.top_layer(t + 1, tx, ty) > top
        occ[t, 0] = (outside | covered).astype(np.float64)

    frames = degrade(frames, spec, rng)
    return SequenceSample(frames, flow, occ, spec)


def degrade(frames: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.degradation in ("blur", "final"):
        frames = ndimage.gaussian_filter(frames, sigma=(0, 0, spec.blur_sigma, spec.blur_sigma), mode="nearest")
    if spec.degradation in ("noise", "final"):
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    if spec.degradation != "none":
        frames = np.clip(frames, 0.0, 1.0)
    return frames


# --------------------------------------------------------------------------
# random scene families
# --------------------------------------------------------------------------


@dataclass
class SuiteSpec:
    """Distribution over scenes; ``sample_scene`` draws one SceneSpec."""

    height: int = 64
    width: int = 64
    frames: int = 4
    sprites: tuple[int, int] = (1, 3)
    sprite_size: tuple[int, int] = (8, 24)
    max_speed: float = 4.0
    background_speed: float = 2.0
    integer_motion: bool = True
    max_accel: float = 0.0
    shapes: tuple[str, ...] = ("rect", "ellipse")
    degradation: str = "none"

    def __post_init__(self):
        self.sprites = tuple(int(v) for v in self.sprites)
        self.sprite_size = tuple(int(v) for v in self.sprite_size)
        self.shapes = tuple(self.shapes)

    def validate(self) -> None:
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if self.sprites[0] < 0 or self.sprites[1] < self.sprites[0]:
            raise ConfigError("sprites must be an increasing (min, max) pair")
        if self.sprite_size[0] < 1 or self.sprite_size[1] < self.sprite_size[0]:
            raise ConfigError("sprite_size must be an increasing (min, max) pair")
        if self.sprite_size[1] > min(self.height, self.width):
            raise ConfigError("sprite_size exceeds canvas")
        if self.degradation not in ("none", "blur", "noise", "final"):
            raise ConfigError(f"unknown degradation {self.degradation!r}")
        if self.max_speed < 0 or self.background_speed < 0:
            raise ConfigError("speeds must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown suite keys: {sorted(unknown)}")
        return cls(**d)


def _velocity(rng: np.random.Generator, vmax: float, integer: bool) -> tuple[float, float]:
    if integer:
        k = int(np.floor(vmax))
        return float(rng.integers(-k, k + 1)), float(rng.integers(-k, k + 1))
    return float(rng.uniform(-vmax, vmax)), float(rng.uniform(-vmax, vmax))


def sample_scene(suite: SuiteSpec, rng: np.random.Generator) -> SceneSpec:
    suite.validate()
    n_sprites = int(rng.integers(suite.sprites[0], suite.sprites[1] + 1))
    sprites = []
    for _ in range(n_sprites):
        sh = int(rng.integers(suite.sprite_size[0], suite.sprite_size[1] + 1))
        sw = int(rng.integers(suite.sprite_size[0], suite.sprite_size[1] + 1))
        x = float(rng.integers(0, suite.width - sw + 1))
        y = float(rng.integers(0, suite.height - sh + 1))
        acc = (0.0, 0.0)
        if suite.max_accel > 0:
            acc = (float(rng.uniform(-suite.max_accel, suite.max_accel)), float(rng.uniform(-suite.max_accel, suite.max_accel)))
        sprites.append(
            Sprite(
                shape=str(rng.choice(list(suite.shapes))),
                size=(sh, sw),
                position=(x, y),
                velocity=_velocity(rng, suite.max_speed, suite.integer_motion),
                acceleration=acc,
            )
        )
    return SceneSpec(
        height=suite.height,
        width=suite.width,
        background_seed=int(rng.integers(0, 2**31 - 1)),
        background_velocity=_velocity(rng, suite.background_speed, suite.integer_motion),
        sprites=sprites,
        degradation=suite.degradation,
    )


def generate_suite(suite: SuiteSpec, count: int, seed: int) -> list[SequenceSample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        scene = sample_scene(suite, rng)
        out.append(generate(scene, suite.frames, seed=seed * 100003 + i))
    return out


# named scene families; "shift" moves only the background (global translation)
PRESETS: dict[str, dict] = {
    "shift": dict(sprites=(0, 0), background_speed=3.0),
    "sprites": dict(sprites=(1, 3), max_speed=3.0, background_speed=1.0),
    "final": dict(sprites=(1, 3), max_speed=3.0, background_speed=1.0, degradation="final"),
}


def suite_preset(name: str, **overrides) -> SuiteSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown suite preset {name!r}; choose from {sorted(PRESETS)}")
    return SuiteSpec(**{**PRESETS[name], **overrides})
