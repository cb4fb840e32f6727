"""Synthetic depth scenes and deterministic batch iteration.

Random draws come from xorshift64* seeded through splitmix64, so the same
seed regenerates the same scene in any language:

    splitmix64(s): s += 0x9E3779B97F4A7C15; z = s
                   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                   return z ^ (z >> 31)
    next():        x ^= x >> 12; x ^= x << 25; x ^= x >> 27
                   return x * 0x2545F4914F6CDD1D        (all mod 2^64)
    uniform():     (next() >> 11) * 2^-53

A scene is a vertical depth ramp (far at the top row, near at the bottom)
overwritten by axis-aligned rectangles of constant depth. Where rectangles
overlap the nearest wins; equal depths keep the lower index. Colors are a
fixed function of depth plus uniform noise.
"""

from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(seed):
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed):
        self.state = splitmix64(seed & MASK64) or 1

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo, hi):
        """Integer in [lo, hi], inclusive."""
        return lo + int(self.uniform() * (hi - lo + 1))

    def uniform_array(self, n):
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform()
        return out


@dataclass(frozen=True)
class Rect:
    y: int
    x: int
    h: int
    w: int
    depth: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    max_depth: float = 10.0
    near: float = 2.0
    far: float = 9.0
    num_rects: int = 3
    rect_min: int = 8
    rect_max: int = 32
    rect_near: float = 1.0
    rect_far: float = 7.0
    # rectangle corners and sizes snap to this pixel grid
    grid: int = 4
    noise: float = 0.02
    rects: tuple = field(default=None)


@dataclass
class DepthSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W, 1) float32 in (0, max_depth]


def depth_ramp(spec):
    rows = np.arange(spec.height, dtype=np.float64)
    denom = max(spec.height - 1, 1)
    col = spec.far + (spec.near - spec.far) * rows / denom
    return np.repeat(col[:, None], spec.width, axis=1)


def albedo(depth, max_depth):
    """Depth-coded RGB in [0, 1]."""
    t = np.clip(depth / max_depth, 0.0, 1.0)
    return np.stack([t, 1.0 - t, 0.5 + 0.5 * np.cos(2.0 * np.pi * t)], axis=-1)


def _random_rects(spec, rng):
    g = spec.grid
    rects = []
    for _ in range(spec.num_rects):
        h = g * rng.randint(max(1, spec.rect_min // g), max(1, spec.rect_max // g))
        w = g * rng.randint(max(1, spec.rect_min // g), max(1, spec.rect_max // g))
        h, w = min(h, spec.height), min(w, spec.width)
        y = g * rng.randint(0, (spec.height - h) // g)
        x = g * rng.randint(0, (spec.width - w) // g)
        d = spec.rect_near + (spec.rect_far - spec.rect_near) * rng.uniform()
        rects.append(Rect(y, x, h, w, d))
    return rects


def generate_scene(spec):
    rng = XorShift64Star(spec.seed)
    depth = depth_ramp(spec)
    rects = list(spec.rects) if spec.rects is not None else _random_rects(spec, rng)
    nearest = np.full(depth.shape, np.inf)
    for r in rects:
        if not 0 < r.depth <= spec.max_depth:
            raise ValueError(f"rectangle depth {r.depth} outside (0, {spec.max_depth}]")
        win = nearest[r.y:r.y + r.h, r.x:r.x + r.w]
        np.minimum(win, r.depth, out=win)
    depth = np.where(np.isfinite(nearest), nearest, depth)
    noise = (rng.uniform_array(depth.size * 3).reshape(*depth.shape, 3) * 2.0 - 1.0) * spec.noise
    image = np.clip(albedo(depth, spec.max_depth) + noise, 0.0, 1.0)
    return DepthSample(image.astype(np.float32), depth[..., None].astype(np.float32))


def scene_specs(num_samples, seed, **kwargs):
    """Per-sample specs; sample ``i`` uses seed ``splitmix64(seed + i)``."""
    return [SceneSpec(seed=splitmix64((seed + i) & MASK64), **kwargs) for i in range(num_samples)]


def dataset_iter(samples, batch_size, seed=0, epoch=0, shuffle=True, flip=False):
    """Yield ``(images, depths)`` batches of shape (B, H, W, 3) / (B, H, W, 1).

    Order and flips depend only on ``(seed, epoch)``. The final batch may be
    smaller than ``batch_size``.
    """
    rng = XorShift64Star((seed * 1_000_003 + epoch) & MASK64)
    order = list(range(len(samples)))
    if shuffle:
        # Fisher-Yates
        for i in range(len(order) - 1, 0, -1):
            j = rng.randint(0, i)
            order[i], order[j] = order[j], order[i]
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images, depths = [], []
        for i in idx:
            img, dep = samples[i].image, samples[i].depth
            if flip and rng.uniform() < 0.5:
                img, dep = img[:, ::-1], dep[:, ::-1]
            images.append(img)
            depths.append(dep)
        yield np.stack(images), np.stack(depths)
