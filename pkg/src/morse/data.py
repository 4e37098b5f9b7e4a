"""Procedural 2-D scenes: disks, ellipses and star-perturbed ellipses on noise.

Each foreground class gets one shape. Star shapes modulate the ellipse
radius by ``1 + a * sin(m * phi + phase)`` with ``m`` lobes, giving the
high-frequency contours that grid convolutions tend to smooth over. Pixel
``(row i, col j)`` is sampled at its centre ``(x=j, y=i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .config import SceneConfig


@dataclass(frozen=True)
class Shape:
    class_id: int
    cx: float
    cy: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float
    amplitude: float = 0.0
    lobes: int = 0
    phase: float = 0.0

    @property
    def extent(self) -> float:
        return (1.0 + self.amplitude) * max(self.a, self.b)

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.cx, y - self.cy
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        rho = np.hypot(u, v)
        radius = 1.0 + self.amplitude * np.sin(self.lobes * np.arctan2(v, u) + self.phase)
        return rho <= radius

    def contour(self, n: int = 4096) -> np.ndarray:
        """``[n, 2]`` points ``(x, y)`` on the analytic boundary."""
        phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        r = 1.0 + self.amplitude * np.sin(self.lobes * phi + self.phase)
        u, v = r * np.cos(phi) * self.a, r * np.sin(phi) * self.b
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.stack([self.cx + u * c - v * s, self.cy + u * s + v * c], axis=1)

    def perimeter(self, n: int = 4096) -> float:
        pts = self.contour(n)
        return float(np.linalg.norm(np.diff(pts, axis=0, append=pts[:1]), axis=1).sum())


class Scene(NamedTuple):
    image: np.ndarray  # [1, H, W] float32
    label: np.ndarray  # [H, W] int64
    shapes: list[Shape]


def _draw_shape(cfg: SceneConfig, class_id: int, rng: np.random.Generator, placed: list[Shape]) -> Shape:
    R = cfg.resolution
    family = cfg.shape_family
    if family == "mixed":
        family = ("disk", "ellipse", "star")[rng.integers(3)]
    amp = cfg.star_amplitude if family == "star" else 0.0
    best = None
    for _ in range(50):
        a = rng.uniform(0.12, 0.24) * R
        b = a if family == "disk" else a * rng.uniform(0.6, 1.0)
        lobes = int(rng.integers(cfg.star_lobes[0], cfg.star_lobes[1] + 1)) if amp else 0
        margin = (1.0 + amp) * max(a, b) + 1.0
        cx = rng.uniform(margin, R - 1 - margin)
        cy = rng.uniform(margin, R - 1 - margin)
        shape = Shape(class_id, cx, cy, a, b, rng.uniform(0, np.pi), amp, lobes, rng.uniform(0, 2 * np.pi))
        gap = min((np.hypot(cx - o.cx, cy - o.cy) - 0.8 * (shape.extent + o.extent) for o in placed), default=1.0)
        if gap > 0:
            return shape
        if best is None or gap > best[0]:
            best = (gap, shape)
    return best[1]


def rasterize(shapes: list[Shape], resolution: int) -> np.ndarray:
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    label = np.zeros((resolution, resolution), dtype=np.int64)
    for shape in shapes:
        label[shape.inside(xs, ys)] = shape.class_id
    return label


def class_intensity(class_id: int, num_classes: int) -> float:
    return class_id / (num_classes - 1)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    shapes: list[Shape] = []
    for k in range(1, cfg.num_classes):
        shapes.append(_draw_shape(cfg, k, rng, shapes))
    label = rasterize(shapes, cfg.resolution)
    clean = label.astype(np.float64) / (cfg.num_classes - 1)
    noise = rng.normal(0.0, cfg.noise, clean.shape) if cfg.noise > 0 else 0.0
    image = (clean + noise).astype(np.float32)[None]
    return Scene(image, label, shapes)


def make_split(cfg: SceneConfig, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    scenes = [generate_scene(cfg, rng) for _ in range(n)]
    R = cfg.resolution
    if not scenes:
        return np.zeros((0, 1, R, R), np.float32), np.zeros((0, R, R), np.int64)
    return np.stack([s.image for s in scenes]), np.stack([s.label for s in scenes])


def make_benchmark(cfg: SceneConfig, seed: int):
    """``(train_images, train_labels), (test_images, test_labels)`` from one seed."""
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    train = make_split(cfg, cfg.n_train, np.random.default_rng(train_ss))
    test = make_split(cfg, cfg.n_test, np.random.default_rng(test_ss))
    return train, test
