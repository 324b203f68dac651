"""Procedural toy images: one anti-aliased shape on a flat background."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffmath import ContractError, Rng

CLASSES = ("circle", "square", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ToySpec:
    size: int = 32
    shape: str = "circle"
    fill: tuple = (1.0, 0.0, 0.0)
    background: tuple = (0.0, 0.0, 0.0)
    center: tuple = (16.0, 16.0)
    scale: float = 8.0  # circumradius in pixels
    angle: float = 0.0
    seed: int = 0

    def validate(self):
        if self.shape not in CLASSES:
            raise ContractError(f"ToySpec: unknown shape {self.shape!r}")
        cx, cy = self.center
        r = self.scale
        if not (r > 0 and cx - r >= 0 and cy - r >= 0 and cx + r <= self.size and cy + r <= self.size):
            raise ContractError("ToySpec: shape must lie fully inside the canvas")
        for c in (self.fill, self.background):
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise ContractError("ToySpec: colors must lie in [0, 1]^3")


def _polygon_mask(px, py, verts):
    # convex polygon, counter-clockwise vertices
    inside = np.ones(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0
    return inside


def _mask(spec: ToySpec) -> np.ndarray:
    s = SUPERSAMPLE
    n = spec.size * s
    coords = (np.arange(n) + 0.5) / s
    px, py = np.meshgrid(coords, coords)
    cx, cy = spec.center
    r = spec.scale
    if spec.shape == "circle":
        m = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    else:
        k = 4 if spec.shape == "square" else 3
        verts = [(cx + r * math.cos(spec.angle + 2 * math.pi * i / k),
                  cy + r * math.sin(spec.angle + 2 * math.pi * i / k)) for i in range(k)]
        m = _polygon_mask(px, py, verts)
    return m.reshape(spec.size, s, spec.size, s).mean(axis=(1, 3))


def generate(spec: ToySpec) -> torch.Tensor:
    """Rasterize ``spec`` into a ``3 x size x size`` float32 tensor in [0, 1]."""
    spec.validate()
    cover = _mask(spec)[None]
    fill = np.asarray(spec.fill, dtype=np.float64)[:, None, None]
    bg = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    img = cover * fill + (1.0 - cover) * bg
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def random_spec(rng: Rng, label: int, size: int = 32) -> ToySpec:
    u = lambda k: rng.uniform(k)
    scale = size * (0.18 + 0.17 * u(1)[0])
    lo, hi = scale + 0.5, size - scale - 0.5
    cx, cy = lo + (hi - lo) * u(2)
    while True:
        fill, bg = u(3), u(3)
        if np.abs(fill - bg).mean() > 0.25:
            break
    return ToySpec(size=size, shape=CLASSES[label], fill=tuple(float(v) for v in fill),
                   background=tuple(float(v) for v in bg), center=(float(cx), float(cy)),
                   scale=float(scale), angle=float(2 * math.pi * u(1)[0]), seed=rng.seed)


def generate_set(n: int, seed: int, size: int = 32) -> list[tuple[torch.Tensor, int]]:
    """``n`` labelled images; classes cycle so counts differ by at most one."""
    if n < 1:
        raise ContractError(f"generate_set: n must be >= 1, got {n}")
    root = Rng(seed)
    labels = np.arange(n) % len(CLASSES)
    perm = np.argsort(root.child(0).uniform(n), kind="stable")
    labels = labels[perm]
    return [(generate(random_spec(root.child(1).child(i), int(lab), size)), int(lab))
            for i, lab in enumerate(labels)]


def stack(items) -> tuple[torch.Tensor, torch.Tensor]:
    """Turn a ``generate_set`` result into ``(images, labels)`` tensors."""
    xs = torch.stack([x for x, _ in items])
    ys = torch.tensor([y for _, y in items], dtype=torch.long)
    return xs, ys
