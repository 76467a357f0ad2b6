"""Procedural image generation for demos and tests.

Composites of smooth gradients, soft shapes, oriented sinusoid textures and
low-octave value noise: enough structure for a codec to learn from, fully
deterministic given (seed, index), no dataset download required.

Run as a module to populate a folder:

    python -m rdplab.synthetic --out data/train --count 500 --size 96 --seed 10
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    idx = np.linspace(0, cells, size)
    i0 = np.floor(idx).astype(int).clip(0, cells - 1)
    frac = idx - i0
    # smoothstep interpolation along each axis
    w = frac * frac * (3 - 2 * frac)
    top = grid[np.ix_(i0, i0)] * (1 - w)[None, :] + grid[np.ix_(i0, i0 + 1)] * w[None, :]
    bot = grid[np.ix_(i0 + 1, i0)] * (1 - w)[None, :] + grid[np.ix_(i0 + 1, i0 + 1)] * w[None, :]
    return top * (1 - w)[:, None] + bot * w[:, None]


def render_image(seed: int, index: int, size: int) -> np.ndarray:
    """One [H,W,3] float image in [0,1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    yy, xx = np.meshgrid(
        np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij"
    )

    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b = rng.uniform(-1, 1, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.25 * np.cos(2 * np.pi * (a * xx + b * yy) + phase)

    # soft ellipses
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        ry, rx = rng.uniform(0.05, 0.35, 2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = np.exp(-np.maximum(d - 1.0, 0.0) * 14.0)
        color = rng.uniform(0, 1, 3)
        alpha = rng.uniform(0.3, 0.9)
        img = img * (1 - alpha * mask[..., None]) + color * (alpha * mask[..., None])

    # oriented sinusoid texture band
    freq = rng.uniform(4, 14)
    theta = rng.uniform(0, np.pi)
    tex = 0.5 + 0.5 * np.sin(
        2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
    )
    band_mask = _value_noise(rng, size, 3) > rng.uniform(0.35, 0.65)
    strength = rng.uniform(0.1, 0.3)
    img += strength * band_mask[..., None] * (tex[..., None] - 0.5)

    img += 0.08 * (_value_noise(rng, size, 6)[..., None] - 0.5)
    return np.clip(img, 0.0, 1.0)


def generate_images(
    out_dir: Path, count: int, size: int = 96, seed: int = 0
) -> List[Path]:
    """Write ``count`` PNG images into ``out_dir`` and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        arr = (render_image(seed, i, size) * 255.0).round().astype(np.uint8)
        path = out_dir / f"synth_{i:04d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    paths = generate_images(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
