"""Procedural desk-scale dataset: small colored geometric scenes with
enough shared structure for a dictionary or decoder prior to be learnable."""

from __future__ import annotations

import numpy as np

from .imagestack import CS_RGB, Image, RANGE_UNIT


def toy_scene(size: int, rng: np.random.Generator) -> Image:
    """One random scene: a smooth two-color gradient background with a few
    solid rectangles and ellipses."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        h = rng.uniform(0.1, 0.4) * size
        w = rng.uniform(0.1, 0.4) * size
        if rng.random() < 0.5:
            sel = (np.abs(yy * (size - 1) - cy) < h / 2) & \
                  (np.abs(xx * (size - 1) - cx) < w / 2)
        else:
            sel = ((yy * (size - 1) - cy) / (h / 2)) ** 2 + \
                  ((xx * (size - 1) - cx) / (w / 2)) ** 2 < 1.0
        img[:, sel] = color[:, None]
    return Image(np.clip(img, 0.0, 1.0), RANGE_UNIT, CS_RGB)


def toy_dataset(count: int, size: int, seed: int) -> list[Image]:
    rng = np.random.default_rng(seed)
    return [toy_scene(size, rng) for _ in range(count)]


def split_dataset(items: list, train_fraction: float, seed: int):
    """Deterministic disjoint train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [items[i] for i in train_idx], [items[i] for i in test_idx]
