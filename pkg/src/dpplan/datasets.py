"""Synthetic histograms with the shapes typical of benchmark data: spikes, steps, bumps."""

from __future__ import annotations

import numpy as np

from .matrix import DataVector

SHAPES = ("steps", "bumps", "spikes", "zipf", "sparse", "smooth")


def _profile(kind: str, n: int, rng) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    if kind == "steps":
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(8, n - 1), replace=False)) if n > 1 else []
        levels = rng.exponential(1.0, size=len(cuts) + 1)
        return np.repeat(levels, np.diff(np.concatenate([[0], cuts, [n]])))
    if kind == "bumps":
        p = np.zeros(n)
        for _ in range(4):
            mu, sd = rng.uniform(0, 1), rng.uniform(0.01, 0.1)
            p += rng.uniform(0.5, 2) * np.exp(-0.5 * ((t - mu) / sd) ** 2)
        return p
    if kind == "spikes":
        p = np.full(n, 0.01)
        idx = rng.choice(n, size=max(1, n // 100), replace=False)
        p[idx] += rng.exponential(1.0, size=idx.size)
        return p
    if kind == "zipf":
        p = 1.0 / np.arange(1, n + 1) ** 1.1
        return p[rng.permutation(n)] if rng.random() < 0.5 else p
    if kind == "sparse":
        p = np.zeros(n)
        idx = rng.choice(n, size=max(1, n // 20), replace=False)
        p[idx] = rng.uniform(0.5, 1.5, size=idx.size)
        return p
    if kind == "smooth":
        return 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 6))
    raise ValueError(f"unknown shape {kind!r}")


def synthetic(kind: str, shape, scale: int, rng) -> DataVector:
    """Multinomial sample of ``scale`` records from a named profile over ``shape``."""
    shape = tuple(shape) if np.iterable(shape) else (int(shape),)
    n = int(np.prod(shape))
    p = np.maximum(_profile(kind, n, rng), 0.0)
    p = p / p.sum()
    return DataVector(rng.multinomial(int(scale), p).astype(float), shape)


def suite(count: int, shape, scale: int, seed: int = 0) -> list:
    """``count`` datasets cycling through the profiles."""
    rng = np.random.default_rng(seed)
    return [synthetic(SHAPES[i % len(SHAPES)], shape, scale, rng) for i in range(count)]
