"""Gaussian kernel density estimation for difficulty-score distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.grid.shape != self.density.shape or self.grid.ndim != 1:
            raise ValueError("grid and density must be 1-D arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def to_rows(self) -> list[tuple[float, float]]:
        return [(float(x), float(y)) for x, y in zip(self.grid, self.density)]


def silverman_bandwidth(scores) -> float:
    """Rule-of-thumb bandwidth: 0.9 * min(std, IQR/1.34) * n^(-1/5).

    Falls back to a small fixed width when the sample is (near-)degenerate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise ValueError("scores must be non-empty")
    std = float(np.std(scores))
    q75, q25 = np.percentile(scores, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        return 0.05
    return 0.9 * spread * n ** (-0.2)


def kde(scores, bandwidth: float | None = None, grid=None) -> DensityCurve:
    """Gaussian KDE: f(x) = (1/(n h)) sum_i phi((x - s_i) / h).

    With `grid=None`, evaluates on 512 points spanning the data support plus
    four bandwidths on each side.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    h = silverman_bandwidth(scores) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    if grid is None:
        grid = np.linspace(scores.min() - 4 * h, scores.max() + 4 * h, 512)
    grid = np.asarray(grid, dtype=np.float64)
    z = (grid[:, None] - scores[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (scores.size * h * np.sqrt(2 * np.pi))
    return DensityCurve(grid=grid, density=density, bandwidth=h)
