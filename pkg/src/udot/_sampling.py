"""Seeded low-discrepancy sampling used by every sampled check."""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc


def halton(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """``n`` scrambled Halton points in ``[0, 1)^dim``; deterministic in ``seed``."""
    return qmc.Halton(d=dim, scramble=True, seed=seed).random(n)


def points_in_region(region, n: int, seed: int = 0, max_rounds: int = 64) -> np.ndarray:
    """Quasi-random points of ``region`` (rejection from its bounding box)."""
    (x0, x1), (y0, y1) = region.bbox
    out: list[np.ndarray] = []
    got = 0
    batch = max(2 * n, 64)
    for r in range(max_rounds):
        u = halton(batch, 2, seed=seed + 7919 * r)
        pts = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
        pts = pts[region.implicit(pts) < 0]
        out.append(pts)
        got += len(pts)
        if got >= n:
            break
    pts = np.concatenate(out)[:n]
    if len(pts) < n:
        raise RuntimeError(f"region too thin to sample {n} interior points")
    return pts
