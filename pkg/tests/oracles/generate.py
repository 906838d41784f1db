"""Independent oracles whose outputs are frozen into the test-suite.

Nothing here imports ``udot``.  Run ``python3 tests/oracles/generate.py`` to
print the values; they are pasted into the tests as literals.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from shapely.geometry import Polygon, box


def tilted_g2(y: float, p: float, q: float) -> float:
    """G2 for s = x1*y + x2*y^2/2 on the unit square with f = 1.

    X1 is the segment x1 = p - x2*y, parametrised by x2; arclength times
    1/|grad_x s_y| is exactly dx2, and s_yy = x2.
    """
    lo = max(0.0, (p - 1.0) / y)
    hi = min(1.0, p / y, q)
    if hi <= lo:
        return 0.0
    return q * (hi - lo) - 0.5 * (hi * hi - lo * lo)


def tilted_sublevel_area(y: float, p: float, q: float | None) -> float:
    """Area of {x1 + x2*y <= p} ∩ {x2 <= q} in the unit square by polygon clipping."""
    big = 10.0
    half = Polygon([(-big, -big), (p + big * y, -big), (p - big * y, big), (-big, big)])
    region = box(0.0, 0.0, 1.0, 1.0).intersection(half)
    if q is not None:
        region = region.intersection(box(-big, -big, big, q))
    return float(region.area)


def permutation_value(S: np.ndarray) -> float:
    k = S.shape[0]
    return max(sum(S[i, s[i]] for i in range(k)) for s in itertools.permutations(range(k))) / k


def main() -> None:
    pts = [(0.5, 0.3, 0.6), (0.8, 0.5, 0.5), (0.3, 0.9, 0.7), (0.6, 1.2, 0.9), (0.9, 0.25, 0.1)]
    print("tilted G2:", [(pt, repr(tilted_g2(*pt))) for pt in pts])
    print("tilted area:", [(pt, repr(tilted_sublevel_area(*pt))) for pt in pts])
    print("tilted area no q:", [(pt[:2], repr(tilted_sublevel_area(pt[0], pt[1], None))) for pt in pts])
    rng = np.random.default_rng(2024)
    for k in (3, 4, 5):
        S = np.round(rng.normal(size=(k, k)), 3)
        print(f"perm k={k}", S.tolist(), repr(permutation_value(S)))
    # annulus: mass of a half-plane cut {x . n <= c} for f = 4/(3 pi)
    def seg_area(r, c):
        if c >= r:
            return math.pi * r * r
        if c <= -r:
            return 0.0
        return r * r * math.acos(-c / r) + c * math.sqrt(r * r - c * c)
    for c in (0.0, 0.25, -0.6):
        m = (seg_area(1.0, c) - seg_area(0.5, c)) * 4.0 / (3.0 * math.pi)
        print("annulus half-plane mass", c, repr(m))


if __name__ == "__main__":
    main()
