"""Slow reference implementations used only by the tests."""

import numpy as np


def pnpoly(poly, x, y):
    """Classic crossing-number point-in-polygon test, one point at a time."""
    inside = False
    n = len(poly)
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y):
            x_cross = (xj - xi) * (y - yi) / (yj - yi) + xi
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def raster_oracle(poly, shape):
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    for r in range(h):
        for c in range(w):
            out[r, c] = pnpoly(poly, float(c), float(r))
    return out


def hausdorff_oracle(a, b):
    """Exhaustive pairwise symmetric Hausdorff distance."""
    best_ab = 0.0
    for p in a:
        best_ab = max(best_ab, min(np.hypot(*(p - q)) for q in b))
    best_ba = 0.0
    for q in b:
        best_ba = max(best_ba, min(np.hypot(*(q - p)) for p in a))
    return max(best_ab, best_ba)


def dice_oracle(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def random_polygon(rng, size, n=None):
    """Star-shaped polygon with random radii inside a size x size grid."""
    n = n or int(rng.integers(3, 12))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    cx, cy = rng.uniform(0.3 * size, 0.7 * size, 2)
    radii = rng.uniform(0.1 * size, 0.45 * size, n)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=-1)


def ctr_fixture_landmarks():
    """Landmarks on a 1024 grid with lungs spanning x in [100, 900] and heart x in [350, 650].

    Each organ is an ellipse slightly wider than its box, clipped to the box so
    the horizontal extremes are attained exactly. CTR = 300 / 800 = 0.375.
    """

    def organ(x0, x1, cy, ay, n):
        t = -np.pi / 2 + 2 * np.pi * np.arange(n) / n
        cx, ax = (x0 + x1) / 2, (x1 - x0) / 2
        x = np.clip(cx + 1.1 * ax * np.cos(t), x0, x1)
        return np.stack([x, cy + ay * np.sin(t)], axis=-1)

    return np.concatenate([organ(100, 480, 480, 300, 44), organ(540, 900, 480, 300, 50), organ(350, 650, 640, 120, 26)])
