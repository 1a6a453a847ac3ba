#!/usr/bin/env python3
"""Generate the bundled stand-in canonical face model.

The geometry is a smooth face-shaped surface in centimetres that follows the
tracker's 478-landmark index conventions for the points the pipeline relies
on (nose bridge, eye corners, forehead, temples, and the ten iris points).
Replace the output with a conversion of the tracker's own canonical model
when working with recorded data; only the JSON layout matters to the code.

Usage: python3 tools/gen_canonical_model.py > crates/core/data/canonical_face_model_v1.json
"""
import json
import math

N_POINTS = 478

# Stable (rigid) landmarks: nose bridge, inner/outer eye corners, forehead, temples.
ANCHORS = {
    # nose bridge / dorsum
    6: (0.0, 3.2, 5.6),
    168: (0.0, 4.3, 5.2),
    197: (0.0, 2.2, 6.1),
    195: (0.0, 1.1, 6.6),
    # inner eye corners
    133: (-1.6, 3.5, 4.0),
    362: (1.6, 3.5, 4.0),
    # outer eye corners
    33: (-4.5, 3.7, 3.0),
    263: (4.5, 3.7, 3.0),
    # forehead
    10: (0.0, 8.3, 4.4),
    151: (0.0, 7.0, 5.0),
    9: (0.0, 5.7, 5.2),
    108: (-2.5, 6.9, 4.7),
    337: (2.5, 6.9, 4.7),
    # temples
    127: (-7.4, 3.3, -0.5),
    356: (7.4, 3.3, -0.5),
    234: (-7.6, 1.0, -1.5),
    454: (7.6, 1.0, -1.5),
    # nose tip (not stable, placed for shape only)
    1: (0.0, -0.46, 7.59),
}
STABLE_IDS = [6, 168, 197, 195, 133, 362, 33, 263, 10, 151, 9, 108, 337, 127, 356, 234, 454]

IRIS_RADIUS = 0.55
IRIS_CENTERS = {468: (-3.05, 3.6, 3.8), 473: (3.05, 3.6, 3.8)}
IRIS_IDS = list(range(468, 478))


def surface_z(x, y):
    r = 1.0 - (x / 8.5) ** 2 - (y / 10.5) ** 2
    base = 5.5 * math.sqrt(max(r, 0.0)) - 1.0
    nose = 2.0 * math.exp(-(x ** 2) / 1.2 - ((y - 1.0) ** 2) / 8.0)
    return base + nose


def main():
    points = [None] * N_POINTS
    for idx, p in ANCHORS.items():
        points[idx] = p
    for center_id, (cx, cy, cz) in IRIS_CENTERS.items():
        points[center_id] = (cx, cy, cz)
        ring = [(IRIS_RADIUS, 0.0), (0.0, IRIS_RADIUS), (-IRIS_RADIUS, 0.0), (0.0, -IRIS_RADIUS)]
        for k, (dx, dy) in enumerate(ring):
            points[center_id + 1 + k] = (cx + dx, cy + dy, cz)

    golden = math.pi * (3.0 - math.sqrt(5.0))
    free = [i for i in range(N_POINTS) if points[i] is None]
    for k, idx in enumerate(free):
        rad = math.sqrt((k + 0.5) / len(free))
        theta = k * golden
        x = 7.5 * rad * math.cos(theta)
        y = 9.5 * rad * math.sin(theta) - 0.5
        points[idx] = (x, y, surface_z(x, y))

    out = {
        "version": 1,
        "units": "cm",
        "points": [[round(c, 6) for c in p] for p in points],
        "stable_ids": STABLE_IDS,
        "iris_ids": IRIS_IDS,
    }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
