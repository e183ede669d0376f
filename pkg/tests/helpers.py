from __future__ import annotations

import numpy as np

from vidannot.backends import SyntheticWorldConfig, generate_synthetic_sequence
from vidannot.geometry import BBox, BinaryMask


def ellipse_mask(cx: float, cy: float, ax: float, ay: float, w: int, h: int) -> BinaryMask:
    yy, xx = np.mgrid[0:h, 0:w]
    return BinaryMask(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0)


def rect_mask(x1: int, y1: int, x2: int, y2: int, w: int, h: int) -> BinaryMask:
    g = np.zeros((h, w), dtype=bool)
    g[y1 : y2 + 1, x1 : x2 + 1] = True
    return BinaryMask(g)


def box_grid_world(
    num_frames: int,
    velocities: tuple[tuple[float, float], ...],
    seed: int = 0,
    occlusion: bool = False,
    frame: tuple[int, int] = (320, 240),
) -> list:
    cfg = SyntheticWorldConfig(
        frame_width=frame[0],
        frame_height=frame[1],
        num_objects=len(velocities),
        num_frames=num_frames,
        velocities=velocities,
        rng_seed=seed,
        occlusion_enabled=occlusion,
    )
    return generate_synthetic_sequence(cfg)


def boxes_equal(a: BBox, b: BBox, tol: float = 1e-9) -> bool:
    return (
        abs(a.x1 - b.x1) <= tol
        and abs(a.y1 - b.y1) <= tol
        and abs(a.x2 - b.x2) <= tol
        and abs(a.y2 - b.y2) <= tol
    )
