"""Annotation and segmentation handling: batch propagation of new objects
through the remaining frames, then trailing-empty pruning, temporal polygon
smoothing, and per-frame redundancy merging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .assoc import NewObject
from .backends import PropagatorBackend
from .geometry import (
    BBox,
    BinaryMask,
    Polygon,
    iou_mask,
    mask_to_polygon,
    polygon_to_bbox,
    rasterize_polygon,
    resample_polygon,
)


class PropagationError(RuntimeError):
    """Propagator failure, tagged with the batch that caused it."""

    def __init__(self, message: str, object_ids: tuple[int, ...]) -> None:
        super().__init__(message)
        self.object_ids = object_ids


@dataclass(frozen=True)
class AshConfig:
    beta: int = 5  # objects propagated per batch
    alpha: float = 0.2  # temporal smoothing factor; 1 disables smoothing
    tau_merge: float = 0.3  # per-frame IoU above which segments merge
    epsilon_mask: int = 3  # min foreground pixels for a valid mask
    resample_n: int = 64  # vertex count used when averaging polygons
    adaptive_smoothing: bool = False  # scale alpha by centroid speed

    def __post_init__(self) -> None:
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1: {self.beta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha out of [0,1]: {self.alpha}")
        if not 0.0 < self.tau_merge < 1.0:
            raise ValueError(f"tau_merge out of (0,1): {self.tau_merge}")
        if self.epsilon_mask < 1:
            raise ValueError(f"epsilon_mask must be >= 1: {self.epsilon_mask}")
        if self.resample_n < 3:
            raise ValueError(f"resample_n must be >= 3: {self.resample_n}")


@dataclass
class MaskletEntry:
    mask: BinaryMask
    polygon: Polygon | None
    bbox: BBox | None
    confidence: float


@dataclass
class Masklet:
    """One object's per-frame masks under a single identity."""

    object_id: int
    class_label: str
    entries: dict[int, MaskletEntry] = field(default_factory=dict)

    def frames(self) -> list[int]:
        return sorted(self.entries)

    def add_entry(self, frame: int, entry: MaskletEntry) -> None:
        if self.entries and frame <= max(self.entries):
            raise ValueError(f"frame {frame} not after {max(self.entries)}")
        self.entries[frame] = entry


def partition_batches(items: Sequence, beta: int) -> list[list]:
    """Split into consecutive chunks of size beta, last possibly smaller."""
    if beta < 1:
        raise ValueError(f"beta must be >= 1: {beta}")
    return [list(items[i : i + beta]) for i in range(0, len(items), beta)]


def _entry_from_mask(mask: BinaryMask, confidence: float) -> MaskletEntry:
    polygon = mask_to_polygon(mask, min_pixels=1)
    bbox = polygon_to_bbox(polygon) if polygon is not None else None
    return MaskletEntry(mask, polygon, bbox, confidence)


def propagate_batch(
    batch: list[NewObject],
    frames: Sequence[int],
    propagator: PropagatorBackend,
) -> list[Masklet]:
    """Propagate one batch of new objects over the remaining frames.

    Each object becomes one masklet covering the given frames, with polygons
    and boxes derived from every nonempty mask. Propagator failures are
    re-raised tagged with the batch's object ids so chunk-mode fallback can
    react.
    """
    masklets = []
    for obj in batch:
        try:
            masks = propagator.propagate(obj.detection.box, obj.frame_index, frames)
        except PropagationError:
            raise
        except Exception as exc:
            raise PropagationError(
                f"propagation failed for objects {[o.object_id for o in batch]}: {exc}",
                tuple(o.object_id for o in batch),
            ) from exc
        m = Masklet(obj.object_id, obj.detection.class_label)
        for f, mask in zip(frames, masks):
            m.add_entry(f, _entry_from_mask(mask, obj.detection.confidence))
        masklets.append(m)
    return masklets


def remove_trailing_empty(m: Masklet, epsilon_mask: int) -> Masklet | None:
    """Drop entries after the last frame holding more than epsilon_mask pixels.

    A masklet whose every frame is at or below the floor is dropped entirely.
    """
    terminus = None
    for f in m.frames():
        if m.entries[f].mask.count > epsilon_mask:
            terminus = f
    if terminus is None:
        return None
    kept = {f: e for f, e in m.entries.items() if f <= terminus}
    return Masklet(m.object_id, m.class_label, kept)


def _align_rotation(cur: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Rotate cur's vertex order to minimize total squared distance to prev."""
    n = len(cur)
    best_r = 0
    best_cost = math.inf
    for r in range(n):
        rolled = np.roll(cur, -r, axis=0)
        cost = float(((rolled - prev) ** 2).sum())
        if cost < best_cost:
            best_cost = cost
            best_r = r
    return np.roll(cur, -best_r, axis=0)


def _polygon_centroid(p: Polygon) -> tuple[float, float]:
    return p.centroid()


def smooth_polygons(
    m: Masklet, alpha: float, resample_n: int, adaptive: bool = False
) -> Masklet:
    """Recursive weighted averaging of consecutive frames' boundaries.

    Polygons are resampled to a common vertex count and rotation-aligned, then
    blended with the previous frame's smoothed result. Gaps (missing frames or
    empty masks) reset the recursion. alpha = 1 is the identity.
    """
    if alpha >= 1.0:
        return m
    out = Masklet(m.object_id, m.class_label)
    prev: np.ndarray | None = None
    prev_frame: int | None = None
    prev_raw_centroid: tuple[float, float] | None = None
    for f in m.frames():
        entry = m.entries[f]
        if entry.polygon is None:
            out.entries[f] = entry
            prev = None
            prev_frame = None
            prev_raw_centroid = None
            continue
        cur = np.asarray(resample_polygon(entry.polygon, resample_n).vertices)
        if prev is None or prev_frame != f - 1:
            smoothed = cur
        else:
            a = alpha
            if adaptive and prev_raw_centroid is not None:
                cx, cy = _polygon_centroid(entry.polygon)
                speed = math.hypot(cx - prev_raw_centroid[0], cy - prev_raw_centroid[1])
                a = min(1.0, alpha * (1.0 + speed))
            aligned = _align_rotation(cur, prev)
            smoothed = a * aligned + (1.0 - a) * prev
        polygon = Polygon(tuple((float(x), float(y)) for x, y in smoothed))
        mask = rasterize_polygon(polygon, entry.mask.width, entry.mask.height)
        out.entries[f] = MaskletEntry(mask, polygon, polygon_to_bbox(polygon), entry.confidence)
        prev = smoothed
        prev_frame = f
        prev_raw_centroid = _polygon_centroid(entry.polygon)
    return out


def _merge_pass(present: list[Masklet], frame: int, tau_merge: float) -> bool:
    n = len(present)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    merged_any = False
    for i in range(n):
        for j in range(i + 1, n):
            v = iou_mask(present[i].entries[frame].mask, present[j].entries[frame].mask)
            if v > tau_merge:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    for root, members in groups.items():
        if len(members) < 2:
            continue
        merged_any = True
        keeper = present[root]
        union = keeper.entries[frame].mask.data.copy()
        for i in members:
            if i == root:
                continue
            union |= present[i].entries[frame].mask.data
            del present[i].entries[frame]
        keeper.entries[frame] = _entry_from_mask(
            BinaryMask(union), keeper.entries[frame].confidence
        )
    return merged_any


def merge_redundant_frame(
    masklets: list[Masklet], frame: int, tau_merge: float
) -> list[Masklet]:
    """Collapse duplicate segments at one frame into the lowest-id masklet.

    Pairs whose masks overlap above tau_merge are grouped transitively and
    replaced by their union under the lowest id. A union can create fresh
    overlap with a previously clear segment, so passes repeat until no
    surviving pair exceeds the threshold. Masklets left without entries are
    dropped.
    """
    while True:
        present = [
            m
            for m in masklets
            if frame in m.entries and not m.entries[frame].mask.is_empty()
        ]
        present.sort(key=lambda m: m.object_id)
        if len(present) < 2 or not _merge_pass(present, frame, tau_merge):
            break
    return [m for m in masklets if m.entries]


def run_ash(
    new_objects_by_frame: Mapping[int, list[NewObject]],
    frames: Sequence[int],
    propagator: PropagatorBackend,
    cfg: AshConfig,
    postprocess: bool = True,
) -> list[Masklet]:
    """Propagate every frame's new objects to the end of the span, then refine.

    Post-processing order: trailing-empty pruning, temporal smoothing, then
    per-frame redundancy merging.
    """
    frames = list(frames)
    masklets: list[Masklet] = []
    for t in sorted(new_objects_by_frame):
        batch_frames = [f for f in frames if f >= t]
        for batch in partition_batches(new_objects_by_frame[t], cfg.beta):
            masklets.extend(propagate_batch(batch, batch_frames, propagator))
    if postprocess:
        masklets = postprocess_masklets(masklets, frames, cfg)
    return masklets


def postprocess_masklets(
    masklets: list[Masklet], frames: Sequence[int], cfg: AshConfig
) -> list[Masklet]:
    pruned = []
    for m in masklets:
        kept = remove_trailing_empty(m, cfg.epsilon_mask)
        if kept is not None:
            pruned.append(kept)
    smoothed = [
        smooth_polygons(m, cfg.alpha, cfg.resample_n, cfg.adaptive_smoothing)
        for m in pruned
    ]
    for f in frames:
        smoothed = merge_redundant_frame(smoothed, f, cfg.tau_merge)
    return smoothed
