"""Online object association: box validation, confidence rescaling, and
greedy IoU matching of detections to live tracks.

Association state is sequence-local and single-writer: one frame must finish
before the next begins.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .backends import Detection
from .geometry import BBox, iou_box


@dataclass(frozen=True)
class AssocConfig:
    tau_track_det: float = 0.5  # IoU needed to match a detection to a track
    lambda_min: float = 10.0  # px, smallest allowed box side
    lambda_max: float = 1000.0  # px, largest allowed box side
    margin: float = 0.5  # px, required distance from frame edges
    aspect_range: tuple[float, float] = (0.2, 5.0)
    track_buffer: int = 20  # frames a track survives unmatched
    track_thresh: float = 0.6  # pass-throughs; do not gate detections here
    match_thresh: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_track_det <= 1.0:
            raise ValueError(f"tau_track_det out of (0,1]: {self.tau_track_det}")
        if self.lambda_min >= self.lambda_max:
            raise ValueError(
                f"need lambda_min < lambda_max, got {self.lambda_min}, {self.lambda_max}"
            )


@dataclass(frozen=True)
class Track:
    id: int
    last_box: BBox
    last_seen_frame: int
    class_label: str
    age: int = 0  # frames since last match


@dataclass(frozen=True)
class NewObject:
    """A detection that opened a fresh track and needs segmentation."""

    object_id: int
    detection: Detection
    frame_index: int


@dataclass(frozen=True)
class AssociationResult:
    mapping: dict[int, int]  # detection index -> matched track id
    new_objects: list[NewObject]
    tracks: list[Track]  # live tracks after the update
    next_id: int


def validate_box(
    b: BBox, frame_w: float, frame_h: float, cfg: AssocConfig
) -> tuple[bool, str | None]:
    """Accept a box only if its sides, position, and aspect ratio are sane.

    Returns (accepted, reason); the reason names the failed criterion.
    """
    w, h = b.width, b.height
    if not (cfg.lambda_min <= w <= cfg.lambda_max and cfg.lambda_min <= h <= cfg.lambda_max):
        return False, f"size ({w:.1f}x{h:.1f}) outside [{cfg.lambda_min}, {cfg.lambda_max}]"
    m = cfg.margin
    if b.x1 < m or b.y1 < m or b.x2 > frame_w - m or b.y2 > frame_h - m:
        return False, f"box not inside margins [{m}, {frame_w - m}]x[{m}, {frame_h - m}]"
    if h <= 0:
        return False, "zero height"
    aspect = w / h
    lo, hi = cfg.aspect_range
    if not lo <= aspect <= hi:
        return False, f"aspect {aspect:.2f} outside [{lo}, {hi}]"
    return True, None


def rescale_confidence(
    scores: list[float], lo: float = 0.7, hi: float = 0.95
) -> list[float]:
    """Affine map of [min(scores), max(scores)] onto [lo, hi].

    Order-preserving; a constant input maps to the midpoint of the target
    range.
    """
    if not scores:
        raise ValueError("scores must be nonempty")
    smin, smax = min(scores), max(scores)
    if smax == smin:
        mid = (lo + hi) / 2.0
        return [mid for _ in scores]
    span = smax - smin
    # Divide before scaling: the ratio stays in [0, 1] even when the score
    # span is subnormal, where a precomputed 1/span would overflow.
    return [lo + ((s - smin) / span) * (hi - lo) for s in scores]


def associate_frame(
    tracks: list[Track],
    dets: list[Detection],
    frame_index: int,
    cfg: AssocConfig,
    next_id: int = 0,
) -> AssociationResult:
    """Match detections to live tracks by greedy descending IoU.

    Pairs above tau_track_det are claimed in descending-IoU order (ties break
    toward the lower track id, then the lower detection index), each track and
    detection at most once. Unmatched detections open new tracks with ids from
    a strictly monotone counter; tracks unmatched for more than track_buffer
    frames are retired.
    """
    pairs = []
    for ti, track in enumerate(tracks):
        for di, det in enumerate(dets):
            v = iou_box(track.last_box, det.box)
            if v > cfg.tau_track_det:
                pairs.append((v, track.id, di, ti))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    mapping: dict[int, int] = {}
    track_to_det: dict[int, int] = {}
    matched_det: set[int] = set()
    for _, _, di, ti in pairs:
        if ti in track_to_det or di in matched_det:
            continue
        track_to_det[ti] = di
        matched_det.add(di)
        mapping[di] = tracks[ti].id

    updated: list[Track] = []
    for ti, track in enumerate(tracks):
        if ti in track_to_det:
            di = track_to_det[ti]
            updated.append(
                replace(
                    track,
                    last_box=dets[di].box,
                    last_seen_frame=frame_index,
                    age=0,
                )
            )
        else:
            aged = replace(track, age=track.age + 1)
            if aged.age <= cfg.track_buffer:
                updated.append(aged)

    new_objects: list[NewObject] = []
    for di, det in enumerate(dets):
        if di in matched_det:
            continue
        obj_id = next_id
        next_id += 1
        new_objects.append(NewObject(obj_id, det, frame_index))
        updated.append(
            Track(
                id=obj_id,
                last_box=det.box,
                last_seen_frame=frame_index,
                class_label=det.class_label,
                age=0,
            )
        )
    return AssociationResult(mapping, new_objects, updated, next_id)


@dataclass
class Associator:
    """Stateful per-sequence wrapper around associate_frame."""

    cfg: AssocConfig = field(default_factory=AssocConfig)
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    last_frame: int | None = None

    def associate(self, dets: list[Detection], frame_index: int) -> AssociationResult:
        if self.last_frame is not None and frame_index <= self.last_frame:
            raise ValueError(
                f"frames must be strictly increasing: {frame_index} after {self.last_frame}"
            )
        result = associate_frame(self.tracks, dets, frame_index, self.cfg, self.next_id)
        self.tracks = result.tracks
        self.next_id = result.next_id
        self.last_frame = frame_index
        return result

    def get_state(self) -> dict:
        return {
            "next_id": self.next_id,
            "last_frame": self.last_frame,
            "tracks": [
                {
                    "id": t.id,
                    "box": [t.last_box.x1, t.last_box.y1, t.last_box.x2, t.last_box.y2],
                    "last_seen_frame": t.last_seen_frame,
                    "class_label": t.class_label,
                    "age": t.age,
                }
                for t in self.tracks
            ],
        }

    def set_state(self, state: dict) -> None:
        self.next_id = state["next_id"]
        self.last_frame = state["last_frame"]
        self.tracks = [
            Track(
                id=t["id"],
                last_box=BBox(*t["box"]),
                last_seen_frame=t["last_seen_frame"],
                class_label=t["class_label"],
                age=t["age"],
            )
            for t in state["tracks"]
        ]
