"""Long-sequence processing: chunk planning, overlap-based identity handoff,
three-phase checkpointing with filename-tagged restore, and automatic
full-vs-chunk fallback.

Chunks are processed strictly in order; checkpoint writes are single-writer.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .ash import (
    AshConfig,
    Masklet,
    MaskletEntry,
    PropagationError,
    partition_batches,
    postprocess_masklets,
    propagate_batch,
    remove_trailing_empty,
)
from .assoc import AssocConfig, Associator, NewObject, rescale_confidence, validate_box
from .backends import Detection, PropagatorBackend
from .geometry import BBox, BinaryMask, Polygon, iou_mask

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1

_CKPT_NAME = re.compile(r"^(?P<seq>.+)_ckpt_(?P<tag>initial|final|frame_(?P<num>\d+))\.json$")


class ProcessingBudgetExceeded(RuntimeError):
    """Full-sequence processing exceeded the configured frame-object budget."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChunkerConfig:
    chi: int = 50  # chunk size, frames
    omega: int = 10  # overlap between consecutive chunks, frames
    tau_overlap: float = 0.7  # average mask IoU needed to inherit an id
    window: int | None = None  # optimal-frame search radius; omega when None
    checkpoint_interval: int = 25  # frames between saves in full mode
    full_budget: int | None = None  # max propagated (frame x object) entries

    def __post_init__(self) -> None:
        if self.chi < 1:
            raise ValueError(f"chi must be >= 1: {self.chi}")
        if not 0 <= self.omega < self.chi:
            raise ValueError(f"need 0 <= omega < chi, got omega={self.omega}, chi={self.chi}")
        if not 0.0 < self.tau_overlap < 1.0:
            raise ValueError(f"tau_overlap out of (0,1): {self.tau_overlap}")
        if self.checkpoint_interval < 1:
            raise ValueError(f"checkpoint_interval must be >= 1: {self.checkpoint_interval}")

    @property
    def search_window(self) -> int:
        return self.omega if self.window is None else self.window


@dataclass(frozen=True)
class ChunkPlan:
    chunks: tuple[tuple[int, int], ...]  # inclusive [start, end] intervals
    overlap: int


def plan_chunks(num_frames: int, cfg: ChunkerConfig) -> ChunkPlan:
    """Sliding-window chunk intervals from the size/overlap recurrence.

    The first chunk starts at 0; each next chunk starts omega frames before
    the previous end; the last chunk is clipped to the final frame.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1: {num_frames}")
    if num_frames > cfg.chi and cfg.chi - cfg.omega < 2:
        raise ValueError(
            f"chunking cannot advance with chi={cfg.chi}, omega={cfg.omega}"
        )
    chunks = []
    start = 0
    while True:
        end = min(start + cfg.chi - 1, num_frames - 1)
        chunks.append((start, end))
        if end >= num_frames - 1:
            break
        start = end - cfg.omega
    return ChunkPlan(tuple(chunks), cfg.omega)


def find_optimal_frame(
    object_counts: Sequence[int], center: int, window: int
) -> int:
    """Frame with the highest object count inside [center-window, center+window].

    The window is clipped to the valid frame range; ties resolve to the lowest
    index.
    """
    lo = max(0, center - window)
    hi = min(len(object_counts) - 1, center + window)
    if lo > hi:
        raise ValueError(
            f"window [{center - window}, {center + window}] misses frames 0..{len(object_counts) - 1}"
        )
    best = lo
    for f in range(lo, hi + 1):
        if object_counts[f] > object_counts[best]:
            best = f
    return best


def merge_chunk_overlap(
    prev_masklets: list[Masklet],
    next_masklets: list[Masklet],
    overlap_frames: Sequence[int],
    tau_overlap: float = 0.7,
) -> dict[int, int]:
    """Map next-chunk object ids onto previous-chunk ids via overlap mask IoU.

    For every (previous, next) pair, the per-frame mask IoU is averaged over
    the overlap frames where at least one of the two masks is nonempty; pairs
    where both are absent contribute nothing. Ids are inherited greedily in
    descending average IoU while above tau_overlap, each previous id claimed
    at most once; everything else keeps its own (already unique) id.
    """
    if not overlap_frames:
        raise ValueError("overlap_frames must be nonempty")
    scores = []
    for a in prev_masklets:
        for b in next_masklets:
            total = 0.0
            frames_counted = 0
            for f in overlap_frames:
                ea = a.entries.get(f)
                eb = b.entries.get(f)
                ma = ea.mask if ea is not None else None
                mb = eb.mask if eb is not None else None
                a_empty = ma is None or ma.is_empty()
                b_empty = mb is None or mb.is_empty()
                if a_empty and b_empty:
                    continue
                frames_counted += 1
                if not a_empty and not b_empty:
                    total += iou_mask(ma, mb)
            if frames_counted:
                scores.append((total / frames_counted, a.object_id, b.object_id))
    scores.sort(key=lambda s: (-s[0], s[1], s[2]))
    mapping: dict[int, int] = {}
    claimed: set[int] = set()
    for avg, a_id, b_id in scores:
        if avg <= tau_overlap:
            break
        if b_id in mapping or a_id in claimed:
            continue
        mapping[b_id] = a_id
        claimed.add(a_id)
    for b in next_masklets:
        mapping.setdefault(b.object_id, b.object_id)
    return mapping


@dataclass
class Checkpoint:
    schema_version: int
    sequence_id: str
    last_completed_frame: int
    masklets: list[Masklet]
    assoc_state: dict
    rng_state: dict
    mode: str  # "full" | "chunk"
    chunk_index: int = -1

    def to_payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "sequence_id": self.sequence_id,
            "last_completed_frame": self.last_completed_frame,
            "mode": self.mode,
            "chunk_index": self.chunk_index,
            "assoc_state": self.assoc_state,
            "rng_state": self.rng_state,
            "masklets": [_masklet_to_payload(m) for m in self.masklets],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> Checkpoint:
        version = payload.get("schema_version")
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(
                f"checkpoint schema version {version!r} != {CHECKPOINT_SCHEMA_VERSION}"
            )
        return cls(
            schema_version=version,
            sequence_id=payload["sequence_id"],
            last_completed_frame=payload["last_completed_frame"],
            masklets=[_masklet_from_payload(p) for p in payload["masklets"]],
            assoc_state=payload["assoc_state"],
            rng_state=payload["rng_state"],
            mode=payload["mode"],
            chunk_index=payload["chunk_index"],
        )


def _masklet_to_payload(m: Masklet) -> dict:
    entries = {}
    for f in m.frames():
        e = m.entries[f]
        entries[str(f)] = {
            "mask": {"w": e.mask.width, "h": e.mask.height, "runs": e.mask.to_runs()},
            "polygon": [[x, y] for x, y in e.polygon.vertices] if e.polygon else None,
            "bbox": [e.bbox.x1, e.bbox.y1, e.bbox.x2, e.bbox.y2] if e.bbox else None,
            "confidence": e.confidence,
        }
    return {"object_id": m.object_id, "class_label": m.class_label, "entries": entries}


def _masklet_from_payload(payload: dict) -> Masklet:
    entries = {}
    for key, e in payload["entries"].items():
        mask = BinaryMask.from_runs(e["mask"]["w"], e["mask"]["h"], e["mask"]["runs"])
        polygon = (
            Polygon(tuple((float(x), float(y)) for x, y in e["polygon"]))
            if e["polygon"]
            else None
        )
        bbox = BBox(*e["bbox"]) if e["bbox"] else None
        entries[int(key)] = MaskletEntry(mask, polygon, bbox, e["confidence"])
    return Masklet(payload["object_id"], payload["class_label"], entries)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Three-phase atomic save: write temp, back up the existing file, promote.

    A crash at any point leaves at least one valid checkpoint: either the
    untouched original, or the backup (plus a complete temp awaiting
    promotion).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    backup = path.with_name(path.name + ".bak")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(ckpt.to_payload(), fh, separators=(",", ":"), sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    if path.exists():
        os.replace(path, backup)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint | None:
    """Load a checkpoint, falling back to its backup; None means start fresh.

    A corrupt or version-mismatched main file raises a CheckpointError naming
    the recovery file when one exists.
    """
    path = Path(path)
    backup = path.with_name(path.name + ".bak")

    def read(p: Path) -> Checkpoint:
        with open(p, encoding="utf-8") as fh:
            return Checkpoint.from_payload(json.load(fh))

    if path.exists():
        try:
            return read(path)
        except (json.JSONDecodeError, KeyError, CheckpointError) as exc:
            if backup.exists():
                raise CheckpointError(
                    f"checkpoint {path} unreadable ({exc}); recovery file: {backup}"
                ) from exc
            raise CheckpointError(f"checkpoint {path} unreadable ({exc})") from exc
    if backup.exists():
        logger.warning("checkpoint %s missing, recovering from %s", path, backup)
        return read(backup)
    return None


def resume_frame(name: str, max_processed_frame: int | None = None) -> int:
    """Start frame encoded in a checkpoint filename or bare tag.

    "initial" means process from scratch (-1); "final" resolves to the highest
    processed frame; a frame tag resolves to that frame number.
    """
    base = Path(name).name
    m = _CKPT_NAME.match(base)
    if m:
        tag = m.group("tag")
        num = m.group("num")
    else:
        tag = base
        fm = re.match(r"^(?:ckpt_)?frame_(\d+)$", base)
        num = fm.group(1) if fm else None
        if num:
            tag = f"frame_{num}"
    if tag == "initial":
        return -1
    if tag == "final":
        if max_processed_frame is None:
            raise ValueError("'final' checkpoint needs the max processed frame")
        return max_processed_frame
    if num is not None:
        return int(num)
    raise ValueError(f"unparseable checkpoint tag: {name!r}")


class CheckpointStore:
    """Frame-tagged checkpoint files for one sequence in one directory."""

    def __init__(self, directory: str | Path, sequence_id: str) -> None:
        self.directory = Path(directory)
        self.sequence_id = sequence_id

    def _path_for(self, tag: str) -> Path:
        return self.directory / f"{self.sequence_id}_ckpt_{tag}.json"

    def save(self, ckpt: Checkpoint, final: bool = False) -> Path:
        if final:
            tag = "final"
        elif ckpt.last_completed_frame < 0:
            tag = "initial"
        else:
            tag = f"frame_{ckpt.last_completed_frame:04d}"
        path = self._path_for(tag)
        save_checkpoint(ckpt, path)
        self._prune(keep=path)
        return path

    def _prune(self, keep: Path) -> None:
        # Keep the newest file plus its immediate predecessor for recovery.
        frames = []
        for p in self.directory.glob(f"{self.sequence_id}_ckpt_frame_*.json"):
            if p != keep:
                frames.append(p)
        frames.sort()
        for p in frames[:-1]:
            p.unlink(missing_ok=True)
            p.with_name(p.name + ".bak").unlink(missing_ok=True)

    def candidates(self) -> list[Path]:
        found = list(self.directory.glob(f"{self.sequence_id}_ckpt_*.json"))
        ordered: list[Path] = []
        final = self._path_for("final")
        if final in found:
            ordered.append(final)
        frames = sorted(
            (p for p in found if "_ckpt_frame_" in p.name), reverse=True
        )
        ordered.extend(frames)
        initial = self._path_for("initial")
        if initial in found:
            ordered.append(initial)
        return ordered

    def load_latest(self) -> Checkpoint | None:
        last_error: Exception | None = None
        tried = False
        for path in self.candidates():
            tried = True
            try:
                ckpt = load_checkpoint(path)
            except CheckpointError as exc:
                last_error = exc
                continue
            if ckpt is not None:
                return ckpt
        if tried and last_error is not None:
            raise last_error
        return None


def _prepare_detections(
    dets: list[Detection],
    frame_size: tuple[int, int],
    assoc_cfg: AssocConfig,
    rescale: bool,
) -> list[Detection]:
    w, h = frame_size
    valid = [d for d in dets if validate_box(d.box, w, h, assoc_cfg)[0]]
    if rescale and valid:
        new_scores = rescale_confidence([d.confidence for d in valid])
        valid = [replace(d, confidence=c) for d, c in zip(valid, new_scores)]
    return valid


def _clone_masklets(masklets: list[Masklet]) -> list[Masklet]:
    return [
        Masklet(m.object_id, m.class_label, dict(m.entries)) for m in masklets
    ]


def run_sequence(
    detections_per_frame: Sequence[list[Detection]],
    propagator: PropagatorBackend,
    frame_size: tuple[int, int],
    assoc_cfg: AssocConfig,
    ash_cfg: AshConfig,
    chunk_cfg: ChunkerConfig,
    mode: str = "auto",
    checkpoint_dir: str | Path | None = None,
    sequence_id: str = "seq",
    rescale: bool = True,
    resume: bool = False,
    rng_state: dict | None = None,
    on_frame: Callable[[int], None] | None = None,
) -> list[Masklet]:
    """Process a whole sequence into finalized masklets.

    "full" runs association and propagation over the entire span in one pass;
    "chunk" uses overlapping chunks with identity reconciliation; "auto"
    attempts full processing and falls back to chunk mode on a propagation
    failure or a blown processing budget. Full-mode checkpoints do not carry
    over into chunk mode, so the fallback restarts from frame 0.
    """
    if mode not in ("full", "chunk", "auto"):
        raise ValueError(f"mode must be full|chunk|auto, got {mode!r}")
    store = (
        CheckpointStore(checkpoint_dir, sequence_id)
        if checkpoint_dir is not None
        else None
    )
    rng_state = rng_state or {}
    if mode in ("full", "auto"):
        try:
            return _run_full(
                detections_per_frame,
                propagator,
                frame_size,
                assoc_cfg,
                ash_cfg,
                chunk_cfg,
                store,
                sequence_id,
                rescale,
                resume,
                rng_state,
                on_frame,
            )
        except (PropagationError, ProcessingBudgetExceeded) as exc:
            if mode == "full":
                raise
            logger.warning("full-sequence processing failed (%s); falling back to chunk mode", exc)
    try:
        return _run_chunked(
            detections_per_frame,
            propagator,
            frame_size,
            assoc_cfg,
            ash_cfg,
            chunk_cfg,
            store,
            sequence_id,
            rescale,
            resume,
            rng_state,
            on_frame,
        )
    except (PropagationError, ProcessingBudgetExceeded) as exc:
        last = store.candidates() if store else []
        ref = f"; last checkpoint: {last[0]}" if last else "; no checkpoint written"
        raise RuntimeError(f"both processing modes failed: {exc}{ref}") from exc


def _run_full(
    detections_per_frame: Sequence[list[Detection]],
    propagator: PropagatorBackend,
    frame_size: tuple[int, int],
    assoc_cfg: AssocConfig,
    ash_cfg: AshConfig,
    chunk_cfg: ChunkerConfig,
    store: CheckpointStore | None,
    sequence_id: str,
    rescale: bool,
    resume: bool,
    rng_state: dict,
    on_frame: Callable[[int], None] | None,
) -> list[Masklet]:
    num_frames = len(detections_per_frame)
    all_frames = list(range(num_frames))
    associator = Associator(assoc_cfg)
    masklets: list[Masklet] = []
    start = 0
    if resume and store is not None:
        ckpt = store.load_latest()
        if ckpt is not None and ckpt.mode == "full":
            associator.set_state(ckpt.assoc_state)
            masklets = ckpt.masklets
            start = ckpt.last_completed_frame + 1
            logger.info("resuming %s (full mode) at frame %d", sequence_id, start)

    budget = chunk_cfg.full_budget
    used = sum(len(m.entries) for m in masklets)
    for t in range(start, num_frames):
        dets = _prepare_detections(detections_per_frame[t], frame_size, assoc_cfg, rescale)
        result = associator.associate(dets, t)
        span = num_frames - t
        if result.new_objects and budget is not None:
            projected = used + len(result.new_objects) * span
            if projected > budget:
                raise ProcessingBudgetExceeded(
                    f"frame {t}: projected {projected} propagated entries > budget {budget}"
                )
        for batch in partition_batches(result.new_objects, ash_cfg.beta):
            produced = propagate_batch(batch, all_frames[t:], propagator)
            masklets.extend(produced)
            used += sum(len(m.entries) for m in produced)
        if on_frame is not None:
            on_frame(t)
        if store is not None and (
            (t + 1) % chunk_cfg.checkpoint_interval == 0 or t == num_frames - 1
        ):
            store.save(
                Checkpoint(
                    CHECKPOINT_SCHEMA_VERSION,
                    sequence_id,
                    t,
                    masklets,
                    associator.get_state(),
                    rng_state,
                    mode="full",
                ),
                final=(t == num_frames - 1),
            )
    return postprocess_masklets(masklets, all_frames, ash_cfg)


def derive_chunk_plan(
    object_counts: Sequence[int], cfg: ChunkerConfig
) -> ChunkPlan:
    """Chunk intervals with the start of each chunk pulled toward object-dense
    frames; coverage is preserved because an adjusted start never passes the
    previous chunk's end.
    """
    num_frames = len(object_counts)
    if num_frames <= cfg.chi:
        return ChunkPlan(((0, num_frames - 1),), cfg.omega)
    chunks: list[tuple[int, int]] = []
    current = 0
    while True:
        if chunks:
            optimal = find_optimal_frame(object_counts, current, cfg.search_window)
            start = max(0, optimal - cfg.omega)
            start = min(start, current)  # never skip frames
        else:
            start = 0
        end = min(num_frames - 1, start + cfg.chi - 1)
        if chunks and end <= chunks[-1][1]:
            # Degenerate adjustment; force forward progress.
            start = chunks[-1][1] - cfg.omega
            end = min(num_frames - 1, start + cfg.chi - 1)
        chunks.append((start, end))
        if end >= num_frames - 1:
            break
        current = end + 1
    return ChunkPlan(tuple(chunks), cfg.omega)


def _process_chunk(
    detections_per_frame: Sequence[list[Detection]],
    propagator: PropagatorBackend,
    frame_size: tuple[int, int],
    assoc_cfg: AssocConfig,
    ash_cfg: AshConfig,
    span: tuple[int, int],
    next_id: int,
    rescale: bool,
    on_frame: Callable[[int], None] | None,
) -> tuple[list[Masklet], int]:
    start, end = span
    frames = list(range(start, end + 1))
    associator = Associator(assoc_cfg, next_id=next_id)
    new_by_frame: dict[int, list[NewObject]] = {}
    for t in frames:
        dets = _prepare_detections(detections_per_frame[t], frame_size, assoc_cfg, rescale)
        result = associator.associate(dets, t)
        if result.new_objects:
            new_by_frame[t] = result.new_objects
        if on_frame is not None:
            on_frame(t)
    masklets: list[Masklet] = []
    for t in sorted(new_by_frame):
        tail = [f for f in frames if f >= t]
        for batch in partition_batches(new_by_frame[t], ash_cfg.beta):
            masklets.extend(propagate_batch(batch, tail, propagator))
    pruned = []
    for m in masklets:
        kept = remove_trailing_empty(m, ash_cfg.epsilon_mask)
        if kept is not None:
            pruned.append(kept)
    return pruned, associator.next_id


def _stitch(
    stitched: list[Masklet],
    chunk_masklets: list[Masklet],
    overlap_frames: list[int],
    tau_overlap: float,
) -> list[Masklet]:
    mapping = merge_chunk_overlap(stitched, chunk_masklets, overlap_frames, tau_overlap)
    by_id = {m.object_id: m for m in stitched}
    overlap_set = set(overlap_frames)
    for b in chunk_masklets:
        global_id = mapping[b.object_id]
        if global_id in by_id:
            target = by_id[global_id]
            for f in sorted(b.entries):
                if f in overlap_set:
                    continue  # previous chunk's entries win inside the overlap
                if f not in target.entries:
                    target.entries[f] = b.entries[f]
        else:
            kept = Masklet(global_id, b.class_label, dict(b.entries))
            by_id[global_id] = kept
            stitched.append(kept)
    return stitched


def _run_chunked(
    detections_per_frame: Sequence[list[Detection]],
    propagator: PropagatorBackend,
    frame_size: tuple[int, int],
    assoc_cfg: AssocConfig,
    ash_cfg: AshConfig,
    chunk_cfg: ChunkerConfig,
    store: CheckpointStore | None,
    sequence_id: str,
    rescale: bool,
    resume: bool,
    rng_state: dict,
    on_frame: Callable[[int], None] | None,
) -> list[Masklet]:
    num_frames = len(detections_per_frame)
    counts = [len(d) for d in detections_per_frame]
    plan = derive_chunk_plan(counts, chunk_cfg)
    stitched: list[Masklet] = []
    next_id = 0
    first_chunk = 0
    if resume and store is not None:
        ckpt = store.load_latest()
        if ckpt is not None and ckpt.mode == "chunk":
            stitched = ckpt.masklets
            next_id = ckpt.assoc_state.get("next_id", 0)
            first_chunk = ckpt.chunk_index + 1
            logger.info("resuming %s (chunk mode) at chunk %d", sequence_id, first_chunk)

    for i in range(first_chunk, len(plan.chunks)):
        span = plan.chunks[i]
        chunk_masklets, next_id = _process_chunk(
            detections_per_frame,
            propagator,
            frame_size,
            assoc_cfg,
            ash_cfg,
            span,
            next_id,
            rescale,
            on_frame,
        )
        if i == 0:
            stitched = chunk_masklets
        else:
            prev_end = plan.chunks[i - 1][1]
            overlap = list(range(span[0], min(prev_end, span[1]) + 1))
            if overlap:
                stitched = _stitch(stitched, chunk_masklets, overlap, chunk_cfg.tau_overlap)
            else:
                for b in chunk_masklets:
                    stitched.append(b)
        if store is not None:
            store.save(
                Checkpoint(
                    CHECKPOINT_SCHEMA_VERSION,
                    sequence_id,
                    span[1],
                    stitched,
                    {"next_id": next_id},
                    rng_state,
                    mode="chunk",
                    chunk_index=i,
                ),
                final=(i == len(plan.chunks) - 1),
            )
    return postprocess_masklets(stitched, range(num_frames), ash_cfg)
