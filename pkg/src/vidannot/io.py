"""File formats: MOT-style detection/track CSV, line-delimited polygon
annotations, and the pipeline configuration file.

All writers are byte-deterministic given identical input; readers invert them
on the value level.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

from .ash import AshConfig, Masklet
from .assoc import AssocConfig
from .backends import (
    DetectionNoise,
    MaskGeneratorConfig,
    PropagationDegradation,
    SyntheticWorldConfig,
)
from .chunker import ChunkerConfig
from .config import DeploymentConfig, PipelineConfig
from .geometry import BBox, Polygon
from .smart_od import SmartOdConfig

ANNOTATION_SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class MotRecord:
    """One row of the 9-column MOT CSV layout (frame is 1-based)."""

    frame: int
    track_id: int  # -1 for raw detections
    x: float
    y: float
    w: float
    h: float
    conf: float
    class_id: int = 1
    visibility: float = 1.0

    def __post_init__(self) -> None:
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1: {self.frame}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive: {self.w}x{self.h}")

    @property
    def box(self) -> BBox:
        return BBox(self.x, self.y, self.x + self.w, self.y + self.h)


def read_mot(path: str | Path) -> dict[int, list[MotRecord]]:
    """Parse a MOT CSV into records grouped by frame, preserving line order."""
    out: dict[int, list[MotRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise FormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                rec = MotRecord(
                    frame=int(parts[0]),
                    track_id=int(parts[1]),
                    x=float(parts[2]),
                    y=float(parts[3]),
                    w=float(parts[4]),
                    h=float(parts[5]),
                    conf=float(parts[6]),
                    class_id=int(parts[7]),
                    visibility=float(parts[8]),
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(rec.frame, []).append(rec)
    return out


def write_mot(records: Iterable[MotRecord], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(
                f"{r.frame},{r.track_id},{r.x:.6f},{r.y:.6f},{r.w:.6f},{r.h:.6f},"
                f"{r.conf:.6f},{r.class_id},{r.visibility:.6f}\n"
            )


@dataclass(frozen=True)
class AnnotationEntry:
    track_id: int
    class_label: str
    confidence: float
    polygon: Polygon
    bbox: BBox


@dataclass
class AnnotationDocument:
    sequence_id: str
    frame_width: int
    frame_height: int
    frames: dict[int, list[AnnotationEntry]] = field(default_factory=dict)
    schema_version: int = ANNOTATION_SCHEMA_VERSION


def _round6(v: float) -> float:
    return round(v, 6)


def write_annotations(doc: AnnotationDocument, path: str | Path) -> None:
    """Line-delimited output: a header line, then one frame object per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": doc.schema_version,
        "sequence_id": doc.sequence_id,
        "frame_width": doc.frame_width,
        "frame_height": doc.frame_height,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for f in sorted(doc.frames):
            objects = [
                {
                    "track_id": e.track_id,
                    "class_label": e.class_label,
                    "confidence": _round6(e.confidence),
                    "polygon": [[_round6(x), _round6(y)] for x, y in e.polygon.vertices],
                    "bbox": [_round6(e.bbox.x1), _round6(e.bbox.y1), _round6(e.bbox.x2), _round6(e.bbox.y2)],
                }
                for e in doc.frames[f]
            ]
            fh.write(
                json.dumps({"frame": f, "objects": objects}, sort_keys=True, separators=(",", ":"))
                + "\n"
            )


def read_annotations(path: str | Path) -> AnnotationDocument:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty annotation file")
    try:
        header = json.loads(lines[0])
        doc = AnnotationDocument(
            sequence_id=header["sequence_id"],
            frame_width=header["frame_width"],
            frame_height=header["frame_height"],
            schema_version=header["schema_version"],
        )
        for line in lines[1:]:
            payload = json.loads(line)
            entries = [
                AnnotationEntry(
                    track_id=o["track_id"],
                    class_label=o["class_label"],
                    confidence=o["confidence"],
                    polygon=Polygon(tuple((float(x), float(y)) for x, y in o["polygon"])),
                    bbox=BBox(*o["bbox"]),
                )
                for o in payload["objects"]
            ]
            doc.frames[payload["frame"]] = entries
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: malformed annotation file: {exc}") from exc
    return doc


def masklets_to_mot(masklets: list[Masklet]) -> list[MotRecord]:
    """Track records for every nonempty masklet entry, frame-major order."""
    rows: list[tuple[int, int]] = []
    by_key = {}
    for m in masklets:
        for f in m.frames():
            e = m.entries[f]
            if e.bbox is None:
                continue
            rows.append((f, m.object_id))
            by_key[(f, m.object_id)] = (e, m)
    rows.sort()
    out = []
    for f, oid in rows:
        e, m = by_key[(f, oid)]
        out.append(
            MotRecord(
                frame=f + 1,
                track_id=oid,
                x=e.bbox.x1,
                y=e.bbox.y1,
                w=max(e.bbox.width, 1e-6),
                h=max(e.bbox.height, 1e-6),
                conf=e.confidence,
            )
        )
    return out


def masklets_to_document(
    masklets: list[Masklet], sequence_id: str, frame_width: int, frame_height: int
) -> AnnotationDocument:
    doc = AnnotationDocument(sequence_id, frame_width, frame_height)
    keyed = []
    for m in masklets:
        for f in m.frames():
            e = m.entries[f]
            if e.polygon is None or e.bbox is None:
                continue
            keyed.append((f, m.object_id, AnnotationEntry(m.object_id, m.class_label, e.confidence, e.polygon, e.bbox)))
    keyed.sort(key=lambda k: (k[0], k[1]))
    for f, _, entry in keyed:
        doc.frames.setdefault(f, []).append(entry)
    return doc


_SECTION_TYPES = {
    "smart_od": SmartOdConfig,
    "assoc": AssocConfig,
    "ash": AshConfig,
    "chunker": ChunkerConfig,
    "deploy": DeploymentConfig,
    "mask_generator": MaskGeneratorConfig,
    "world": SyntheticWorldConfig,
    "noise": DetectionNoise,
    "degradation": PropagationDegradation,
}
_SCALAR_KEYS = {"rescale_confidences", "seed"}

_TUPLE_FIELDS = {
    "aspect_range",
    "tp_confidence_range",
    "fp_confidence_range",
    "ellipse_axes",
    "drift_px_per_frame",
}


def _build_section(name: str, cls: type, payload: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise FormatError(f"unknown field(s) in '{name}': {', '.join(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        elif key == "velocities" and isinstance(value, list):
            value = tuple(tuple(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid '{name}' config: {exc}") from exc


def parse_config(payload: dict) -> PipelineConfig:
    """Build a PipelineConfig from a plain dict; missing fields take defaults,
    unknown fields are rejected by name."""
    unknown = sorted(set(payload) - set(_SECTION_TYPES) - _SCALAR_KEYS)
    if unknown:
        raise FormatError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name not in payload or payload[name] is None:
            continue
        if not isinstance(payload[name], Mapping):
            raise FormatError(f"config section '{name}' must be an object")
        kwargs[name] = _build_section(name, cls, dict(payload[name]))
    if "rescale_confidences" in payload:
        kwargs["rescale_confidences"] = bool(payload["rescale_confidences"])
    if "seed" in payload:
        kwargs["seed"] = int(payload["seed"])
    return PipelineConfig(**kwargs)


def read_config(path: str | Path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError(f"{path}: config root must be an object")
    return parse_config(payload)


def serialize_config(cfg: PipelineConfig) -> dict:
    """Normalized plain-dict form; parse_config inverts it."""
    out: dict = {}
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        out[name] = None if section is None else dataclasses.asdict(section)
    out["rescale_confidences"] = cfg.rescale_confidences
    out["seed"] = cfg.seed
    # JSON round trip normalizes tuples to lists at every nesting level.
    return json.loads(json.dumps(out))


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(serialize_config(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
