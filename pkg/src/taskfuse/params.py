"""Flat parameter vectors with named-segment layouts and file persistence.

A model's parameters live in one contiguous float64 vector. The layout
records which span of that vector belongs to which named segment (a weight
matrix, a bias, ...). All merging arithmetic operates on these flat
vectors, so two models are combinable exactly when their layouts match.

The container file format used for checkpoints (and reused for datasets
and Fisher diagonals) is a UTF-8 JSON header line followed by a raw
little-endian float64 payload, with a CRC32 of the payload recorded in
the header.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContainerError, LayoutError

CONTAINER_FORMAT = "tfc1"


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered named segments covering ``[0, total_len)`` without gaps."""

    segments: tuple[tuple[str, int, int], ...]

    def __post_init__(self) -> None:
        segs = tuple((str(n), int(o), int(ln)) for n, o, ln in self.segments)
        object.__setattr__(self, "segments", segs)
        names = [name for name, _, _ in segs]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate segment names in layout: {names}")
        cursor = 0
        for name, offset, length in segs:
            if length <= 0:
                raise LayoutError(f"segment {name!r} has non-positive length {length}")
            if offset != cursor:
                raise LayoutError(
                    f"segment {name!r} starts at offset {offset}, expected {cursor}; "
                    "segments must be contiguous and non-overlapping"
                )
            cursor += length
        if cursor == 0:
            raise LayoutError("a layout needs at least one segment")

    @classmethod
    def from_sizes(cls, sizes: Sequence[tuple[str, int]]) -> "SegmentLayout":
        """Build a layout from ``(name, length)`` pairs, offsets implied."""
        segments = []
        offset = 0
        for name, length in sizes:
            segments.append((name, offset, int(length)))
            offset += int(length)
        return cls(tuple(segments))

    @property
    def total_len(self) -> int:
        name, offset, length = self.segments[-1]
        return offset + length

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _, _ in self.segments)

    def slice_of(self, name: str) -> slice:
        for seg_name, offset, length in self.segments:
            if seg_name == name:
                return slice(offset, offset + length)
        raise KeyError(f"no segment named {name!r}")

    def to_json(self) -> list[list]:
        return [[name, offset, length] for name, offset, length in self.segments]

    @classmethod
    def from_json(cls, data: Sequence[Sequence]) -> "SegmentLayout":
        return cls(tuple((str(n), int(o), int(ln)) for n, o, ln in data))


def check_same_layout(a: SegmentLayout, b: SegmentLayout, context: str = "") -> None:
    """Raise LayoutError naming the first differing segment, if any."""
    if a == b:
        return
    prefix = f"{context}: " if context else ""
    for i in range(max(len(a.segments), len(b.segments))):
        seg_a = a.segments[i] if i < len(a.segments) else None
        seg_b = b.segments[i] if i < len(b.segments) else None
        if seg_a != seg_b:
            raise LayoutError(
                f"{prefix}layouts differ at segment {i}: "
                f"{seg_a!r} vs {seg_b!r} (name, offset, length)"
            )
    raise LayoutError(f"{prefix}layouts differ")  # pragma: no cover


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat float64 parameter vector plus its segment layout."""

    layout: SegmentLayout
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if arr.size != self.layout.total_len:
            raise LayoutError(
                f"value vector has {arr.size} entries, layout declares "
                f"{self.layout.total_len}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        """Read-only view of one named segment."""
        return self.values[self.layout.slice_of(name)]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        """New vector with the same layout and different values."""
        return ParamVector(self.layout, values)


def task_vector(fine_tuned: ParamVector, pretrained: ParamVector) -> ParamVector:
    """Difference between a fine-tuned model and its shared initialization."""
    check_same_layout(fine_tuned.layout, pretrained.layout, "task_vector")
    return ParamVector(pretrained.layout, fine_tuned.values - pretrained.values)


def axpy_into_pretrained(
    pretrained: ParamVector,
    scaled_taus: Sequence[tuple[float, ParamVector]],
) -> ParamVector:
    """Return ``pretrained + sum(coefficient * tau)`` over the given pairs."""
    out = pretrained.values.copy()
    for i, (coeff, tau) in enumerate(scaled_taus):
        coeff = float(coeff)
        if not np.isfinite(coeff):
            raise ValueError(f"coefficient {i} is non-finite: {coeff}")
        check_same_layout(pretrained.layout, tau.layout, f"axpy term {i}")
        out += coeff * tau.values
    return ParamVector(pretrained.layout, out)


@dataclass(frozen=True)
class Checkpoint:
    """A parameter vector plus the metadata needed to rebuild its model.

    ``model_meta`` must declare ``param_count`` matching the vector length;
    ``provenance`` records task name, training seed, and step count.
    """

    param_vector: ParamVector
    model_meta: Mapping = field(default_factory=dict)
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        declared = self.model_meta.get("param_count")
        if declared is None:
            raise ValueError("model_meta must declare 'param_count'")
        if int(declared) != len(self.param_vector):
            raise ValueError(
                f"model_meta declares {declared} parameters, vector has "
                f"{len(self.param_vector)}"
            )


# --- container format -----------------------------------------------------


def write_container(path, kind: str, meta: Mapping, payload: np.ndarray) -> None:
    """Write a header + float64 payload container file."""
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    raw = payload.tobytes()
    header = {
        "format": CONTAINER_FORMAT,
        "kind": kind,
        "meta": dict(meta),
        "count": payload.size,
        "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(raw)


def read_container(path, expect_kind: str | None = None) -> tuple[str, dict, np.ndarray]:
    """Read a container file, verifying structure and checksum."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ContainerError(f"{path}: no header line found")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != CONTAINER_FORMAT:
        raise ContainerError(f"{path}: not a {CONTAINER_FORMAT} container")
    for key in ("kind", "meta", "count", "crc32"):
        if key not in header:
            raise ContainerError(f"{path}: header missing {key!r}")
    raw = blob[newline + 1 :]
    count = int(header["count"])
    if len(raw) != count * 8:
        raise ContainerError(
            f"{path}: payload length mismatch: header declares {count} float64 "
            f"values ({count * 8} bytes), file holds {len(raw)} bytes"
        )
    if (zlib.crc32(raw) & 0xFFFFFFFF) != int(header["crc32"]):
        raise ContainerError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    kind = str(header["kind"])
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    return kind, header["meta"], values


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "layout": ckpt.param_vector.layout.to_json(),
        "model_meta": dict(ckpt.model_meta),
        "provenance": dict(ckpt.provenance),
    }
    write_container(path, "checkpoint", meta, ckpt.param_vector.values)


def load_checkpoint(path) -> Checkpoint:
    _, meta, values = read_container(path, expect_kind="checkpoint")
    try:
        layout = SegmentLayout.from_json(meta["layout"])
        return Checkpoint(
            param_vector=ParamVector(layout, values),
            model_meta=meta["model_meta"],
            provenance=meta["provenance"],
        )
    except (KeyError, TypeError, LayoutError) as exc:
        raise ContainerError(f"{path}: invalid checkpoint metadata: {exc}") from exc
