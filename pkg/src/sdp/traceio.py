"""Bit-exact persistence: raw traces, canonical tensors, manifests, splits.

Raw trace ("SDPR"), all integers little-endian:
    magic `SDPR` | version u16 (=1) | carrier_hz f64 | sample_rate_hz f64 |
    n_tx u8 | n_rx u8 | k_raw u16 | k_raw * f64 subcarrier offsets (Hz) |
    frame_count u32 | per frame: timestamp f64 then n_rx*n_tx*k_raw complex
    values laid out [rx][tx][subcarrier], each as (f32 real, f32 imag).

Canonical tensor ("SDPC"):
    magic `SDPC` | version u16 (=1) | a u16 | k u16 | t u32 |
    label_id i32 (-1 = unlabeled) | subject_id i32 (-1 = none) |
    window_start f64 | provenance length u16 + UTF-8 bytes |
    a*k*t complex values laid out [a][k][t] as (f32 real, f32 imag).

Manifest: tab-separated text with header
    path\tlabel_id\tlabel_name\tsubject\tenv\tsplit
one entry per row. Complex payloads are f32 pairs by contract, so in-memory
float64 values are quantized on write; files round-trip byte-identically.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .canonical import CanonicalTensor
from .csimodel import DeviceProfile, RawCsiFrame, RawCsiStream

RAW_MAGIC = b"SDPR"
TENSOR_MAGIC = b"SDPC"
FORMAT_VERSION = 1
MANIFEST_HEADER = "path\tlabel_id\tlabel_name\tsubject\tenv\tsplit"
SPLITS = ("train", "val", "test", "unassigned")


class TraceIOError(Exception):
    """Base for format errors; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class BadMagic(TraceIOError):
    pass


class UnsupportedVersion(TraceIOError):
    pass


class TruncatedFile(TraceIOError):
    def __init__(self, message: str, offset: int, frame_index: int | None = None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        super().__init__(message, offset)
        self.frame_index = frame_index


class ShapeMismatch(TraceIOError):
    pass


class _Cursor:
    """Sequential reader that reports the byte offset of every failure."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, frame_index: int | None = None) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"file ends inside {what}", self.pos, frame_index)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, frame_index: int | None = None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, frame_index))


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def _write_sink(sink, payload: bytes) -> None:
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)


def _complex_to_f32_bytes(values: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(values).ravel()
    inter = np.empty(2 * flat.size, dtype="<f4")
    inter[0::2] = flat.real.astype("<f4")
    inter[1::2] = flat.imag.astype("<f4")
    return inter.tobytes()


def _complex_from_f32_bytes(raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    inter = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    values = inter[0::2] + 1j * inter[1::2]
    return values.reshape(shape)


# ---------------------------------------------------------------------------
# Raw traces


def raw_trace_bytes(stream: RawCsiStream) -> bytes:
    p = stream.profile
    stream.validate()
    buf = io.BytesIO()
    buf.write(RAW_MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<dd", p.carrier_hz, p.sample_rate_hz))
    buf.write(struct.pack("<BBH", p.n_tx, p.n_rx, p.k_raw))
    buf.write(p.subcarrier_offsets_hz.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(stream.frames)))
    for fr in stream.frames:
        buf.write(struct.pack("<d", fr.timestamp_s))
        buf.write(_complex_to_f32_bytes(fr.values))
    return buf.getvalue()


def write_raw_trace(stream: RawCsiStream, sink) -> None:
    _write_sink(sink, raw_trace_bytes(stream))


def read_raw_trace(source) -> RawCsiStream:
    cur = _Cursor(_read_source(source))
    magic = cur.take(4, "magic")
    if magic != RAW_MAGIC:
        raise BadMagic(f"expected {RAW_MAGIC!r}, found {magic!r}", 0)
    (version,) = cur.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version} not supported", 4)
    carrier, sample_rate = cur.unpack("<dd", "header")
    n_tx, n_rx, k_raw = cur.unpack("<BBH", "header")
    offsets = np.frombuffer(cur.take(8 * k_raw, "subcarrier offsets"), dtype="<f8")
    try:
        profile = DeviceProfile(carrier_hz=carrier, subcarrier_offsets_hz=offsets.copy(),
                                n_tx=n_tx, n_rx=n_rx, sample_rate_hz=sample_rate)
    except ValueError as exc:
        raise ShapeMismatch(f"invalid header: {exc}", 4 + 2) from exc
    (frame_count,) = cur.unpack("<I", "frame count")
    n_values = n_rx * n_tx * k_raw
    frames = []
    for i in range(frame_count):
        (ts,) = cur.unpack("<d", "frame timestamp", frame_index=i)
        raw = cur.take(8 * n_values, "frame payload", frame_index=i)
        values = _complex_from_f32_bytes(raw, (n_rx, n_tx, k_raw))
        frames.append(RawCsiFrame(timestamp_s=ts, values=values))
    if cur.pos != len(cur.data):
        raise ShapeMismatch(
            f"{len(cur.data) - cur.pos} trailing bytes after declared "
            f"{frame_count} frames", cur.pos)
    return RawCsiStream(profile=profile, frames=frames, provenance="")


# ---------------------------------------------------------------------------
# Canonical tensors


def tensor_bytes(tensor: CanonicalTensor) -> bytes:
    a, k, t = tensor.values.shape
    label = -1 if tensor.label is None else int(tensor.label)
    subject = -1 if tensor.subject is None else int(tensor.subject)
    prov = tensor.source.encode("utf-8")
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<HHI", a, k, t))
    buf.write(struct.pack("<ii", label, subject))
    buf.write(struct.pack("<d", tensor.window_start_s))
    buf.write(struct.pack("<H", len(prov)))
    buf.write(prov)
    buf.write(_complex_to_f32_bytes(tensor.values))
    return buf.getvalue()


def write_tensor(tensor: CanonicalTensor, sink) -> None:
    _write_sink(sink, tensor_bytes(tensor))


def read_tensor(source) -> CanonicalTensor:
    cur = _Cursor(_read_source(source))
    magic = cur.take(4, "magic")
    if magic != TENSOR_MAGIC:
        raise BadMagic(f"expected {TENSOR_MAGIC!r}, found {magic!r}", 0)
    (version,) = cur.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version} not supported", 4)
    shape_offset = cur.pos
    a, k, t = cur.unpack("<HHI", "shape header")
    if a < 1 or k < 1 or t < 1:
        raise ShapeMismatch(f"invalid tensor shape {a}x{k}x{t}", shape_offset)
    label, subject = cur.unpack("<ii", "labels")
    (window_start,) = cur.unpack("<d", "window start")
    (prov_len,) = cur.unpack("<H", "provenance length")
    prov = cur.take(prov_len, "provenance").decode("utf-8")
    payload_offset = cur.pos
    expected = 8 * a * k * t
    available = len(cur.data) - cur.pos
    if available < expected:
        raise TruncatedFile(
            f"payload holds {available // 8} of {a * k * t} declared values",
            payload_offset)
    if available > expected:
        raise ShapeMismatch(
            f"payload holds {available // 8} values but header declares {a * k * t}",
            payload_offset)
    values = _complex_from_f32_bytes(cur.take(expected, "payload"), (a, k, t))
    return CanonicalTensor(values=values,
                           label=None if label < 0 else label,
                           subject=None if subject < 0 else subject,
                           window_start_s=window_start, source=prov)


# ---------------------------------------------------------------------------
# Manifests and splits


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label_id: int | float
    label_name: str
    subject: int
    env: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    task_kind: str = "classification"   # in-memory only; the file format is header + rows

    def validate(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("sample paths must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r} for {e.path}")
        if self.task_kind == "classification" and self.entries:
            labels = sorted({int(e.label_id) for e in self.entries})
            if any(float(e.label_id) != int(e.label_id) for e in self.entries):
                raise ValueError("classification labels must be integral")
            if labels != list(range(len(labels))):
                raise ValueError(f"label ids must be dense from 0, got {labels}")

    def subjects(self) -> set[int]:
        return {e.subject for e in self.entries}

    def label_names(self) -> list[str]:
        """Class names indexed by label id (classification manifests)."""
        names: dict[int, str] = {}
        for e in self.entries:
            names[int(e.label_id)] = e.label_name
        return [names[i] for i in sorted(names)]

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def _format_label(label) -> str:
    return str(int(label)) if float(label) == int(label) else repr(float(label))


def write_manifest(manifest: DatasetManifest, sink) -> None:
    manifest.validate()
    lines = [MANIFEST_HEADER]
    for e in manifest.entries:
        lines.append("\t".join([e.path, _format_label(e.label_id), e.label_name,
                                str(e.subject), e.env, e.split]))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    _write_sink(sink, payload)


def read_manifest(source, task_kind: str = "classification") -> DatasetManifest:
    text = _read_source(source).decode("utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"manifest must start with header {MANIFEST_HEADER!r}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 6:
            raise ValueError(f"manifest line {lineno}: expected 6 columns, got {len(cols)}")
        label = float(cols[1]) if task_kind == "regression" else int(cols[1])
        entries.append(ManifestEntry(path=cols[0], label_id=label, label_name=cols[2],
                                     subject=int(cols[3]), env=cols[4], split=cols[5]))
    manifest = DatasetManifest(entries=entries, task_kind=task_kind)
    manifest.validate()
    return manifest


class EmptyTrain(ValueError):
    """The holdout covers every subject; nothing is left to train on."""


@dataclass(frozen=True)
class SplitAssignment:
    holdout_subjects: frozenset[int]
    val_fraction: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "holdout_subjects", frozenset(self.holdout_subjects))
        if not self.holdout_subjects:
            raise ValueError("holdout_subjects must be nonempty")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in [0, 1)")


def cross_user_split(manifest: DatasetManifest,
                     assignment: SplitAssignment) -> DatasetManifest:
    """Subject-disjoint split: holdout subjects' samples become the test set.

    Remaining samples are shuffled with the assignment seed and the first
    round(val_fraction * n) become validation, the rest training. Entry order
    is preserved in the output; only split labels change.
    """
    subjects = manifest.subjects()
    unknown = set(assignment.holdout_subjects) - subjects
    if unknown:
        raise ValueError(f"holdout subjects not present in manifest: {sorted(unknown)}")
    if set(assignment.holdout_subjects) >= subjects:
        raise EmptyTrain("holdout covers every subject in the manifest")
    rest_idx = [i for i, e in enumerate(manifest.entries)
                if e.subject not in assignment.holdout_subjects]
    rng = np.random.default_rng(assignment.seed)
    order = rng.permutation(len(rest_idx))
    n_val = int(round(assignment.val_fraction * len(rest_idx)))
    val_set = {rest_idx[order[i]] for i in range(n_val)}
    entries = []
    for i, e in enumerate(manifest.entries):
        if e.subject in assignment.holdout_subjects:
            split = "test"
        elif i in val_set:
            split = "val"
        else:
            split = "train"
        entries.append(replace(e, split=split))
    return DatasetManifest(entries=entries, task_kind=manifest.task_kind)


def assert_split_leak_free(manifest: DatasetManifest) -> None:
    """Raises if any subject appears both in train/val and in test."""
    fit = {e.subject for e in manifest.entries if e.split in ("train", "val")}
    test = {e.subject for e in manifest.entries if e.split == "test"}
    overlap = fit & test
    if overlap:
        raise ValueError(f"subjects leak across the split boundary: {sorted(overlap)}")
