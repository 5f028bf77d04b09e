"""Image and label primitives, binary mask metrics, PGM and manifest I/O.

Intensities are normalized to [0, 1] at load time; all downstream math works
on unit-range float64.  Binary PGM (P5, maxval 255) is the only raster
format.  All types are immutable values after construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PgmError(Exception):
    """Base class for PGM parse/serialize failures."""


class MalformedHeaderError(PgmError):
    pass


class UnsupportedFormatError(PgmError):
    pass


class UnsupportedMaxvalError(PgmError):
    pass


class TruncatedPayloadError(PgmError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single grayscale frame, row-major float64 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("GrayImage expects a 2-D array")
        d = self.data.astype(np.float64, copy=False)
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class GraySequence:
    """Temporal stack of same-size frames with one designated key frame."""

    frames: tuple[GrayImage, ...]
    key_frame_index: int

    def __post_init__(self):
        if not self.frames:
            raise ValueError("sequence needs at least one frame")
        h, w = self.frames[0].data.shape
        for f in self.frames:
            if f.data.shape != (h, w):
                raise ValueError("all frames must share dimensions")
        if not 0 <= self.key_frame_index < len(self.frames):
            raise ValueError("key_frame_index out of range")
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def key_frame(self) -> GrayImage:
        return self.frames[self.key_frame_index]

    def as_matrix(self) -> np.ndarray:
        """Pixels x frames stack (each frame flattened row-major)."""
        return np.column_stack([f.data.ravel() for f in self.frames])


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Per-pixel binary labels: 0 = background, 1 = vessel."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("LabelGrid expects a 2-D array")
        lab = self.labels.astype(np.uint8, copy=False)
        if lab.size and not np.isin(np.unique(lab), (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class MetricReport:
    tp: int
    fn: int
    fp: int
    recall: float
    precision: float
    dice: float

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fn": self.fn, "fp": self.fp,
            "recall": self.recall, "precision": self.precision, "dice": self.dice,
        }


def evaluate_mask(pred: LabelGrid, truth: LabelGrid) -> MetricReport:
    """Pixel-wise TP/FN/FP counts and the derived ratios.

    Any 0/0 ratio is defined as 0, which penalizes degenerate predictions
    consistently across run modes.
    """
    if pred.labels.shape != truth.labels.shape:
        raise ValueError("mask dimensions differ")
    p = pred.labels.astype(bool)
    t = truth.labels.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fn = int(np.count_nonzero(~p & t))
    fp = int(np.count_nonzero(p & ~t))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    dice = 2 * tp / (2 * tp + fn + fp) if 2 * tp + fn + fp else 0.0
    return MetricReport(tp, fn, fp, recall, precision, dice)


# ---------------------------------------------------------------------------
# PGM (P5) I/O

_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(buf[pos:])
        if not m:
            raise MalformedHeaderError("incomplete PGM header")
        tokens.append(m.group(1))
        pos += m.end()
    return tokens, pos


def pgm_from_bytes(buf: bytes) -> GrayImage:
    if len(buf) < 2:
        raise MalformedHeaderError("file too short for a PGM header")
    magic = buf[:2]
    if magic != b"P5":
        if magic in (b"P1", b"P2", b"P3", b"P4", b"P6"):
            raise UnsupportedFormatError(f"only binary PGM (P5) is supported, got {magic.decode('ascii', 'replace')}")
        raise MalformedHeaderError("not a PGM file")
    try:
        (w_tok, h_tok, maxval_tok), pos = _read_tokens(buf[2:], 3)
    except MalformedHeaderError:
        raise
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric header field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("non-positive dimensions")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval must be 255, got {maxval}")
    sep = buf[2 + pos: 2 + pos + 1]
    if sep not in (b" ", b"\t", b"\n", b"\r"):
        raise MalformedHeaderError("missing whitespace between header and raster")
    payload = buf[2 + pos + 1:]
    if len(payload) < width * height:
        raise TruncatedPayloadError(f"expected {width * height} pixels, got {len(payload)}")
    raw = np.frombuffer(payload[: width * height], dtype=np.uint8)
    return GrayImage(raw.reshape(height, width).astype(np.float64) / 255.0)


def pgm_to_bytes(image: GrayImage) -> bytes:
    raw = np.rint(image.data * 255.0).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + raw.tobytes()


def load_pgm(path: str | Path) -> GrayImage:
    return pgm_from_bytes(Path(path).read_bytes())


def save_pgm(image: GrayImage, path: str | Path) -> None:
    Path(path).write_bytes(pgm_to_bytes(image))


def label_to_image(grid: LabelGrid) -> GrayImage:
    return GrayImage(grid.labels.astype(np.float64))


def label_from_image(image: GrayImage) -> LabelGrid:
    return LabelGrid((image.data >= 0.5).astype(np.uint8))


def load_label_pgm(path: str | Path) -> LabelGrid:
    return label_from_image(load_pgm(path))


def save_label_pgm(grid: LabelGrid, path: str | Path) -> None:
    save_pgm(label_to_image(grid), path)


# ---------------------------------------------------------------------------
# Dataset manifest

@dataclass(frozen=True)
class ManifestEntry:
    sequence_dir: str
    key_frame_index: int
    ground_truth_path: str | None = None


@dataclass(frozen=True)
class Manifest:
    train: tuple[ManifestEntry, ...]
    val: tuple[ManifestEntry, ...]
    test: tuple[ManifestEntry, ...]

    def split(self, name: str) -> tuple[ManifestEntry, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _entry_from_json(obj: dict) -> ManifestEntry:
    return ManifestEntry(
        sequence_dir=obj["sequence_dir"],
        key_frame_index=int(obj["key_frame_index"]),
        ground_truth_path=obj.get("ground_truth_path"),
    )


def load_manifest(path: str | Path) -> Manifest:
    obj = json.loads(Path(path).read_text())
    splits = {}
    for name in ("train", "val", "test"):
        splits[name] = tuple(_entry_from_json(e) for e in obj.get(name, []))
    return Manifest(**splits)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    def enc(entry: ManifestEntry) -> dict:
        d = {"sequence_dir": entry.sequence_dir, "key_frame_index": entry.key_frame_index}
        if entry.ground_truth_path is not None:
            d["ground_truth_path"] = entry.ground_truth_path
        return d

    obj = {name: [enc(e) for e in getattr(manifest, name)] for name in ("train", "val", "test")}
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def load_sequence(manifest_dir: str | Path, entry: ManifestEntry) -> GraySequence:
    seq_dir = Path(manifest_dir) / entry.sequence_dir
    frame_paths = sorted(seq_dir.glob("frame_*.pgm"))
    if not frame_paths:
        raise FileNotFoundError(f"no frames under {seq_dir}")
    frames = tuple(load_pgm(p) for p in frame_paths)
    return GraySequence(frames=frames, key_frame_index=entry.key_frame_index)


def load_ground_truth(manifest_dir: str | Path, entry: ManifestEntry) -> LabelGrid | None:
    if entry.ground_truth_path is None:
        return None
    return load_label_pgm(Path(manifest_dir) / entry.ground_truth_path)
