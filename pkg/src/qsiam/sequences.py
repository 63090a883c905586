"""Sequence directories and result files.

A sequence is a directory of numerically ordered frames (directly inside it,
or in a ``color/``, ``img/`` or ``frames/`` subdirectory) plus
``groundtruth.txt`` with one comma-separated box per frame: ``x,y,w,h``
(top-left) or an 8-value polygon, which is reduced to its bounding rectangle.
"""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .boxes import BBox
from .errors import IngestionError

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"}
FRAME_SUBDIRS = ("color", "img", "frames")
GROUNDTRUTH = "groundtruth.txt"


@dataclass(frozen=True)
class Sequence:
    name: str
    frames: tuple[Path, ...]
    groundtruth: tuple[BBox, ...]

    def __len__(self):
        return len(self.frames)


def _frame_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def list_frames(seq_dir) -> list[Path]:
    seq_dir = Path(seq_dir)
    for cand in (seq_dir, *(seq_dir / s for s in FRAME_SUBDIRS)):
        if cand.is_dir():
            frames = [p for p in cand.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
            if frames:
                return sorted(frames, key=_frame_key)
    return []


def parse_box_line(line: str, path, lineno: int) -> BBox:
    try:
        vals = [float(v) for v in re.split(r"[,\s]+", line.strip()) if v]
    except ValueError:
        raise IngestionError(f"{path}:{lineno}: non-numeric box {line.strip()!r}") from None
    if len(vals) == 4:
        x, y, w, h = vals
    elif len(vals) == 8:
        xs, ys = vals[0::2], vals[1::2]
        x, y = min(xs), min(ys)
        w, h = max(xs) - x, max(ys) - y
    else:
        raise IngestionError(f"{path}:{lineno}: expected 4 or 8 values, got {len(vals)}")
    if not (w > 0 and h > 0):
        raise IngestionError(f"{path}:{lineno}: box has non-positive size")
    return BBox.from_xywh(x, y, w, h)


def load_groundtruth(path) -> list[BBox]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    return [parse_box_line(line, path, i) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def load_sequence(seq_dir) -> Sequence:
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise IngestionError(f"sequence directory {seq_dir} does not exist")
    frames = list_frames(seq_dir)
    if not frames:
        raise IngestionError(f"{seq_dir}: no image frames found")
    gt = load_groundtruth(seq_dir / GROUNDTRUTH)
    if not gt:
        raise IngestionError(f"{seq_dir / GROUNDTRUTH}: empty ground truth")
    if len(gt) < len(frames):
        raise IngestionError(f"{seq_dir}: {len(frames)} frames but {len(gt)} ground-truth lines")
    return Sequence(seq_dir.name, tuple(frames), tuple(gt[: len(frames)]))


def list_sequences(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset directory {root} does not exist")
    seqs = sorted(p for p in root.iterdir() if (p / GROUNDTRUTH).is_file())
    if not seqs:
        raise IngestionError(f"{root}: no sequences (directories with {GROUNDTRUTH})")
    return seqs


def format_boxes(boxes) -> str:
    return "".join("{:.4f},{:.4f},{:.4f},{:.4f}\n".format(*b.to_xywh()) for b in boxes)


def write_text_atomic(path, text: str) -> None:
    """Write via a temporary file so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results(path, boxes) -> None:
    write_text_atomic(path, format_boxes(boxes))
