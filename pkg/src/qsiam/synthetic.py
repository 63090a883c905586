"""Synthetic sequences with known ground truth for tracker checks."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .boxes import BBox
from .sequences import GROUNDTRUTH, format_boxes


def textured_patch(size: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Blocky random texture; blocks survive the 8x pooling of the stub features."""
    n = -(-size // block)
    tiles = rng.integers(20, 236, size=(n, n, 3)).astype(np.uint8)
    return np.repeat(np.repeat(tiles, block, axis=0), block, axis=1)[:size, :size]


def translating_square(n_frames: int = 50, frame_size=(240, 320), square: int = 40,
                       start=(60.0, 100.0), velocity=(2.0, 0.0), background: int = 128,
                       block: int = 10, seed: int = 0):
    """Frames of a textured square moving ``velocity`` px/frame on a plain background.

    ``start`` and ``velocity`` are (x, y). Returns (frames, boxes); frame t
    holds the square with top-left at ``start + t * velocity`` (rounded to
    whole pixels, as are the returned boxes).
    """
    rng = np.random.default_rng(seed)
    tex = textured_patch(square, block, rng)
    h, w = frame_size
    frames, boxes = [], []
    for t in range(n_frames):
        x = int(round(start[0] + t * velocity[0]))
        y = int(round(start[1] + t * velocity[1]))
        frame = np.full((h, w, 3), background, dtype=np.uint8)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + square, w), min(y + square, h)
        if x1 > x0 and y1 > y0:
            frame[y0:y1, x0:x1] = tex[y0 - y:y1 - y, x0 - x:x1 - x]
        frames.append(frame)
        boxes.append(BBox.from_xywh(x, y, square, square))
    return frames, boxes


def write_sequence(seq_dir, frames, boxes) -> Path:
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames, 1):
        cv2.imwrite(str(seq_dir / f"{i:08d}.png"), f)
    (seq_dir / GROUNDTRUTH).write_text(format_boxes(boxes))
    return seq_dir
